"""Quick built-in property checks, run by ``spde-deepsplit selftest``.

These exercise the installed package without the test suite: gradients
against finite differences, Adam against a scalar recursion, Milstein-map
identities, reference formulas and a short deterministic training run.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn
from ._backend import BACKEND, get_kernels
from .harness import ExperimentConfig, rel_l2, run_experiment
from .optim import AdamState, adam_step
from .problems import (HeatMultiplicative, Zakai, div_mu_zakai, reference_heat_additive,
                       reference_heat_mult)
from .rng import make_stream


def fd_rel_error(a, b, floor=1e-6):
    """Max relative difference, with an absolute floor for near-zero entries."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def fd_gradient(f, x, h=3e-4):
    """Fourth-order central differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        out.flat[i] = (-f(x + 2 * e) + 8 * f(x + e) - 8 * f(x - e) + f(x - 2 * e)) / (12 * h)
    return out


def check_param_gradient(d, seed, batch=16, hidden_dim=None, batch_norm=True):
    stream = make_stream(seed, 7)
    shape = nn.NetworkShape(d, hidden_dim=hidden_dim, batch_norm=batch_norm)
    theta = nn.init_params(stream, shape)
    X = stream.normal((batch, d))
    y = stream.normal(batch)
    g = nn.loss_and_grad(theta, X, y, shape)[1]
    fd = fd_gradient(lambda t: nn.loss_and_grad(t, X, y, shape)[0], theta)
    return fd_rel_error(g, fd)


def check_input_gradient(d, seed, hidden_dim=None, batch_norm=True):
    stream = make_stream(seed, 8)
    shape = nn.NetworkShape(d, hidden_dim=hidden_dim, batch_norm=batch_norm)
    theta = nn.init_params(stream, shape)
    state = nn.BatchNormState.initial(shape)
    lay = nn.layout_for(shape)
    state.running_mean[:] = 0.1 * stream.normal(lay.n_stats)
    state.running_var[:] = 0.5 + stream.uniform(lay.n_stats)
    x = stream.normal(d)
    g = nn.net_input_grad(theta, state, x, shape)
    fd = fd_gradient(lambda v: nn.net_forward_infer(theta, state, v, shape), x)
    return fd_rel_error(g, fd)


def adam_reference(theta0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop version of the Adam recursion."""
    theta = [float(t) for t in theta0]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for k, g in enumerate(grads, 1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** k)
            vh = v[i] / (1 - b2 ** k)
            theta[i] -= lr * mh / (math.sqrt(abs(vh)) + eps)
    return np.array(theta)


def _checks():
    yield "backend", BACKEND in ("cython", "python"), BACKEND

    worst = max(check_param_gradient(d, s, hidden_dim=d + 5) for d in (1, 3) for s in range(2))
    yield "parameter gradient vs finite differences", worst <= 1e-5, f"{worst:.2e}"
    worst = max(check_input_gradient(d, s, hidden_dim=d + 5) for d in (1, 3, 5) for s in range(2))
    yield "input gradient vs finite differences", worst <= 1e-5, f"{worst:.2e}"

    rs = make_stream(3, 0)
    th0 = rs.normal(5)
    grads = rs.normal((100, 5))
    st, th = AdamState.zeros(5), th0.copy()
    for g in grads:
        st, th = adam_step(st, th, g, 1e-3)
    diff = float(np.max(np.abs(th - adam_reference(th0, grads, 1e-3))))
    yield "adam vs scalar recursion", diff <= 1e-12, f"{diff:.1e}"

    hm = HeatMultiplicative(dim=2)
    x, u, z, dt = rs.normal((4, 2)), rs.normal(4), rs.normal((4, 1)), 0.02
    res = hm.milstein(x, u, None, z, dt) - (u + u * z[:, 0])
    ok = np.allclose(res, u * (0.5 * z[:, 0] ** 2 - 0.5 * dt), rtol=0, atol=1e-14)
    yield "heat-mul Milstein residual", ok, ""
    zk = Zakai(dim=3)
    out = zk.milstein(np.zeros((4, 3)), u, None, rs.normal((4, 3)), dt)
    ok = np.allclose(out, u * (1 - zk.gamma * 3 * dt), rtol=0, atol=1e-14)
    yield "Zakai Milstein at x=0", ok, ""
    yield "Zakai divergence at 0", abs(div_mu_zakai(np.zeros(4)) - 0.4) < 1e-15, ""

    yield "heat-add reference", abs(reference_heat_additive(1, [0.0], 0.035) - 2.035) < 1e-12, ""
    val = reference_heat_mult(0.5, [0.0], 1.2781)
    yield "heat-mul reference", abs(val - 2.7957) < 1e-4, f"{val:.5f}"
    yield "rel_l2 aggregation", abs(rel_l2([0.0084, 0.0064, 0.0063, 0.0006, 0.0053]) - 0.0060) < 1e-4, ""

    cfg = ExperimentConfig(problem="heat-add", dim=1, M=200, runs=1, seed=11)
    a = run_experiment(cfg).to_csv(include_runtime=False)
    b = run_experiment(cfg).to_csv(include_runtime=False)
    yield "deterministic short run", a == b, ""

    if BACKEND == "cython":
        py = get_kernels("python")
        cy = get_kernels("cython")
        shape = nn.NetworkShape(3)
        lay = nn.layout_for(shape)
        th = nn.init_params(rs, shape)
        X, y = rs.normal((16, 3)), rs.normal(16)
        lp = py.loss_grad(th, lay, X, y, 1e-3)
        lc = cy.loss_grad(th, lay, X, y, 1e-3)
        diff = float(np.max(np.abs(lp[1] - lc[1])))
        yield "cython and python kernels agree", diff < 1e-10, f"{diff:.1e}"


def run_selftest(out=print) -> bool:
    ok_all = True
    for name, ok, info in _checks():
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({info})" if info else ""))
    return ok_all
