"""Reference solutions that need numerics: Black-Scholes Monte Carlo and a 1-d Zakai solver."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from .problems import BlackScholes, Zakai
from .rng import RngStream, make_stream


class OracleError(RuntimeError):
    pass


def bs_v(t, x, problem: BlackScholes, stream: RngStream = None, n_pairs=200_000, phi=None,
         chunk=50_000):
    """Monte Carlo value of the deterministic Black-Scholes part at ``(t, x)``.

    Averages ``phi`` over the exact log-normal law of each coordinate using
    antithetic pairs.  Returns ``(value, standard_error)``; ``phi`` defaults
    to the problem's payoff and may be replaced for testing.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    phi = problem.phi if phi is None else phi
    if t <= 0:
        return float(phi(x[None, :])[0]), 0.0
    if stream is None:
        stream = make_stream(0, 0)
    mu, sig = problem.mu, problem.sigma
    drift = (mu - 0.5 * sig * sig) * t
    scale = sig * np.sqrt(t)
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_pairs:
        k = min(chunk, n_pairs - done)
        g = stream.normal((k, x.size))
        plus = phi(x * np.exp(drift + scale * g))
        minus = phi(x * np.exp(drift - scale * g))
        pair = 0.5 * (plus + minus)
        total += pair.sum()
        total_sq += np.dot(pair, pair)
        done += k
    mean = total / n_pairs
    var = max(total_sq / n_pairs - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / n_pairs))


def reference_bs(t, x, w_t, problem: BlackScholes, stream: RngStream = None, n_pairs=200_000):
    """``exp(W_t - t/2) v(t, x)``; returns ``(value, standard_error)``."""
    v, se = bs_v(t, x, problem, stream, n_pairs)
    factor = np.exp(w_t - 0.5 * t)
    return float(factor * v), float(factor * se)


def _fp_matrices(problem: Zakai, xs, dt):
    """Crank-Nicolson pieces for ``1/2 X'' - (mu X)'`` with zero Dirichlet ends.

    Returns the banded implicit matrix (``solve_banded`` layout) and a
    function applying the explicit half.
    """
    n = xs.size
    dx = xs[1] - xs[0]
    mu = problem.mu(xs[:, None])[:, 0]
    diff = 0.5 / dx**2
    # row i of the operator: lo[i] X_{i-1} + mid[i] X_i + up[i] X_{i+1}; boundary rows stay 0
    lo = np.zeros(n)
    mid = np.zeros(n)
    up = np.zeros(n)
    lo[1:-1] = diff + mu[:-2] / (2.0 * dx)
    mid[1:-1] = -2.0 * diff
    up[1:-1] = diff - mu[2:] / (2.0 * dx)
    h = 0.5 * dt
    ab = np.zeros((3, n))
    ab[0, 1:] = -h * up[:-1]
    ab[1] = 1.0 - h * mid
    ab[2, :-1] = -h * lo[1:]

    def explicit(X):
        out = X + h * mid * X
        out[1:] += h * lo[1:] * X[:-1]
        out[:-1] += h * up[:-1] * X[1:]
        return out

    return ab, explicit


def reference_zakai_1d(problem: Zakai, noise, x_eval=0.0, n_space=2048, substeps=16,
                       half_width=None, boundary_tol=1e-6):
    """Finite-difference solution of the 1-d Zakai equation along one observation path.

    Alternates Crank-Nicolson steps of the Fokker-Planck operator with the
    exact multiplicative update ``X <- X exp(h dZ - |h|^2 dt / 2)`` at the
    resolution of the stored observation path (``noise.substeps`` points per
    coarse step).  ``substeps`` is the number of Fokker-Planck steps per
    coarse step.
    """
    if problem.dim != 1:
        raise OracleError("the finite-difference Zakai oracle is one-dimensional")
    grid = noise.grid
    T = grid.T
    if half_width is None:
        half_width = 6.0 * (problem.alpha ** -0.5 + np.sqrt(T))
    xs = np.linspace(-half_width, half_width, n_space)
    X = problem.phi(xs[:, None])
    X[0] = X[-1] = 0.0
    K = noise.substeps
    per_obs = max(1, int(round(substeps / K)))
    z = noise.fine_values[:, 0]
    hx = problem.h(xs[:, None])[:, 0]
    fine_dt = grid.T / (grid.N * K)
    dt_fp = fine_dt / per_obs
    ab, explicit = _fp_matrices(problem, xs, dt_fp)
    for k in range(grid.N * K):
        for _ in range(per_obs):
            X = solve_banded((1, 1), ab, explicit(X), check_finite=False)
        dz = z[k + 1] - z[k]
        X = X * np.exp(hx * dz - 0.5 * hx * hx * fine_dt)
    edge = max(1, n_space // 20)
    total = np.abs(X).sum()
    tail = np.abs(X[:edge]).sum() + np.abs(X[-edge:]).sum()
    if not np.isfinite(total) or tail > boundary_tol * total:
        raise OracleError(f"boundary mass fraction {tail / total:.2e} exceeds tolerance; "
                          "enlarge the domain")
    return float(np.interp(x_eval, xs, X))
