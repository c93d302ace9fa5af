"""Benchmark SPDEs: coefficients, transition maps, Milstein targets and references.

Each problem is the equation

    X_t(x) = phi(x) + int f(x, X, grad X) ds + int <b(x, X, grad X), dZ_s(x)>
             + int [1/2 Tr(sigma sigma^* Hess X) + <mu, grad X>] ds

for a specific choice of coefficients.  Batched callables take ``x`` of
shape ``(J, d)``, ``u`` of shape ``(J,)``, ``w`` of shape ``(J, d)`` and noise
increments ``z`` of shape ``(J, delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .optim import LrSchedule


@dataclass(frozen=True)
class Defaults:
    T: float
    N: int
    M: int
    schedule: LrSchedule
    x_eval: float  # every coordinate of the evaluation point


class SpdeProblem:
    """Base class; subclasses fill in the coefficient maps."""

    id = "abstract"
    noise_kind = "brownian"
    #: True when composing transitions over consecutive intervals equals one
    #: transition over their union in law, so paths may skip intermediate times
    exact_transition = False
    #: id of the reference solution used by the experiment harness
    oracle = None

    dim: int
    T: float

    @property
    def noise_dim(self):
        return 1

    # -- coefficients ---------------------------------------------------------
    def phi(self, x):
        raise NotImplementedError

    def phi_grad(self, x):
        raise NotImplementedError

    def f(self, x, u, w):
        return np.zeros_like(u)

    def b(self, x, u, w):
        raise NotImplementedError

    def transition(self, t, s, x, w):
        """One step of the auxiliary diffusion from time ``s`` to ``t`` with increment ``w``."""
        raise NotImplementedError

    def milstein(self, x, u, w, z, dt):
        raise NotImplementedError

    def simulate_paths(self, tau, xi, dB):
        """Apply :meth:`transition` along ``tau``; ``dB`` has shape ``(K, J, d)``.

        Returns the states at indices ``0..K`` with shape ``(K+1, J, d)``.
        """
        K = dB.shape[0]
        out = np.empty((K + 1,) + xi.shape)
        out[0] = xi
        for k in range(K):
            out[k + 1] = self.transition(tau[k + 1], tau[k], out[k], dB[k])
        return out

    @property
    def defaults(self) -> Defaults:
        raise NotImplementedError

    def x_eval(self):
        return np.full(self.dim, float(self.defaults.x_eval))

    def with_T(self, T):
        return replace(self, T=float(T))


def _sqnorm(x):
    return np.einsum("ij,ij->i", x, x)


def _milstein_scalar_mult(u, z, dt):
    z = z[:, 0]
    return u * (1.0 + z + 0.5 * z * z - 0.5 * dt)


@dataclass(frozen=True)
class HeatAdditive(SpdeProblem):
    """``dX = Laplace(X) dt + dW`` with ``X_0 = |x|^2``."""

    dim: int = 1
    T: float = 1.0
    id = "heat-add"
    oracle = "heat-add"
    exact_transition = True

    @property
    def defaults(self):
        return Defaults(1.0, 5, 8000,
                        LrSchedule([(2000, 1e-1), (4000, 1e-2), (6000, 1e-3), (8000, 1e-4)]), 0.0)

    def phi(self, x):
        return _sqnorm(x)

    def phi_grad(self, x):
        return 2.0 * x

    def b(self, x, u, w):
        return np.ones((len(u), 1))

    def transition(self, t, s, x, w):
        return x + np.sqrt(2.0) * w

    def simulate_paths(self, tau, xi, dB):
        out = np.empty((dB.shape[0] + 1,) + xi.shape)
        out[0] = xi
        np.cumsum(np.sqrt(2.0) * dB, axis=0, out=out[1:])
        out[1:] += xi
        return out

    def milstein(self, x, u, w, z, dt):
        return u + z[:, 0]

    def reference(self, t, x, w_t):
        return reference_heat_additive(t, x, w_t, self.dim)


@dataclass(frozen=True)
class HeatMultiplicative(HeatAdditive):
    """``dX = Laplace(X) dt + X dW`` with ``X_0 = |x|^2``."""

    dim: int = 1
    T: float = 0.5
    id = "heat-mul"
    oracle = "heat-mul"

    @property
    def defaults(self):
        return Defaults(0.5, 25, 12000,
                        LrSchedule([(5000, 1e-1), (7000, 1e-2), (10000, 1e-3), (12000, 1e-4)]), 0.0)

    def b(self, x, u, w):
        return u[:, None].copy()

    def milstein(self, x, u, w, z, dt):
        return _milstein_scalar_mult(u, z, dt)

    def reference(self, t, x, w_t):
        return reference_heat_mult(t, x, w_t, self.dim)


@dataclass(frozen=True)
class BlackScholes(SpdeProblem):
    """Multi-asset Black-Scholes operator with multiplicative noise ``X dW``."""

    dim: int = 1
    T: float = 0.5
    rate: float = 1.0 / 50.0
    strike: float = 100.0
    id = "black-scholes"
    oracle = "black-scholes"
    exact_transition = True

    @property
    def mu(self):
        i = np.arange(1, self.dim + 1)
        return (np.sin(i * self.dim) + 1.0) / self.dim

    @property
    def sigma(self):
        i = np.arange(1, self.dim + 1)
        return i / (4.0 * self.dim)

    @property
    def defaults(self):
        return Defaults(0.5, 20, 10000,
                        LrSchedule([(4000, 1e-1), (6000, 1e-2), (8000, 1e-3), (10000, 1e-4)]), 100.0)

    def phi(self, x):
        return np.exp(-self.rate * self.T) * np.maximum(x.max(axis=1) - self.strike, 0.0)

    def phi_grad(self, x):
        g = np.zeros_like(x)
        rows = np.arange(len(x))
        idx = x.argmax(axis=1)
        g[rows, idx] = np.where(x[rows, idx] > self.strike, np.exp(-self.rate * self.T), 0.0)
        return g

    def b(self, x, u, w):
        return u[:, None].copy()

    def transition(self, t, s, x, w):
        sig = self.sigma
        return x * np.exp((self.mu - 0.5 * sig * sig) * (t - s) + sig * w)

    def simulate_paths(self, tau, xi, dB):
        sig = self.sigma
        dt = np.diff(tau)[:, None, None]
        logs = (self.mu - 0.5 * sig * sig) * dt + sig * dB
        out = np.empty((dB.shape[0] + 1,) + xi.shape)
        out[0] = xi
        out[1:] = xi * np.exp(np.cumsum(logs, axis=0))
        return out

    def milstein(self, x, u, w, z, dt):
        return _milstein_scalar_mult(u, z, dt)


@dataclass(frozen=True)
class Zakai(SpdeProblem):
    """Zakai equation for the unnormalized filter density of a diffusion signal.

    Signal ``dY = mu(Y) dt + sigma dW`` with ``Y_0 ~ N(0, I/alpha)``, observation
    ``dZ = h(Y) dt + dV``, ``h(x) = beta x``, ``mu(x) = gamma x / (1 + |x|^2)``.

    ``aux_drift_sign`` is the sign of ``mu`` in the auxiliary diffusion used
    to generate regression inputs.  The Zakai operator contains
    ``-div(mu X)``, i.e. the transport term ``-<mu, grad X>``, so the matching
    auxiliary process drifts along ``-mu`` (the default).
    """

    dim: int = 1
    T: float = 0.5
    alpha: float = 2.0 * np.pi
    beta: float = 0.25
    gamma: float = 0.1
    aux_drift_sign: float = -1.0
    id = "zakai"
    noise_kind = "zakai"
    oracle = "zakai-fd"

    @property
    def noise_dim(self):
        return self.dim

    @property
    def defaults(self):
        return Defaults(0.5, 25, 12000,
                        LrSchedule([(5000, 1e-2), (10000, 1e-3), (12000, 1e-4)]), 0.0)

    def h(self, x):
        return self.beta * x

    def mu(self, x):
        return self.gamma * x / (1.0 + _sqnorm(x))[:, None]

    def div_mu(self, x):
        r2 = _sqnorm(x)
        q = 1.0 + r2
        return self.gamma * (self.dim / q - 2.0 * r2 / (q * q))

    def sigma_apply(self, x, w):
        s = w.sum(axis=-1, keepdims=True) / np.sqrt(self.dim)
        return np.broadcast_to(s, w.shape).copy()

    def phi(self, x):
        a = self.alpha
        return (a / (2.0 * np.pi)) ** (self.dim / 2.0) * np.exp(-0.5 * a * _sqnorm(x))

    def phi_grad(self, x):
        return -self.alpha * x * self.phi(x)[:, None]

    def f(self, x, u, w):
        return -u * self.div_mu(x)

    def b(self, x, u, w):
        return u[:, None] * self.h(x)

    def transition(self, t, s, x, w):
        return x + self.aux_drift_sign * self.mu(x) * (t - s) + self.sigma_apply(x, w)

    def milstein(self, x, u, w, z, dt):
        hx = self.h(x)
        hz = np.einsum("ij,ij->i", hx, z)
        return (u - u * self.div_mu(x) * dt + u * hz + 0.5 * u * hz * hz
                - 0.5 * u * dt * _sqnorm(hx))


PROBLEMS = {
    "heat-add": HeatAdditive,
    "heat-mul": HeatMultiplicative,
    "black-scholes": BlackScholes,
    "zakai": Zakai,
}

# config keys that map onto problem constructor fields
COEFFICIENT_KEYS = {
    "alpha": "alpha",
    "beta": "beta",
    "gamma_drift": "gamma",
    "rate_r": "rate",
    "strike": "strike",
    "aux_drift_sign": "aux_drift_sign",
}


def make_problem(problem_id: str, dim: int, T: Optional[float] = None, **coeffs) -> SpdeProblem:
    try:
        cls = PROBLEMS[problem_id]
    except KeyError:
        raise ValueError(f"unknown problem {problem_id!r}; choose from {sorted(PROBLEMS)}") from None
    if dim < 1:
        raise ValueError("dimension must be positive")
    prob = cls(dim=int(dim), **coeffs)
    return prob.with_T(prob.defaults.T if T is None else T)


def milstein_target(problem: SpdeProblem, x, u, w, z, dt):
    """Regression label for one time step.

    Vectorized over rows; a single point can be passed as 1-d arrays and a
    scalar ``u``.
    """
    if dt <= 0:
        raise ValueError("time step must be positive")
    single = np.ndim(u) == 0
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_2d(np.asarray(w, dtype=float))
    z = np.asarray(z, dtype=float).reshape(len(u), -1)
    out = problem.milstein(x, u, w, z, dt)
    return float(out[0]) if single else out


def div_mu_zakai(x, gamma=0.1):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = Zakai(dim=x.shape[1], gamma=gamma).div_mu(x)
    return float(out[0]) if out.size == 1 else out


# -- closed-form references --------------------------------------------------

def reference_heat_additive(t, x, w_t, d=None):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1] if d is None else d
    return np.sum(x * x, axis=-1) + 2.0 * t * d + w_t


def reference_heat_mult(t, x, w_t, d=None):
    x = np.asarray(x, dtype=float)
    d = x.shape[-1] if d is None else d
    return np.exp(w_t - 0.5 * t) * (2.0 * t * d + np.sum(x * x, axis=-1))
