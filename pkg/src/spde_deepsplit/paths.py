"""Time grids, driving-noise realizations and regression batches.

The solver runs on a uniform grid ``t_i = i T / N``.  Auxiliary diffusion
paths are simulated on the reversed grid ``tau_n = T - t_{N-n}``; for step
``n`` the regression input is the path state at index ``N - n`` and the
label is built from the state one index later.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .problems import SpdeProblem, Zakai
from .rng import RngStream


class PathError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and np.isfinite(self.T)):
            raise ValueError(f"horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"number of steps must be a positive integer, got {self.N}")

    @property
    def t(self):
        return np.arange(self.N + 1) * (self.T / self.N)

    @property
    def tau(self):
        t = self.t
        return self.T - t[::-1]

    def dt(self, n):
        t = self.t
        return t[n] - t[n - 1]


def make_grid(T, N) -> TimeGrid:
    return TimeGrid(float(T), int(N))


@dataclass
class NoiseRealization:
    """One sampled path of the driving noise.

    ``fine_values`` holds ``Z`` at the ``N * substeps + 1`` fine times; the
    coarse grid values are every ``substeps``-th row.  For the benchmark
    problems ``Z_t(x)`` does not depend on ``x``.
    """

    grid: TimeGrid
    fine_values: np.ndarray
    substeps: int = 1
    signal: Optional[np.ndarray] = None

    @property
    def noise_dim(self):
        return self.fine_values.shape[1]

    @property
    def values(self):
        return self.fine_values[::self.substeps]

    def value_at(self, n):
        """``Z_{t_n}``."""
        return self.fine_values[n * self.substeps]

    def increment(self, n, x=None):
        """``Z_{t_n}(x) - Z_{t_{n-1}}(x)``; rows of ``x`` all get the same increment."""
        dz = self.fine_values[n * self.substeps] - self.fine_values[(n - 1) * self.substeps]
        if x is None:
            return dz
        return np.broadcast_to(dz, (len(x), dz.size))

    def to_csv(self, path):
        K = self.substeps
        times = np.arange(self.fine_values.shape[0]) * (self.grid.T / (self.grid.N * K))
        with open(path, "w", newline="") as fh:
            fh.write(f"# T={self.grid.T!r} N={self.grid.N} substeps={K}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"z{i + 1}" for i in range(self.noise_dim)])
            for t, row in zip(times, self.fine_values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            meta = fh.readline().lstrip("#").split()
            kv = dict(item.split("=") for item in meta)
            rows = list(csv.reader(fh))[1:]
        vals = np.array([[float(v) for v in r[1:]] for r in rows])
        grid = make_grid(float(kv["T"]), int(kv["N"]))
        return cls(grid, vals, int(kv["substeps"]))


@dataclass
class AuxiliaryBatch:
    n: int
    inputs_now: np.ndarray
    inputs_prev: np.ndarray
    noise_increments: np.ndarray
    dt: float


XiSpec = Union[np.ndarray, Callable[[RngStream, int], np.ndarray]]


class UniformBox:
    """Starting points drawn uniformly from ``[low, high]^d``."""

    def __init__(self, low, high, dim):
        self.low, self.high, self.dim = float(low), float(high), int(dim)

    def __call__(self, stream: RngStream, count):
        return self.low + (self.high - self.low) * stream.uniform((count, self.dim))


def _start_points(xi: XiSpec, stream, count, dim):
    if callable(xi):
        pts = np.asarray(xi(stream, count), dtype=float)
    else:
        pts = np.broadcast_to(np.asarray(xi, dtype=float), (count, dim))
    if pts.shape != (count, dim):
        raise ValueError(f"start points have shape {pts.shape}, expected {(count, dim)}")
    return pts


def simulate_aux_paths(problem: SpdeProblem, grid: TimeGrid, xi: XiSpec, stream: RngStream,
                       count=1, upto=None, increments=None):
    """Simulate ``count`` auxiliary paths up to reversed-grid index ``upto`` (default N).

    Returns an array of shape ``(upto + 1, count, d)``.  ``increments`` may
    supply the Brownian increments directly, shape ``(upto, count, d)``.
    """
    d = problem.dim
    upto = grid.N if upto is None else upto
    tau = grid.tau[:upto + 1]
    start = _start_points(xi, stream, count, d)
    if increments is None:
        dtau = np.diff(tau)
        increments = stream.normal((upto, count, d)) * np.sqrt(dtau)[:, None, None]
    with np.errstate(over="ignore", invalid="ignore"):
        paths = problem.simulate_paths(tau, start, increments)
    if not np.all(np.isfinite(paths)):
        bad = int(np.argmax(~np.all(np.isfinite(paths), axis=(1, 2))))
        raise PathError(f"non-finite auxiliary state at step {bad}")
    return paths


def simulate_aux_path(problem: SpdeProblem, grid: TimeGrid, xi, stream: RngStream):
    """A single path as an ``(N + 1, d)`` array."""
    return simulate_aux_paths(problem, grid, np.asarray(xi, dtype=float), stream, 1)[:, 0, :]


def build_batch(problem: SpdeProblem, grid: TimeGrid, z: NoiseRealization, n: int, xi: XiSpec,
                stream: RngStream, batch_size=64) -> AuxiliaryBatch:
    """Fresh regression batch for time step ``n`` (1-based)."""
    N = grid.N
    if not 1 <= n <= N:
        raise ValueError(f"step must lie in 1..{N}, got {n}")
    if problem.exact_transition:
        # jump straight to reversed index N - n, then take one more step
        tau = grid.tau
        times = np.array([tau[0], tau[N - n], tau[N - n + 1]])
        start = _start_points(xi, stream, batch_size, problem.dim)
        dB = stream.normal((2, batch_size, problem.dim)) * np.sqrt(np.diff(times))[:, None, None]
        with np.errstate(over="ignore", invalid="ignore"):
            paths = problem.simulate_paths(times, start, dB)
        if not np.all(np.isfinite(paths)):
            raise PathError(f"non-finite auxiliary state for step {n}")
        now, prev = paths[1], paths[2]
    else:
        paths = simulate_aux_paths(problem, grid, xi, stream, batch_size, upto=N - n + 1)
        now = np.ascontiguousarray(paths[N - n])
        prev = np.ascontiguousarray(paths[N - n + 1])
    return AuxiliaryBatch(n, now, prev, z.increment(n, prev), grid.dt(n))


# -- noise samplers ----------------------------------------------------------

def sample_noise(problem: SpdeProblem, grid: TimeGrid, stream: RngStream,
                 substeps: int = 16) -> NoiseRealization:
    """Sample one driving-noise path.

    Scalar Brownian motion for the heat and Black-Scholes problems; for the
    Zakai problem the signal is simulated by Euler-Maruyama on ``substeps``
    fine steps per coarse step and the observation ``Z = int h(Y) ds + V`` is
    accumulated with the left-point rule.
    """
    if problem.noise_kind == "zakai":
        return _sample_zakai(problem, grid, stream, substeps)
    dW = stream.normal((grid.N, problem.noise_dim)) * np.sqrt(grid.T / grid.N)
    vals = np.zeros((grid.N + 1, problem.noise_dim))
    np.cumsum(dW, axis=0, out=vals[1:])
    return NoiseRealization(grid, vals, 1)


def zakai_signal_observation(problem: Zakai, y0, dW, dV, dt):
    """Euler-Maruyama signal and left-point observation for given fine increments.

    ``dW`` and ``dV`` have shape ``(K_total, d)``.  Returns ``(signal, z)``
    with ``K_total + 1`` rows each.
    """
    steps, d = dW.shape
    Y = np.empty((steps + 1, d))
    Z = np.zeros((steps + 1, d))
    Y[0] = y0
    for k in range(steps):
        y = Y[k:k + 1]
        Y[k + 1] = y[0] + problem.mu(y)[0] * dt + problem.sigma_apply(y, dW[k:k + 1])[0]
        Z[k + 1] = Z[k] + problem.h(y)[0] * dt + dV[k]
    return Y, Z


def _sample_zakai(problem: Zakai, grid: TimeGrid, stream: RngStream, K):
    d = problem.dim
    steps = grid.N * K
    dt = grid.T / steps
    y0 = stream.normal(d) / np.sqrt(problem.alpha)
    dW = stream.normal((steps, d)) * np.sqrt(dt)
    dV = stream.normal((steps, d)) * np.sqrt(dt)
    Y, Z = zakai_signal_observation(problem, y0, dW, dV, dt)
    return NoiseRealization(grid, Z, K, signal=Y)
