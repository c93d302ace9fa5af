"""Deep splitting training loop.

For one noise realization ``z`` the solver trains one network per time step.
Step ``n`` regresses the label ``H_n(Y_prev, V_{n-1}(Y_prev), grad V_{n-1}(Y_prev), dz_n)``
on the auxiliary state ``Y_now`` one reversed-grid index earlier, where
``V_{n-1}`` is the frozen step ``n-1`` network (or the initial condition for
``n = 1``).  The minimizer approximates ``E[X_{t_n}(x) | Z = z]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import nn
from .optim import AdamState, LrSchedule, adam_step_inplace
from .paths import NoiseRealization, TimeGrid, XiSpec, build_batch
from .problems import SpdeProblem
from .rng import RngStream

log = logging.getLogger(__name__)

# substream tags under a run's root stream
INIT_STREAM = 1
BATCH_STREAM = 2

DIVERGENCE_LIMIT = 1e12


class TrainingError(RuntimeError):
    def __init__(self, message, n=None, m=None):
        super().__init__(message)
        self.n, self.m = n, m


@dataclass
class TrainConfig:
    iters: int = 8000
    batch_size: int = 64
    schedule: LrSchedule = field(
        default_factory=lambda: LrSchedule([(2000, 1e-1), (4000, 1e-2), (6000, 1e-3), (8000, 1e-4)]))
    optimizer: str = "adam"
    adam_eps: float = 1e-8
    init_scheme: str = "uniform"
    warm_start: bool = False
    hidden_dim: Optional[int] = None
    hidden_layers: int = 2
    batch_norm: bool = True
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    #: BN statistics for evaluating V_{n-1} in the labels: "batch" or "running"
    label_stats: str = "batch"
    #: called as ``progress(n, m, loss, lr)`` every ``log_every`` iterations
    progress: Optional[Callable] = None
    log_every: int = 100

    def shape(self, dim):
        return nn.NetworkShape(dim, self.hidden_dim, self.hidden_layers,
                               batch_norm=self.batch_norm)


@dataclass
class TrainedStep:
    n: int
    theta: np.ndarray
    bn: nn.BatchNormState
    loss: float
    losses: np.ndarray = None


@dataclass
class TrainedSolver:
    problem: SpdeProblem
    grid: TimeGrid
    noise: NoiseRealization
    shape: nn.NetworkShape
    steps: List[TrainedStep]

    def evaluate(self, n, x):
        return evaluate(self, n, x)


def _prev_value_and_grad(problem, shape, prev: Optional[TrainedStep], X, label_stats="batch"):
    if prev is None:
        return problem.phi(X), problem.phi_grad(X)
    if label_stats == "batch":
        # same normalization V_{n-1} saw while training; its running-stat
        # output is biased by roughly Var(input)/J near curvature
        out, dX, _, _ = nn.net_forward_batch_stats(prev.theta, X, shape, prev.bn.epsilon,
                                                   want_grad=True)
        return out, dX
    if label_stats == "running":
        return nn.net_forward_infer_batch(prev.theta, prev.bn, X, shape, want_grad=True)
    raise ValueError(f"label_stats must be 'batch' or 'running', got {label_stats!r}")


def step_loss_and_grad(problem: SpdeProblem, theta, batch, prev: Optional[TrainedStep],
                       shape: nn.NetworkShape, bn_epsilon=1e-3, label_stats="batch"):
    """Loss and parameter gradient of one regression step on ``batch``.

    Returns ``(loss, grad, batch_mean, batch_var)``; the labels are constants
    with respect to ``theta``.  ``label_stats`` picks the normalization of the
    previous network: the label batch's own statistics or its running ones.
    """
    u, w = _prev_value_and_grad(problem, shape, prev, batch.inputs_prev, label_stats)
    y = problem.milstein(batch.inputs_prev, u, w, batch.noise_increments, batch.dt)
    loss, grad, _, bmean, bvar = nn.loss_and_grad(theta, batch.inputs_now, y, shape,
                                                  bn_epsilon)
    return loss, grad, bmean, bvar


def train_step_network(problem: SpdeProblem, grid: TimeGrid, z: NoiseRealization, n: int,
                       prev: Optional[TrainedStep], config: TrainConfig, stream: RngStream,
                       xi: XiSpec) -> TrainedStep:
    """Train the step-``n`` network with ``config.iters`` optimizer iterations.

    ``stream`` is the run's root stream; initialization and batches use
    substreams keyed by ``n`` so a step can be retrained in isolation.
    """
    shape = config.shape(problem.dim)
    lay = nn.layout_for(shape)
    if config.warm_start and prev is not None:
        theta = prev.theta.copy()
    else:
        theta = nn.init_params(stream.substream(INIT_STREAM, n), shape, config.init_scheme)
    bn = nn.BatchNormState.initial(shape, config.bn_momentum, config.bn_epsilon)
    run_mean, run_var = bn.running_mean.copy(), bn.running_var.copy()
    mom = config.bn_momentum
    adam = AdamState.zeros(lay.n_params)
    batches = stream.substream(BATCH_STREAM, n)
    losses = np.empty(config.iters)
    loss = float("nan")
    for m in range(config.iters):
        batch = build_batch(problem, grid, z, n, xi, batches, config.batch_size)
        loss, grad, bmean, bvar = step_loss_and_grad(problem, theta, batch, prev, shape,
                                                     config.bn_epsilon, config.label_stats)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise TrainingError(f"training diverged at step {n}, iteration {m} (loss {loss})",
                                n=n, m=m)
        losses[m] = loss
        if lay.n_sites:
            run_mean *= mom
            run_mean += (1.0 - mom) * bmean
            run_var *= mom
            run_var += (1.0 - mom) * bvar
        lr = config.schedule(m)
        if config.optimizer == "adam":
            adam_step_inplace(adam, theta, grad, lr, eps=config.adam_eps)
        elif config.optimizer == "sgd":
            theta -= lr * grad
        else:
            raise ValueError(f"unknown optimizer {config.optimizer!r}")
        if config.progress is not None and (m % config.log_every == 0 or m == config.iters - 1):
            config.progress(n, m, loss, lr)
    state = nn.BatchNormState(run_mean, run_var, mom, config.bn_epsilon,
                              config.iters if lay.n_sites else 0)
    return TrainedStep(n, theta, state, loss, losses)


def solve(problem: SpdeProblem, grid: TimeGrid, z: NoiseRealization, config: TrainConfig,
          stream: RngStream, xi: XiSpec = None) -> TrainedSolver:
    """Train steps ``1..N`` in order, each conditioned on the same noise path."""
    if xi is None:
        xi = problem.x_eval()
    steps: List[TrainedStep] = []
    prev = None
    for n in range(1, grid.N + 1):
        prev = train_step_network(problem, grid, z, n, prev, config, stream, xi)
        log.debug("step %d done, final loss %.4g", n, prev.loss)
        steps.append(prev)
    return TrainedSolver(problem, grid, z, config.shape(problem.dim), steps)


def evaluate(solver: TrainedSolver, n: int, x) -> float:
    """Approximation of ``E[X_{t_n}(x) | Z = z]``; ``n = 0`` is the initial condition."""
    if not 0 <= n <= len(solver.steps):
        raise IndexError(f"time index {n} outside 0..{len(solver.steps)}")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if n == 0:
        return float(solver.problem.phi(x)[0])
    step = solver.steps[n - 1]
    return nn.net_forward_infer(step.theta, step.bn, x[0], solver.shape)
