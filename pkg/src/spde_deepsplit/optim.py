"""Adam, plain SGD and piecewise-constant learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ._backend import kernels as _K

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def adam_step(state: AdamState, theta, grad, lr, beta1=BETA1, beta2=BETA2, eps=ADAM_EPS):
    """One Adam update, returning new ``(state, theta)`` and leaving inputs untouched.

    The step counter is advanced before bias correction, so the first update
    divides by ``1 - beta**1``.  ``eps`` is added to the bias-corrected root of
    the second moment.
    """
    theta = np.array(theta, dtype=np.float64)
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if not (theta.shape == grad.shape == state.m.shape == state.v.shape):
        raise ValueError("Adam buffers must all have the parameter length")
    new = state.copy()
    new.step += 1
    _K.adam_update(theta, new.m, new.v, grad, float(lr), beta1, beta2, eps, new.step)
    return new, theta


def adam_step_inplace(state: AdamState, theta, grad, lr, beta1=BETA1, beta2=BETA2,
                      eps=ADAM_EPS):
    """Same update as :func:`adam_step`, mutating ``state`` and ``theta``."""
    state.step += 1
    _K.adam_update(theta, state.m, state.v, grad, float(lr), beta1, beta2, eps, state.step)


def sgd_step(theta, grad, lr):
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ValueError("gradient and parameters differ in length")
    return theta - lr * grad


class LrSchedule:
    """Piecewise-constant rate: the rate of the first breakpoint whose bound is >= m.

    ``LrSchedule([(2000, 1e-1), (4000, 1e-2)])`` gives 0.1 on ``[0, 2000]`` and
    0.01 on ``(2000, 4000]``; iterations past the last bound keep the last rate.
    """

    def __init__(self, breakpoints: Sequence[Tuple[int, float]]):
        bps = [(int(b), float(r)) for b, r in breakpoints]
        if not bps:
            raise ValueError("schedule needs at least one breakpoint")
        bounds = [b for b, _ in bps]
        if any(b1 >= b2 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError(f"schedule bounds must be strictly increasing: {bounds}")
        if any(r <= 0 for _, r in bps):
            raise ValueError("learning rates must be positive")
        self.breakpoints: List[Tuple[int, float]] = bps

    def __repr__(self):
        return f"LrSchedule({self.breakpoints})"

    def __eq__(self, other):
        return isinstance(other, LrSchedule) and self.breakpoints == other.breakpoints

    def __call__(self, m):
        return lr_at(self, m)

    @property
    def last_bound(self):
        return self.breakpoints[-1][0]

    def scaled(self, factor: float) -> "LrSchedule":
        """Bounds multiplied by ``factor`` (rounded), e.g. to compress to fewer iterations.

        Bounds that would collide after rounding are pushed apart by one so
        every rate survives.
        """
        bps, prev = [], -1
        for b, r in self.breakpoints:
            prev = max(int(round(b * factor)), prev + 1)
            bps.append((prev, r))
        return LrSchedule(bps)

    def to_string(self):
        return ",".join(f"{b}:{r:g}" for b, r in self.breakpoints)

    @classmethod
    def parse(cls, text: str) -> "LrSchedule":
        """Parse ``"b1:r1,b2:r2,..."``."""
        bps = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                b, r = part.split(":")
                bps.append((int(b), float(r)))
            except ValueError:
                raise ValueError(f"bad schedule entry {part!r}; expected bound:rate") from None
        return cls(bps)


def lr_at(schedule: LrSchedule, m: int) -> float:
    if m < 0:
        raise ValueError("iteration index must be non-negative")
    for bound, rate in schedule.breakpoints:
        if m <= bound:
            return rate
    return schedule.breakpoints[-1][1]
