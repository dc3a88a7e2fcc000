"""Fixed-step explicit integrators and the disturbance-aware step schedule."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

Derivative = Callable[[float, np.ndarray], np.ndarray]

# Fehlberg 4(5) tableau
_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)
_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)


class NonFiniteDerivative(ArithmeticError):
    pass


class IntegratorKind(enum.Enum):
    MODIFIED_EULER = "modified_euler"
    RKF45 = "rkf45"


def _eval(f: Derivative, t: float, x) -> np.ndarray:
    k = np.asarray(f(t, x))
    if not np.all(np.isfinite(k)):
        raise NonFiniteDerivative(f"non-finite derivative at t={t}")
    return k


def modified_euler_step(f: Derivative, x, t: float, h: float):
    if not h > 0:
        raise ValueError("step size must be positive")
    k1 = _eval(f, t, x)
    k2 = _eval(f, t + h, x + h * k1)
    return x + (h / 2) * (k1 + k2)


def rkf45_step(f: Derivative, x, t: float, h: float):
    """One Fehlberg step; returns the fifth-order solution and the 4/5 difference."""
    if not h > 0:
        raise ValueError("step size must be positive")
    ks = []
    for c, row in zip(_C, _A):
        xi = x
        for a, k in zip(row, ks):
            xi = xi + (h * a) * k
        ks.append(_eval(f, t + c * h, xi))
    x5 = x
    err = 0.0
    for b5, b4, k in zip(_B5, _B4, ks):
        x5 = x5 + (h * b5) * k
        err = err + (h * (b5 - b4)) * k
    return x5, err


def step(kind: IntegratorKind, f: Derivative, x, t: float, h: float):
    """Dispatch helper returning ``(x_next, error_estimate_or_None)``."""
    if kind is IntegratorKind.MODIFIED_EULER:
        return modified_euler_step(f, x, t, h), None
    return rkf45_step(f, x, t, h)


@dataclass(frozen=True)
class StepSchedule:
    h_fast: float = 0.01
    h_slow: float = 0.05
    fast_window: float = 0.5

    def __post_init__(self):
        if not 0 < self.h_fast <= self.h_slow:
            raise ValueError("need 0 < h_fast <= h_slow")
        if self.fast_window < 0:
            raise ValueError("fast_window must be non-negative")


def step_size_at(schedule: StepSchedule, t: float, last_disturbance: float,
                 next_event: float = math.inf) -> float:
    """Step to take from ``t``; truncated so that ``next_event`` is landed on exactly."""
    if t < 0:
        raise ValueError("t must be non-negative")
    h = schedule.h_fast if t - last_disturbance < schedule.fast_window else schedule.h_slow
    gap = next_event - t
    if gap < h:
        return gap
    return h


class LinearPropagator:
    """Fixed-step integration of ``dx/dt = A x + B u`` with ``u`` held over a step.

    For a linear field every explicit Runge-Kutta step is an affine map, so the
    map for ``k`` sub-steps is built once by stepping the augmented system
    ``[A B; 0 0]`` from the identity and raising it to the ``k``-th power. The
    result is the same integrator, applied ``k`` times, up to rounding.
    """

    def __init__(self, A: np.ndarray, B: np.ndarray, kind: IntegratorKind, max_substep: float):
        n, m = B.shape
        self.n = n
        self.kind = kind
        self.max_substep = max_substep
        self._aug = np.zeros((n + m, n + m))
        self._aug[:n, :n] = A
        self._aug[:n, n:] = B
        self._cache: dict[float, np.ndarray] = {}

    def substeps(self, h: float) -> int:
        return max(1, math.ceil(h / self.max_substep - 1e-9))

    def map_for(self, h: float) -> np.ndarray:
        M = self._cache.get(h)
        if M is None:
            k = self.substeps(h)
            aug = self._aug
            one, _ = step(self.kind, lambda t, z: aug @ z, np.eye(aug.shape[0]), 0.0, h / k)
            M = np.linalg.matrix_power(one, k)
            self._cache[h] = M
        return M

    def advance(self, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
        M = self.map_for(h)
        return M[:self.n, :self.n] @ x + M[:self.n, self.n:] @ u
