"""Linear interpolation schedules between data and Gaussian noise.

Two conventions are supported. Under ``RECTIFIED_FLOW`` noise sits at
``t = 0`` and data at ``t = 1``; ``CONDITIONAL_FLOW_MATCHING`` swaps the
endpoints. Every function accepts a scalar ``t`` or an array of per-row
times that broadcasts against the leading axes of the points.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ScheduleKind(str, enum.Enum):
    RECTIFIED_FLOW = "rectified_flow"
    CONDITIONAL_FLOW_MATCHING = "conditional_flow_matching"


class DomainError(ValueError):
    """Raised when a time lies outside [0, 1]."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind = ScheduleKind.RECTIFIED_FLOW
    t_min: float = 0.02
    t_max: float = 0.98

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ValueError(f"need 0 <= t_min < t_max <= 1, got ({self.t_min}, {self.t_max})")

    @property
    def alpha_dot(self) -> float:
        return 1.0 if self.kind is ScheduleKind.RECTIFIED_FLOW else -1.0

    @property
    def sigma_dot(self) -> float:
        return -self.alpha_dot

    @property
    def noise_time(self) -> float:
        return 0.0 if self.kind is ScheduleKind.RECTIFIED_FLOW else 1.0

    @property
    def data_time(self) -> float:
        return 1.0 - self.noise_time

    def sample_t(self, rng: np.random.Generator, size=None):
        """Uniform draw on ``[t_min, t_max]``."""
        return rng.uniform(self.t_min, self.t_max, size=size)


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    return t


def schedule_eval(sched: Schedule, t):
    """Return ``(alpha, sigma, alpha_dot, sigma_dot)`` at ``t``.

    ``alpha`` and ``sigma`` have the shape of ``t``; the derivatives are
    constants for both linear schedules.
    """
    t = _check_t(t)
    if sched.kind is ScheduleKind.RECTIFIED_FLOW:
        alpha, sigma = t, 1.0 - t
    else:
        alpha, sigma = 1.0 - t, t
    if alpha.ndim == 0:
        alpha, sigma = float(alpha), float(sigma)
    return alpha, sigma, sched.alpha_dot, sched.sigma_dot


def _col(a):
    # per-row coefficient -> broadcast over the trailing coordinate axis
    a = np.asarray(a, dtype=float)
    return a[..., None] if a.ndim else a


def _pair(x_star, eps):
    x_star = np.asarray(x_star, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x_star.shape[-1:] != eps.shape[-1:]:
        raise ShapeError(f"dimension mismatch: {x_star.shape} vs {eps.shape}")
    return x_star, eps


def interpolate(sched: Schedule, x_star, eps, t):
    """``alpha(t) * x_star + sigma(t) * eps``."""
    x_star, eps = _pair(x_star, eps)
    alpha, sigma, _, _ = schedule_eval(sched, t)
    return _col(alpha) * x_star + _col(sigma) * eps


def velocity_target(sched: Schedule, x_star, eps, t=None):
    """Flow-matching regression target ``alpha_dot * x_star + sigma_dot * eps``.

    The target does not depend on ``t`` for linear schedules; ``t`` is only
    range-checked when given.
    """
    x_star, eps = _pair(x_star, eps)
    if t is not None:
        _check_t(t)
    return sched.alpha_dot * x_star + sched.sigma_dot * eps
