"""Fixed-step Euler integration of the PF-ODE in both directions."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .fields import Field, PassCounters, cfg_velocity
from .interpolant import Schedule, interpolate

__all__ = [
    "BlowUpError",
    "Direction",
    "PassCounters",
    "SamplerConfig",
    "Trajectory",
    "euler_invert",
    "euler_sample",
    "euler_step",
    "partial_insert_sample",
    "straightness",
    "write_trajectory_csv",
]


class BlowUpError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite state at Euler step {step}")
        self.step = step


class Direction(str, enum.Enum):
    NOISE_TO_DATA = "noise_to_data"
    DATA_TO_NOISE = "data_to_noise"


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 1.0
    direction: Direction = Direction.NOISE_TO_DATA
    keep_trajectory: bool = False

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass
class Trajectory:
    times: np.ndarray       # (steps + 1,)
    states: np.ndarray      # (steps + 1, *x.shape)
    velocities: np.ndarray  # (steps, *x.shape)


def euler_step(field: Field, x, t, dt, cond=None, cfg_scale: float = 1.0):
    """One update ``x + dt * v(x, t)``; returns ``(x_next, v)``."""
    v = cfg_velocity(field, x, t, cond, cfg_scale)
    return np.asarray(x, dtype=float) + dt * v, v


def _integrate(field, x, times, cfg_scale, cond, keep):
    x = np.array(x, dtype=float)
    states, vels = [x.copy()], []
    for k in range(len(times) - 1):
        x, v = euler_step(field, x, times[k], times[k + 1] - times[k], cond, cfg_scale)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(k)
        if keep:
            states.append(x.copy())
            vels.append(v)
    traj = Trajectory(np.asarray(times), np.stack(states), np.stack(vels)) if keep else None
    return x, traj


def euler_sample(field: Field, sched: Schedule, eps, cfg: SamplerConfig, cond=None):
    """Integrate from the noise endpoint to the data endpoint.

    Returns ``(x, trajectory)``; the trajectory is ``None`` unless
    ``cfg.keep_trajectory`` is set.
    """
    if cfg.direction is not Direction.NOISE_TO_DATA:
        raise ValueError("euler_sample integrates noise -> data")
    times = np.linspace(sched.noise_time, sched.data_time, cfg.steps + 1)
    return _integrate(field, eps, times, cfg.cfg_scale, cond, cfg.keep_trajectory)


def euler_invert(field: Field, sched: Schedule, x, cfg: SamplerConfig, cond=None):
    """Integrate the same ODE backwards, data endpoint to noise endpoint."""
    if cfg.direction is not Direction.DATA_TO_NOISE:
        raise ValueError("euler_invert integrates data -> noise")
    times = np.linspace(sched.data_time, sched.noise_time, cfg.steps + 1)
    return _integrate(field, x, times, cfg.cfg_scale, cond, False)[0]


def partial_insert_sample(field: Field, sched: Schedule, noise, source, fraction, cfg: SamplerConfig, cond=None):
    """Re-noise ``source`` part of the way and integrate the remainder.

    ``fraction`` is the share of the noise-to-data path still to travel:
    1 starts from pure ``noise``, values near 0 barely move ``source``. The
    remaining path gets ``round(fraction * cfg.steps)`` steps (at least one),
    keeping the full-path step size.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    t_start = sched.data_time + fraction * (sched.noise_time - sched.data_time)
    x = interpolate(sched, source, noise, t_start)
    n = max(1, int(round(fraction * cfg.steps)))
    times = np.linspace(t_start, sched.data_time, n + 1)
    return _integrate(field, x, times, cfg.cfg_scale, cond, False)[0]


def straightness(field: Field, sched: Schedule, eps, steps: int, cond=None, cfg_scale: float = 1.0):
    """Mean squared deviation of the Euler velocities from the chord velocity.

    Averaged over steps and over rows when ``eps`` is a batch. Zero exactly
    when the velocity is constant along each trajectory.
    """
    if steps < 2:
        raise ValueError("straightness needs at least 2 steps")
    times = np.linspace(sched.noise_time, sched.data_time, steps + 1)
    x_end, traj = _integrate(field, eps, times, cfg_scale, cond, True)
    chord = (x_end - traj.states[0]) / (times[-1] - times[0])
    dev = np.sum((traj.velocities - chord) ** 2, axis=-1)
    return float(np.mean(dev))


def write_trajectory_csv(path, traj: Trajectory):
    """Columns ``step, t, x0..x{d-1}``; batched trajectories add ``sample`` after ``step``."""
    states = traj.states
    d = states.shape[-1]
    batched = states.ndim == 3
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step"] + (["sample"] if batched else []) + ["t"] + [f"x{i}" for i in range(d)])
        for k, t in enumerate(traj.times):
            if batched:
                for j, row in enumerate(states[k]):
                    w.writerow([k, j, repr(float(t))] + [repr(float(v)) for v in row])
            else:
                w.writerow([k, repr(float(t))] + [repr(float(v)) for v in states[k]])
