"""Common plumbing for anything evaluable as ``field(x, t, cond)``.

A field is a velocity (or score) map with a pass counter attached. Every call
through :meth:`Field.__call__` counts as one network forward pass no matter
how many rows the batch holds, matching how per-iteration cost is reported
for batched optimizers.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class ConditionError(ValueError):
    """Unknown class label passed to a conditional field."""


class CapabilityError(TypeError):
    """The field cannot provide input gradients."""


@dataclass
class PassCounters:
    forwards: int = 0
    backwards: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, forwards=0, backwards=0):
        with self._lock:
            self.forwards += forwards
            self.backwards += backwards

    def snapshot(self):
        with self._lock:
            return self.forwards, self.backwards

    def reset(self):
        with self._lock:
            self.forwards = 0
            self.backwards = 0

    def merge(self, other: "PassCounters"):
        f, b = other.snapshot()
        self.add(f, b)


class Field:
    """Base class. Subclasses implement ``_evaluate(x, t, cond)``.

    ``cond`` is ``None`` for the unconditional (null-label) prediction, an
    int label, or an integer array with one label per row.
    """

    n_labels = 0

    def __init__(self, counters: PassCounters | None = None):
        self.counters = counters if counters is not None else PassCounters()

    def __call__(self, x, t, cond=None):
        out = self._evaluate(np.asarray(x, dtype=float), t, cond)
        self.counters.add(forwards=1)
        return out

    def _evaluate(self, x, t, cond):
        raise NotImplementedError

    # only differentiable fields override this
    def input_vjp(self, x, t, cond, upstream):
        raise CapabilityError(f"{type(self).__name__} has no input gradients")

    def check_cond(self, cond):
        if cond is None:
            return
        labels = np.asarray(cond)
        if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= self.n_labels):
            raise ConditionError(f"labels must be integers in [0, {self.n_labels}), got {cond}")


class FunctionField(Field):
    """Wrap a plain ``f(x, t, cond)``; handy for constant or analytic fields."""

    def __init__(self, fn, n_labels=0, counters=None):
        super().__init__(counters)
        self.fn = fn
        self.n_labels = n_labels

    def _evaluate(self, x, t, cond):
        return np.broadcast_to(np.asarray(self.fn(x, t, cond), dtype=float), x.shape).copy()


def cfg_velocity(field: Field, x, t, cond, scale: float = 1.0):
    """Classifier-free guided prediction ``v_null + scale * (v_cond - v_null)``.

    One forward when ``scale == 1`` or when there is no label to guide with
    (``cond is None``); two otherwise.
    """
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if cond is None or scale == 1.0:
        return field(x, t, cond)
    v_cond = field(x, t, cond)
    v_null = field(x, t, None)
    return v_null + scale * (v_cond - v_null)


def cfg_input_vjp(field: Field, x, t, cond, scale, upstream):
    """Vector-Jacobian product of :func:`cfg_velocity` with respect to ``x``."""
    if cond is None or scale == 1.0:
        return field.input_vjp(x, t, cond, upstream)
    g_cond = field.input_vjp(x, t, cond, upstream)
    g_null = field.input_vjp(x, t, None, upstream)
    return (1.0 - scale) * g_null + scale * g_cond
