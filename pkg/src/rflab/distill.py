"""Distillation gradients that use a pretrained velocity field as a loss.

The common core is the flow residual ``v(x_t, t) - alpha_dot x - sigma_dot eps``
evaluated at ``x_t = alpha x + sigma eps``:

* RFDS pulls the residual back through a generator to update its
  parameters, ignoring the network Jacobian.
* iRFDS applies the residual, with the opposite sign, to the noise so that
  the noise which produced a fixed ``x`` can be recovered.
* RFDS-Rev alternates a few iRFDS steps on a freshly drawn noise with one
  RFDS step on the generator parameters.

``sds_grad``/``isds_grad`` are the score-parameterized versions. Through
:func:`rflab.oracle.score_to_velocity` they agree with ``rfds_grad`` and
``irfds_grad`` up to a positive per-time factor.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .fields import Field, cfg_input_vjp, cfg_velocity
from .interpolant import Schedule, interpolate, schedule_eval
from .net import DivergenceError
from .records import RunRecord

log = logging.getLogger(__name__)


# -- generators ----------------------------------------------------------
class Generator:
    """Differentiable ``x = g(theta, view)``.

    ``theta`` is ``(p,)`` or a batch ``(n, p)`` of independent parameter
    vectors; ``view`` is whatever :meth:`draw_view` returns (``None`` for
    view-free generators).
    """

    n_params: int
    dim: int

    def render(self, theta, view=None):
        raise NotImplementedError

    def vjp(self, theta, view, upstream):
        raise NotImplementedError

    def draw_view(self, rng, theta):
        return None


class IdentityGenerator(Generator):
    def __init__(self, dim):
        self.dim = self.n_params = dim

    def render(self, theta, view=None):
        return np.asarray(theta, dtype=float)

    def vjp(self, theta, view, upstream):
        return np.asarray(upstream, dtype=float)


class LinearGenerator(Generator):
    """``x = A theta + b`` with ``A`` and ``b`` drawn once from ``seed``."""

    def __init__(self, dim, n_params, seed=0):
        rng = np.random.default_rng(seed)
        self.dim, self.n_params = dim, n_params
        self.A = rng.standard_normal((dim, n_params)) / np.sqrt(n_params)
        self.b = rng.standard_normal(dim)

    def render(self, theta, view=None):
        return np.asarray(theta, dtype=float) @ self.A.T + self.b

    def vjp(self, theta, view, upstream):
        return np.asarray(upstream, dtype=float) @ self.A


class RotationViewGenerator(Generator):
    """Rotate the first two coordinates of ``theta`` by a per-call random angle.

    Stands in for a rendered view of a scene: every call sees the same
    parameters from a different angle.
    """

    def __init__(self, dim=2, max_angle=np.pi):
        if dim < 2:
            raise ValueError("rotation needs at least two coordinates")
        self.dim = self.n_params = dim
        self.max_angle = max_angle

    def draw_view(self, rng, theta):
        lead = np.shape(theta)[:-1]
        return rng.uniform(-self.max_angle, self.max_angle, size=lead or None)

    @staticmethod
    def _rotate(v, angle):
        v = np.array(v, dtype=float)
        c, s = np.cos(angle), np.sin(angle)
        a, b = v[..., 0].copy(), v[..., 1].copy()
        v[..., 0] = c * a - s * b
        v[..., 1] = s * a + c * b
        return v

    def render(self, theta, view=None):
        return self._rotate(theta, 0.0 if view is None else view)

    def vjp(self, theta, view, upstream):
        return self._rotate(upstream, -(0.0 if view is None else np.asarray(view)))


# -- configuration -------------------------------------------------------
class StepRule(str, enum.Enum):
    CONSTANT = "constant"
    ONE_MINUS_SIGMA = "one_minus_sigma"


@dataclass(frozen=True)
class DistillConfig:
    """Settings shared by the distillation loops.

    ``w_sign`` is the sign of the RFDS weight; ``None`` picks
    ``-sign(alpha_dot)`` for the schedule in use. The iRFDS weight is always
    its negation. Magnitudes of both weights fold into the step sizes.
    ``irfds_step_rule = None`` picks a constant step for Reflow-tuned fields
    and ``1 - sigma(t)`` otherwise.
    """

    w_sign: float | None = None
    w_prime_sign: float | None = None
    cfg_scale: float = 50.0
    inner_cfg_scale: float = 1.0
    lr: float = 3e-3
    t_range: tuple = (0.02, 0.98)
    n_inner: int = 1
    irfds_step_rule: StepRule | None = None
    irfds_step: float = 1.0
    gauss_reg_weight: float = 0.1
    max_iters: int = 1000
    seed: int = 0
    keep_trace: bool = False

    def __post_init__(self):
        w, wp = self.w_sign, self.w_prime_sign
        for s in (w, wp):
            if s is not None and s not in (1.0, -1.0):
                raise ValueError(f"weight signs must be +1 or -1, got {s}")
        if w is not None and wp is not None and wp != -w:
            raise ValueError("w_prime_sign must be the negation of w_sign")
        if w is None and wp is not None:
            object.__setattr__(self, "w_sign", -wp)
        elif wp is None and w is not None:
            object.__setattr__(self, "w_prime_sign", -w)
        if self.irfds_step_rule is not None:
            object.__setattr__(self, "irfds_step_rule", StepRule(self.irfds_step_rule))
        lo, hi = self.t_range
        object.__setattr__(self, "t_range", (float(lo), float(hi)))
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("t_range must satisfy 0 <= lo < hi <= 1")
        if self.n_inner < 1:
            raise ValueError("n_inner must be >= 1")
        if self.gauss_reg_weight < 0 or self.cfg_scale < 0 or self.inner_cfg_scale < 0:
            raise ValueError("gauss_reg_weight and guidance scales must be >= 0")

    def signs(self, sched: Schedule):
        """Resolved ``(w, w_prime)`` for ``sched``."""
        w = self.w_sign if self.w_sign is not None else -float(np.sign(sched.alpha_dot))
        return w, -w

    def step_rule(self, field):
        if self.irfds_step_rule is not None:
            return self.irfds_step_rule
        return StepRule.CONSTANT if getattr(field, "reflowed", False) else StepRule.ONE_MINUS_SIGMA

    def sample_t(self, rng, size=None):
        return rng.uniform(*self.t_range, size=size)

    def as_dict(self):
        return asdict(self)


def _col(a):
    a = np.asarray(a, dtype=float)
    return a[..., None] if a.ndim else a


# -- gradients -----------------------------------------------------------
def flow_residual(field: Field, sched: Schedule, x, eps, t, cond=None, cfg_scale=1.0):
    """``v_hat(x_t, t) - alpha_dot x - sigma_dot eps`` with guided ``v_hat``."""
    x_t = interpolate(sched, x, eps, t)
    v = cfg_velocity(field, x_t, t, cond, cfg_scale)
    return v - sched.alpha_dot * np.asarray(x, dtype=float) - sched.sigma_dot * np.asarray(eps, dtype=float)


def _rfds(field, sched, gen, theta, eps, t, cond, cfg, view):
    x = gen.render(theta, view)
    r = flow_residual(field, sched, x, eps, t, cond, cfg.cfg_scale)
    w, _ = cfg.signs(sched)
    return gen.vjp(theta, view, w * r), r


def rfds_grad(field, sched, gen: Generator, theta, eps, t, cond, cfg: DistillConfig, view=None):
    """Jacobian-free RFDS gradient; no backward pass through the field."""
    return _rfds(field, sched, gen, theta, eps, t, cond, cfg, view)[0]


def rfds_grad_full(field, sched, gen: Generator, theta, eps, t, cond, cfg: DistillConfig, view=None,
                   identity_jacobian=False):
    """Exact gradient of ``||v_hat(x_t, t) - alpha_dot x - sigma_dot eps||^2``.

    Keeps the network Jacobian, so ``field`` must provide ``input_vjp``.
    With ``identity_jacobian`` the Jacobian is replaced by the identity
    (no backward pass), which is the ablation the Jacobian-free form builds on.
    """
    return _rfds_full(field, sched, gen, theta, eps, t, cond, cfg, view, identity_jacobian)[0]


def _rfds_full(field, sched, gen, theta, eps, t, cond, cfg, view, identity_jacobian=False):
    x = gen.render(theta, view)
    x_t = interpolate(sched, x, eps, t)
    r = cfg_velocity(field, x_t, t, cond, cfg.cfg_scale) - sched.alpha_dot * x - sched.sigma_dot * np.asarray(eps, dtype=float)
    alpha = _col(schedule_eval(sched, t)[0])
    jtr = r if identity_jacobian else cfg_input_vjp(field, x_t, t, cond, cfg.cfg_scale, r)
    return gen.vjp(theta, view, 2.0 * (-sched.alpha_dot * r + alpha * jtr)), r


def gauss_reg_grad(eps):
    """Gradient of ``mean(eps)^2 + (var(eps) - 1)^2`` over each row's coordinates."""
    eps = np.asarray(eps, dtype=float)
    d = eps.shape[-1]
    m = eps.mean(axis=-1, keepdims=True)
    var = eps.var(axis=-1, keepdims=True)
    return 2.0 * m / d + 4.0 * (var - 1.0) * (eps - m) / d


def _irfds(field, sched, x, eps, t, cond, cfg, cfg_scale):
    r = flow_residual(field, sched, x, eps, t, cond, cfg.cfg_scale if cfg_scale is None else cfg_scale)
    _, wp = cfg.signs(sched)
    g = wp * r
    if cfg.gauss_reg_weight:
        g = g + cfg.gauss_reg_weight * gauss_reg_grad(eps)
    return g, r


def irfds_grad(field, sched, x, eps, t, cond, cfg: DistillConfig, cfg_scale=None):
    """Gradient on the noise for fixed ``x``; ``cfg_scale`` overrides ``cfg.cfg_scale``."""
    return _irfds(field, sched, x, eps, t, cond, cfg, cfg_scale)[0]


def _score_residual(score, sched, x, eps, t, cond, cfg_scale):
    x_t = interpolate(sched, x, eps, t)
    sigma = _col(schedule_eval(sched, t)[1])
    eps_pred = -sigma * cfg_velocity(score, x_t, t, cond, cfg_scale)
    return eps_pred - np.asarray(eps, dtype=float)


def sds_grad(score: Field, sched, gen: Generator, theta, eps, t, cond, cfg: DistillConfig, view=None):
    """Score-distillation gradient ``w_sds (eps_pred - eps)`` through ``gen``.

    ``eps_pred = -sigma(t) s(x_t, t)``. ``w_sds = -w sign(alpha_dot)`` so the
    result points the same way as :func:`rfds_grad` on the bridged field.
    """
    x = gen.render(theta, view)
    w, _ = cfg.signs(sched)
    w_sds = -w * np.sign(sched.alpha_dot)
    return gen.vjp(theta, view, w_sds * _score_residual(score, sched, x, eps, t, cond, cfg.cfg_scale))


def isds_grad(score: Field, sched, x, eps, t, cond, cfg: DistillConfig, cfg_scale=None):
    _, wp = cfg.signs(sched)
    wp_sds = -wp * np.sign(sched.alpha_dot)
    res = _score_residual(score, sched, x, eps, t, cond, cfg.cfg_scale if cfg_scale is None else cfg_scale)
    g = wp_sds * res
    if cfg.gauss_reg_weight:
        g = g + cfg.gauss_reg_weight * gauss_reg_grad(eps)
    return g


# -- optimization loops --------------------------------------------------
def _row_norm(r):
    return float(np.mean(np.linalg.norm(r, axis=-1)))


def _lead(theta):
    return np.shape(theta)[:-1] or None


def _check(theta, it):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(it, what="parameters")


def _finish(record, key="residual_norm"):
    res = record.column(key)
    tail = res[-max(1, len(res) // 10):]
    record.summary.update(
        iterations=len(res),
        terminal_residual=float(np.mean(tail)),
        forwards_per_iter=float(np.mean(record.column("forwards"))) if res.size else 0.0,
        backwards_per_iter=float(np.mean(record.column("backwards"))) if res.size else 0.0,
    )
    return record


def rfds_optimize(field, sched, gen: Generator, init_theta, cond, cfg: DistillConfig, full_jacobian=False,
                  run_id="rfds"):
    """Plain RFDS loop: fresh ``t`` and noise every iteration.

    ``init_theta`` may hold a batch of independent runs, one per row; they
    share network calls, so pass counts are per iteration of the whole batch.
    With ``full_jacobian`` the exact gradient replaces the Jacobian-free one.
    """
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(init_theta, dtype=float)
    rec = RunRecord(run_id, {"method": "rfds", "full_jacobian": full_jacobian, **cfg.as_dict()})
    trace = [theta.copy()] if cfg.keep_trace else None
    for it in range(cfg.max_iters):
        f0, b0 = field.counters.snapshot()
        t = cfg.sample_t(rng, _lead(theta))
        view = gen.draw_view(rng, theta)
        x_shape = np.shape(gen.render(theta, view))
        eps = rng.standard_normal(x_shape)
        step = _rfds_full if full_jacobian else _rfds
        g, r = step(field, sched, gen, theta, eps, t, cond, cfg, view)
        f1, b1 = field.counters.snapshot()
        theta = theta - cfg.lr * g
        _check(theta, it)
        rec.add(iter=it, residual_norm=_row_norm(r), grad_norm=_row_norm(g),
                forwards=f1 - f0, backwards=b1 - b0)
        if trace is not None:
            trace.append(theta.copy())
    if trace is not None:
        rec.trace = np.stack(trace)
    return theta, _finish(rec)


def irfds_invert(field, sched, x, cond, cfg: DistillConfig, eps0=None, run_id="irfds"):
    """Recover the noise that maps to ``x`` by gradient steps on the noise."""
    rng = np.random.default_rng(cfg.seed)
    x = np.asarray(x, dtype=float)
    eps = rng.standard_normal(x.shape) if eps0 is None else np.array(eps0, dtype=float)
    rec = RunRecord(run_id, {"method": "irfds", **cfg.as_dict()})
    trace = [eps.copy()] if cfg.keep_trace else None
    for it in range(cfg.max_iters):
        f0, b0 = field.counters.snapshot()
        t = cfg.sample_t(rng, _lead(x))
        g, r = _irfds(field, sched, x, eps, t, cond, cfg, None)
        f1, b1 = field.counters.snapshot()
        eps = eps - cfg.lr * g
        _check(eps, it)
        rec.add(iter=it, residual_norm=_row_norm(r), forwards=f1 - f0, backwards=b1 - b0)
        if trace is not None:
            trace.append(eps.copy())
    if trace is not None:
        rec.trace = np.stack(trace)
    return eps, _finish(rec)


def _inner_step(rule, cfg, sched, t):
    if rule is StepRule.CONSTANT:
        return cfg.irfds_step
    return _col(1.0 - schedule_eval(sched, t)[1])


def rfds_rev_optimize(field, sched, gen: Generator, init_theta, cond, cfg: DistillConfig, run_id="rfds_rev"):
    """RFDS with noise reversal.

    Each iteration draws ``t`` and noise, refines the noise with
    ``cfg.n_inner`` iRFDS steps against the current render (parameters
    frozen, guidance ``cfg.inner_cfg_scale``), then takes one RFDS step on
    the parameters using the refined noise.
    """
    rng = np.random.default_rng(cfg.seed)
    rule = cfg.step_rule(field)
    theta = np.array(init_theta, dtype=float)
    rec = RunRecord(run_id, {"method": "rfds_rev", "resolved_step_rule": rule.value, **cfg.as_dict()})
    trace = [theta.copy()] if cfg.keep_trace else None
    for it in range(cfg.max_iters):
        f0, b0 = field.counters.snapshot()
        t = cfg.sample_t(rng, _lead(theta))
        view = gen.draw_view(rng, theta)
        x = gen.render(theta, view)
        eps = rng.standard_normal(np.shape(x))
        eta = _inner_step(rule, cfg, sched, t)
        for _ in range(cfg.n_inner):
            g_eps, r_inner = _irfds(field, sched, x, eps, t, cond, cfg, cfg.inner_cfg_scale)
            eps = eps - eta * g_eps
        g, r = _rfds(field, sched, gen, theta, eps, t, cond, cfg, view)
        f1, b1 = field.counters.snapshot()
        theta = theta - cfg.lr * g
        _check(theta, it)
        rec.add(iter=it, residual_norm=_row_norm(r), inner_residual_norm=_row_norm(r_inner),
                grad_norm=_row_norm(g), forwards=f1 - f0, backwards=b1 - b0)
        if trace is not None:
            trace.append(theta.copy())
    if trace is not None:
        rec.trace = np.stack(trace)
    return theta, _finish(rec)
