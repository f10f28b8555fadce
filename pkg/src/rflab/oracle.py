"""Exact velocity and score fields for diagonal Gaussian mixtures.

Pushing a mixture ``sum_k w_k N(mu_k, diag(S_k))`` through
``x_t = alpha x_* + sigma eps`` gives another mixture with means
``alpha mu_k`` and variances ``alpha^2 S_k + sigma^2``. Because every
``S_k > 0`` and ``alpha + sigma = 1``, these variances stay positive on the
whole closed interval, so the posterior quantities below are finite at both
endpoints. Only the score/velocity conversions divide by ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .fields import ConditionError, Field
from .interpolant import Schedule, schedule_eval


class EndpointError(ValueError):
    """Conversion attempted where alpha(t) vanishes."""


class SingularConversionError(ValueError):
    """velocity -> score is not invertible where sigma(t) vanishes."""


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.asarray(self.variances, dtype=float)
        if var.ndim == 1 and var.size == w.size:
            var = var[:, None]  # one isotropic variance per component
        var = np.broadcast_to(var, mu.shape).astype(float)
        if w.shape[0] != mu.shape[0]:
            raise ValueError("one weight per component required")
        if np.any(w <= 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise ValueError("weights must be positive and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        labels = np.arange(w.size) if self.labels is None else np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_labels(self) -> int:
        return int(self.labels.max()) + 1

    @classmethod
    def isotropic(cls, means, std, weights=None, labels=None):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k = means.shape[0]
        weights = np.full(k, 1.0 / k) if weights is None else weights
        return cls(weights, means, np.full(means.shape, float(std) ** 2), labels)

    def sample(self, n, rng: np.random.Generator):
        """Return ``(points, component_labels)``."""
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        x = self.means[comp] + np.sqrt(self.variances[comp]) * rng.standard_normal((n, self.dim))
        return x, self.labels[comp]

    def log_weights(self, cond, lead_shape=()):
        """Log mixture weights, restricted to components carrying ``cond``."""
        logw = np.log(self.weights)
        if cond is None:
            return logw
        cond = np.asarray(cond)
        if cond.dtype.kind not in "iu":
            raise ConditionError(f"labels must be integers, got {cond!r}")
        mask = self.labels == cond[..., None]
        if not np.all(mask.any(axis=-1)):
            raise ConditionError(f"no mixture component carries label(s) {cond}")
        if cond.ndim and cond.shape != tuple(lead_shape):
            raise ConditionError("per-row labels must match the batch shape")
        return np.where(mask, logw, -np.inf)


def _coeffs(sched, t):
    alpha, sigma, adot, sdot = schedule_eval(sched, t)
    alpha = np.asarray(alpha, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    # (...,) -> (..., 1, 1) so they broadcast over (..., K, d)
    if alpha.ndim:
        alpha = alpha.reshape(alpha.shape + (1, 1))
        sigma = sigma.reshape(sigma.shape + (1, 1))
    return alpha, sigma, adot, sdot


def _posterior(mix: GaussianMixture, sched: Schedule, x, t, cond=None):
    """Responsibilities and per-component posterior pieces at ``x_t = x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mix.dim:
        raise ValueError(f"expected points of dimension {mix.dim}, got {x.shape}")
    alpha, sigma, _, _ = _coeffs(sched, t)
    xk = x[..., None, :]
    var_t = alpha**2 * mix.variances + sigma**2
    diff = xk - alpha * mix.means
    loglik = -0.5 * np.sum(diff**2 / var_t + np.log(2 * np.pi * var_t), axis=-1)
    logits = mix.log_weights(cond, x.shape[:-1]) + loglik
    log_norm = logsumexp(logits, axis=-1, keepdims=True)
    resp = np.exp(logits - log_norm)
    return resp, diff, var_t, alpha, sigma, log_norm[..., 0]


def posterior_means(mix, sched, x, t, cond=None):
    """``(E[x_* | x_t = x], E[eps | x_t = x])``."""
    resp, diff, var_t, alpha, sigma, _ = _posterior(mix, sched, x, t, cond)
    x_star_k = mix.means + alpha * mix.variances / var_t * diff
    eps_k = sigma / var_t * diff
    r = resp[..., None]
    return np.sum(r * x_star_k, axis=-2), np.sum(r * eps_k, axis=-2)


def log_density(mix, sched, x, t, cond=None):
    """``log p_t(x)`` of the interpolated marginal."""
    return _posterior(mix, sched, x, t, cond)[-1]


def oracle_velocity(mix, sched, x, t, cond=None):
    x_hat, eps_hat = posterior_means(mix, sched, x, t, cond)
    return sched.alpha_dot * x_hat + sched.sigma_dot * eps_hat


def oracle_score(mix, sched, x, t, cond=None):
    """``grad_x log p_t(x)``."""
    resp, diff, var_t, *_ = _posterior(mix, sched, x, t, cond)
    return np.sum(resp[..., None] * (-diff / var_t), axis=-2)


def _bridge_coeffs(sched, t, x):
    alpha, sigma, adot, sdot = schedule_eval(sched, t)
    alpha = np.asarray(alpha, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(alpha == 0.0):
        raise EndpointError("alpha(t) = 0: score and velocity are not interconvertible at the noise endpoint")
    # v = a * x + b * s
    a = adot / alpha
    b = sigma / alpha * (adot * sigma - alpha * sdot)
    if a.ndim:
        a, b = a[..., None], b[..., None]
    return a, b


def score_to_velocity(sched: Schedule, s, x, t):
    """``(alpha_dot / alpha) x + (sigma / alpha)(alpha_dot sigma - alpha sigma_dot) s``."""
    x = np.asarray(x, dtype=float)
    a, b = _bridge_coeffs(sched, t, x)
    return a * x + b * np.asarray(s, dtype=float)


def velocity_to_score(sched: Schedule, v, x, t):
    x = np.asarray(x, dtype=float)
    a, b = _bridge_coeffs(sched, t, x)
    if np.any(b == 0.0):
        raise SingularConversionError("velocity carries no score information where sigma(t) = 0")
    return (np.asarray(v, dtype=float) - a * x) / b


class MixtureVelocityField(Field):
    """Exact PF-ODE velocity of a mixture; labels select sub-mixtures."""

    def __init__(self, mix: GaussianMixture, sched: Schedule, counters=None):
        super().__init__(counters)
        self.mix = mix
        self.sched = sched
        self.n_labels = mix.n_labels

    def _evaluate(self, x, t, cond):
        return oracle_velocity(self.mix, self.sched, x, t, cond)


class MixtureScoreField(Field):
    def __init__(self, mix: GaussianMixture, sched: Schedule, counters=None):
        super().__init__(counters)
        self.mix = mix
        self.sched = sched
        self.n_labels = mix.n_labels

    def _evaluate(self, x, t, cond):
        return oracle_score(self.mix, self.sched, x, t, cond)


class BridgedVelocityField(Field):
    """Velocity obtained from a score field through :func:`score_to_velocity`.

    Shares the score field's counters, so one call is one score forward.
    """

    def __init__(self, score_field: Field, sched: Schedule):
        super().__init__(score_field.counters)
        self.score_field = score_field
        self.sched = sched
        self.n_labels = score_field.n_labels

    def _evaluate(self, x, t, cond):
        return score_to_velocity(self.sched, self.score_field._evaluate(x, t, cond), x, t)
