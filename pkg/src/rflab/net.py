"""Conditional MLP velocity network with hand-written backpropagation.

Input features are ``[x, sin(w_k t), cos(w_k t), embed(label)]``; the last
embedding row is the null label used for unconditional predictions. Hidden
layers use SiLU. Gradients with respect to parameters and to ``x`` are
derived by hand and checked against finite differences in the tests.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .fields import ConditionError, Field, PassCounters, cfg_velocity
from .interpolant import Schedule, ScheduleKind, interpolate, velocity_target

log = logging.getLogger(__name__)

__all__ = [
    "DivergenceError",
    "NetConfig",
    "TrainConfig",
    "VelocityNet",
    "cfg_velocity",
    "load_checkpoint",
    "reflow_finetune",
    "save_checkpoint",
    "train_flow_matching",
]


class DivergenceError(RuntimeError):
    def __init__(self, step, what="loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple = (128, 128, 128)
    n_freqs: int = 16
    embed_dim: int = 16
    activation: str = "silu"
    max_freq: float = 100.0
    zero_final: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ("silu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 256
    steps: int = 20_000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 1000

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")


def _silu(z):
    s = expit(z)
    return z * s, s * (1.0 + z * (1.0 - s))


class VelocityNet(Field):
    """``v(x, t, label)``; a trained instance is treated as immutable."""

    def __init__(self, dim, n_labels=0, config: NetConfig | None = None, seed=0, counters=None):
        super().__init__(counters)
        self.dim = int(dim)
        self.n_labels = int(n_labels)
        self.config = config or NetConfig()
        self.reflowed = False
        self.loss_history = np.zeros(0)
        c = self.config
        self.freqs = np.geomspace(1.0, c.max_freq, c.n_freqs) if c.n_freqs else np.zeros(0)
        rng = np.random.default_rng(seed)
        widths = [self.in_dim, *c.hidden, self.dim]
        params = {"embed": rng.normal(0.0, 1.0, (self.n_labels + 1, c.embed_dim))}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            scale = 0.0 if (last and c.zero_final) else np.sqrt(2.0 / (fan_in + fan_out))
            params[f"W{i}"] = rng.normal(0.0, 1.0, (fan_in, fan_out)) * scale
            params[f"b{i}"] = np.zeros(fan_out)
        self.params = params

    @property
    def in_dim(self):
        return self.dim + 2 * self.config.n_freqs + self.config.embed_dim

    @property
    def n_layers(self):
        return len(self.config.hidden) + 1

    @property
    def param_names(self):
        return ["embed"] + [f"{p}{i}" for i in range(self.n_layers) for p in ("W", "b")]

    # -- flat parameter vector ------------------------------------------
    def get_flat(self):
        return np.concatenate([self.params[k].ravel() for k in self.param_names])

    def set_flat(self, phi):
        phi = np.asarray(phi, dtype=float)
        i = 0
        for k in self.param_names:
            n = self.params[k].size
            self.params[k] = phi[i : i + n].reshape(self.params[k].shape).copy()
            i += n
        if i != phi.size:
            raise ValueError(f"expected {i} parameters, got {phi.size}")

    def flatten_grads(self, grads):
        return np.concatenate([grads[k].ravel() for k in self.param_names])

    def copy(self):
        other = VelocityNet.__new__(VelocityNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.counters = PassCounters()
        return other

    # -- evaluation -----------------------------------------------------
    def _labels(self, cond, n, allow_null=False):
        if cond is None:
            return np.full(n, self.n_labels)
        labels = np.asarray(cond)
        top = self.n_labels + 1 if allow_null else self.n_labels
        if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= top):
            raise ConditionError(f"labels must be integers in [0, {self.n_labels}), got {cond}")
        return np.broadcast_to(labels, (n,))

    def _features(self, x, t, cond, allow_null):
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        wt = t[:, None] * self.freqs
        labels = self._labels(cond, n, allow_null)
        return np.concatenate([x, np.sin(wt), np.cos(wt), self.params["embed"][labels]], axis=1), labels

    def _forward(self, x, t, cond, allow_null=False):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[-1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {x.shape}")
        h, labels = self._features(x2, t, cond, allow_null)
        cache = []
        for i in range(self.n_layers):
            W, b = self.params[f"W{i}"], self.params[f"b{i}"]
            z = h @ W + b
            if i == self.n_layers - 1:
                cache.append((h, None))
                h = z
            elif self.config.activation == "silu":
                a, da = _silu(z)
                cache.append((h, da))
                h = a
            else:
                cache.append((h, None))
                h = z
        out = h[0] if squeeze else h
        return out, (cache, labels, squeeze)

    def _evaluate(self, x, t, cond):
        return self._forward(x, t, cond)[0]

    def _backward(self, cache, upstream, want_params):
        layers, labels, squeeze = cache
        g = np.atleast_2d(np.asarray(upstream, dtype=float))
        grads = {}
        for i in reversed(range(self.n_layers)):
            h_in, da = layers[i]
            if da is not None:
                g = g * da
            if want_params:
                grads[f"W{i}"] = h_in.T @ g
                grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
        return g, grads, labels, squeeze

    def backward_params(self, x, t, cond, upstream):
        """Vector-Jacobian product with respect to every parameter, as a dict."""
        _, cache = self._forward(x, t, cond)
        return _param_grads(self, cache, upstream)

    def backward_input(self, x, t, cond, upstream):
        """Vector-Jacobian product with respect to ``x``; one backward pass."""
        _, cache = self._forward(x, t, cond)
        g_in, _, _, squeeze = self._backward(cache, upstream, want_params=False)
        self.counters.add(backwards=1)
        g = g_in[:, : self.dim]
        return g[0] if squeeze else g

    input_vjp = backward_input


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _fit(net, sched, draw_batch, cfg: TrainConfig, rng):
    """Shared flow-matching regression loop; ``draw_batch`` yields (x_star, eps, labels)."""
    opt = Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        x_star, eps, labels = draw_batch(rng, cfg.batch)
        t = sched.sample_t(rng, cfg.batch)
        if labels is None or net.n_labels == 0:
            cond = None
        else:
            drop = rng.random(cfg.batch) < cfg.cond_dropout
            cond = np.where(drop, net.n_labels, labels)
        x_t = interpolate(sched, x_star, eps, t)
        target = velocity_target(sched, x_star, eps)
        # dropped rows address the null embedding row directly
        out, cache = net._forward(x_t, t, cond, allow_null=True)
        diff = out - target
        loss = float(np.mean(np.sum(diff**2, axis=1)))
        if not np.isfinite(loss):
            raise DivergenceError(step)
        losses[step] = loss
        grads = _param_grads(net, cache, 2.0 * diff / cfg.batch)
        opt.step(net.params, grads)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.5f", step, loss)
    net.loss_history = np.concatenate([net.loss_history, losses])
    return net


def _param_grads(net, cache, upstream):
    g_in, grads, labels, _ = net._backward(cache, upstream, want_params=True)
    emb = np.zeros_like(net.params["embed"])
    np.add.at(emb, labels, g_in[:, net.in_dim - net.config.embed_dim :])
    grads["embed"] = emb
    return grads


def train_flow_matching(sched: Schedule, data, cfg: TrainConfig, net: VelocityNet | None = None,
                        arch: NetConfig | None = None, n_labels: int | None = None):
    """Fit a velocity net to the flow-matching objective.

    ``data(rng, n)`` must return ``(points, labels)`` with ``labels`` either
    ``None`` or an integer array. Without ``net`` a fresh one is built from
    ``arch``; dimension and label count are read off a probe draw.
    """
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        probe, probe_labels = data(np.random.default_rng(cfg.seed + 7919), 2)
        if n_labels is None:
            n_labels = getattr(data, "n_labels", 0 if probe_labels is None else int(np.max(probe_labels)) + 1)
        net = VelocityNet(probe.shape[1], n_labels, arch, seed=cfg.seed)
    else:
        net = net.copy()

    def draw(rng, n):
        x_star, labels = data(rng, n)
        return x_star, rng.standard_normal(x_star.shape), labels

    return _fit(net, sched, draw, cfg, rng)


def reflow_finetune(net: VelocityNet, sched: Schedule, n_pairs: int, sample_steps: int,
                    cfg: TrainConfig, cfg_scale: float = 1.0):
    """Fine-tune on (noise, sample) couplings produced by the net itself.

    A ``cond_dropout`` share of the pairs is generated unconditionally so the
    null-label prediction is straightened on its own couplings.
    """
    if n_pairs == 0:
        return net
    from .sampler import SamplerConfig, euler_sample

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    pair_rng = np.random.default_rng(seeds[0])
    eps = pair_rng.standard_normal((n_pairs, net.dim))
    if net.n_labels:
        labels = pair_rng.integers(0, net.n_labels, n_pairs)
        uncond = pair_rng.random(n_pairs) < cfg.cond_dropout
    else:
        labels = np.zeros(n_pairs, dtype=int)
        uncond = np.ones(n_pairs, dtype=bool)
    x_hat = np.empty_like(eps)
    scfg = SamplerConfig(steps=sample_steps, cfg_scale=cfg_scale)
    if np.any(uncond):
        x_hat[uncond], _ = euler_sample(net, sched, eps[uncond], scfg, None)
    if np.any(~uncond):
        x_hat[~uncond], _ = euler_sample(net, sched, eps[~uncond], scfg, labels[~uncond])
    pair_labels = np.where(uncond, net.n_labels, labels) if net.n_labels else None

    def draw(rng, n):
        idx = rng.integers(0, n_pairs, n)
        return x_hat[idx], eps[idx], None if pair_labels is None else pair_labels[idx]

    # the unconditional rows already carry the null label; no further dropout
    tuned = _fit(net.copy(), sched, draw, TrainConfig(**{**asdict(cfg), "cond_dropout": 0.0}),
                 np.random.default_rng(seeds[1]))
    tuned.reflowed = True
    return tuned


# -- checkpoints ---------------------------------------------------------
MAGIC = b"RFLABNET"
VERSION = 1


def save_checkpoint(net: VelocityNet, path, sched: Schedule | None = None):
    tensors, offset = [], 0
    for name in net.param_names:
        arr = net.params[name]
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format": "rflab-checkpoint",
        "version": VERSION,
        "schedule": None if sched is None else sched.kind.value,
        "dim": net.dim,
        "n_labels": net.n_labels,
        "reflowed": net.reflowed,
        "arch": {**asdict(net.config), "hidden": list(net.config.hidden)},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(blob)))
        f.write(blob)
        for name in net.param_names:
            f.write(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(net, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not an rflab checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=20 + hlen)
    net = VelocityNet(header["dim"], header["n_labels"], NetConfig(**header["arch"]))
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=int))
        net.params[entry["name"]] = data[entry["offset"] : entry["offset"] + n].reshape(entry["shape"]).astype(float)
    net.reflowed = bool(header.get("reflowed", False))
    return net, header


def schedule_from_header(header, **kw):
    return Schedule(ScheduleKind(header["schedule"]), **kw)
