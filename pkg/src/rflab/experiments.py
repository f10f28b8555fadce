"""Runnable experiments; each writes CSV/JSON/SVG artifacts into one run directory."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import plots
from .config import ConfigError, dump_config
from .datasets import Dataset, DatasetKind, sample_dataset
from .distill import (
    DistillConfig,
    IdentityGenerator,
    irfds_invert,
    rfds_optimize,
    rfds_rev_optimize,
    sds_grad,
)
from .fields import PassCounters
from .interpolant import Schedule, ScheduleKind
from .metrics import energy_permutation_test, mode_distances
from .net import NetConfig, TrainConfig, VelocityNet, load_checkpoint, reflow_finetune, save_checkpoint, train_flow_matching
from .oracle import GaussianMixture, MixtureScoreField, MixtureVelocityField, oracle_score, oracle_velocity, score_to_velocity
from .records import RunRecord, _jsonable
from .sampler import (
    SamplerConfig,
    euler_invert,
    euler_sample,
    partial_insert_sample,
    straightness,
    write_trajectory_csv,
)

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "RFLAB_RUN_ROOT"


# -- builders ------------------------------------------------------------
def build_schedule(cfg):
    s = cfg["schedule"]
    try:
        return Schedule(ScheduleKind(s["kind"]), s["t_min"], s["t_max"])
    except ValueError as exc:
        raise ConfigError([f"schedule: {exc}"]) from exc


def build_dataset(cfg):
    d = cfg["data"]
    try:
        kind = DatasetKind(d["kind"])
        mix = None
        if kind is DatasetKind.MIXTURE:
            mix = GaussianMixture.isotropic(np.asarray(d["means"], dtype=float), d["mixture_std"])
        return Dataset(kind, d["seed"], tuple(float(v) for v in d["mean"]), d["std"], mix)
    except ValueError as exc:
        raise ConfigError([f"data: {exc}"]) from exc


def build_train_config(cfg):
    t = cfg["train"]
    return TrainConfig(batch=t["batch"], steps=t["steps"], lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"],
                       adam_eps=t["adam_eps"], cond_dropout=t["cond_dropout"], seed=t["seed"])


def build_distill_config(cfg, **over):
    d = cfg["distill"]
    kw = dict(w_sign=d["w_sign"], cfg_scale=d["cfg_scale"], inner_cfg_scale=d["inner_cfg_scale"], lr=d["lr"],
              t_range=(d["t_min"], d["t_max"]), n_inner=d["n_inner"], irfds_step_rule=d["irfds_step_rule"],
              irfds_step=d["irfds_step"], gauss_reg_weight=d["gauss_reg_weight"], max_iters=d["max_iters"],
              seed=cfg["run"]["seed"], keep_trace=True)
    kw.update(over)
    try:
        return DistillConfig(**kw)
    except ValueError as exc:
        raise ConfigError([f"distill: {exc}"]) from exc


def load_field(cfg, sched, ds):
    """The velocity field named by ``[model]``: a checkpointed net or the exact oracle."""
    m = cfg["model"]
    if m["field"] == "oracle":
        try:
            return MixtureVelocityField(ds.as_mixture(), sched)
        except ValueError as exc:
            raise ConfigError([f"model.field = oracle: {exc}"]) from exc
    if m["field"] != "net":
        raise ConfigError([f"model.field must be 'net' or 'oracle', got {m['field']!r}"])
    if not m["checkpoint"]:
        raise ConfigError(["model.checkpoint is required for this experiment"])
    net, header = load_checkpoint(m["checkpoint"])
    if header.get("schedule") not in (None, sched.kind.value):
        raise ConfigError([f"checkpoint was trained with schedule {header['schedule']!r}"])
    return net


def resolve_labels(spec, n_labels, n, rng):
    if spec == "none" or n_labels == 0:
        return None
    if spec == "random":
        return rng.integers(0, n_labels, n)
    if not 0 <= spec < n_labels:
        raise ConfigError([f"label {spec} outside [0, {n_labels})"])
    return int(spec)


def run_dir_for(cfg):
    root = Path(cfg["run"]["out_root"] or os.environ.get(RUN_ROOT_ENV, "runs"))
    name = cfg["run"]["name"]
    if not name:
        digest = hashlib.sha1(dump_config(cfg).encode("utf-8")).hexdigest()[:8]
        name = f"{cfg['run']['experiment']}-{digest}"
    return root / name


def _write_points(path, points, labels=None):
    header = ",".join(([] if labels is None else ["label"]) + [f"x{i}" for i in range(points.shape[1])])
    cols = points if labels is None else np.column_stack([np.broadcast_to(labels, len(points)), points])
    np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt="%.17g")


def _quality(ds, cfg, samples):
    held, _ = sample_dataset(ds, cfg["data"]["n_holdout"], stream=1)
    res = energy_permutation_test(samples, held, seed=cfg["run"]["seed"])
    return held, {"energy_distance": res.statistic, "perm_threshold_95": res.threshold,
                  "perm_p_value": res.p_value, "below_threshold": res.passed}


# -- experiments ---------------------------------------------------------
def exp_train(cfg, out, sched, ds):
    n = cfg["net"]
    arch = NetConfig(hidden=n["hidden"], n_freqs=n["n_freqs"], embed_dim=n["embed_dim"], activation=n["activation"])
    net = train_flow_matching(sched, ds, build_train_config(cfg), arch=arch, n_labels=ds.n_labels)
    save_checkpoint(net, out / "model.ckpt", sched)
    np.savetxt(out / "loss.csv", np.column_stack([np.arange(len(net.loss_history)), net.loss_history]),
               delimiter=",", header="step,loss", comments="", fmt=["%d", "%.17g"])
    plots.loss_svg(out / "loss.svg", net.loss_history)
    summary = {"final_loss_avg100": float(np.mean(net.loss_history[-100:]))}
    summary.update(_sample_and_score(cfg, out, sched, ds, net))
    return summary


def _sample_and_score(cfg, out, sched, ds, field):
    s = cfg["sampler"]
    rng = np.random.default_rng([cfg["run"]["seed"], 17])
    eps = rng.standard_normal((s["n_samples"], ds.dim))
    labels = resolve_labels(s["label"], field.n_labels, s["n_samples"], rng)
    scfg = SamplerConfig(steps=s["steps"], cfg_scale=s["cfg_scale"], keep_trajectory=True)
    x, traj = euler_sample(field, sched, eps, scfg, labels)
    _write_points(out / "samples.csv", x, labels)
    k = min(s["n_trajectories"], len(x))
    traj.states, traj.velocities = traj.states[:, :k], traj.velocities[:, :k]
    write_trajectory_csv(out / "trajectories.csv", traj)
    held, q = _quality(ds, cfg, x)
    if ds.dim == 2:
        plots.scatter_svg(out / "samples.svg", x, held, f"{s['steps']}-step Euler samples")
        plots.trajectories_svg(out / "trajectories.svg", traj.states, held, "sampling trajectories")
    return q


def exp_sample(cfg, out, sched, ds):
    return _sample_and_score(cfg, out, sched, ds, load_field(cfg, sched, ds))


def _round_trip(field, sched, eps, steps, labels):
    x, _ = euler_sample(field, sched, eps, SamplerConfig(steps=steps), labels)
    back = euler_invert(field, sched, x, SamplerConfig(steps=steps, direction="data_to_noise"), labels)
    return np.linalg.norm(back - eps, axis=1) / np.linalg.norm(eps, axis=1)


def exp_reflow(cfg, out, sched, ds):
    net = load_field(cfg, sched, ds)
    r, s = cfg["reflow"], cfg["sampler"]
    rng = np.random.default_rng([cfg["run"]["seed"], 23])
    eps = rng.standard_normal((256, ds.dim))
    labels = resolve_labels(s["label"], net.n_labels, 256, rng)
    tcfg = TrainConfig(**{**build_train_config(cfg).__dict__, "steps": r["steps"], "seed": r["seed"]})
    tuned = reflow_finetune(net, sched, r["n_pairs"], r["sample_steps"], tcfg, cfg_scale=r["cfg_scale"])
    save_checkpoint(tuned, out / "reflow.ckpt", sched)
    summary = {}
    for tag, f in (("before", net), ("after", tuned)):
        summary[f"straightness_{tag}"] = straightness(f, sched, eps, s["steps"], labels)
        summary[f"roundtrip_median_{tag}"] = float(np.median(_round_trip(f, sched, eps, s["steps"], labels)))
        if ds.dim == 2:
            _, traj = euler_sample(f, sched, eps[:64], SamplerConfig(steps=s["steps"], keep_trajectory=True),
                                   None if labels is None else labels[:64] if np.ndim(labels) else labels)
            plots.trajectories_svg(out / f"trajectories_{tag}.svg", traj.states, None, f"{tag} reflow")
    return summary


def exp_invert(cfg, out, sched, ds):
    field = load_field(cfg, sched, ds)
    d, s = cfg["distill"], cfg["sampler"]
    rng = np.random.default_rng([cfg["run"]["seed"], 29])
    eps_true = rng.standard_normal((d["n_runs"], ds.dim))
    labels = resolve_labels(s["label"], field.n_labels, d["n_runs"], rng)
    scfg = SamplerConfig(steps=s["steps"], cfg_scale=s["cfg_scale"])
    x, _ = euler_sample(field, sched, eps_true, scfg, labels)
    dcfg = build_distill_config(cfg, cfg_scale=s["cfg_scale"])
    eps, rec = irfds_invert(field, sched, x, labels, dcfg)
    recon, _ = euler_sample(field, sched, eps, scfg, labels)
    rec.write_csv(out / "run.csv")
    _write_points(out / "recovered_noise.csv", eps, labels)
    err = np.linalg.norm(recon - x, axis=1)
    if ds.dim == 2:
        plots.paired_svg(out / "inversion.svg", [("noise (true)", eps_true), ("noise (recovered)", eps)])
    return {**rec.summary, "reconstruction_median": float(np.median(err)),
            "noise_error_median": float(np.median(np.linalg.norm(eps - eps_true, axis=1)))}


def _distill_common(cfg, sched, ds):
    field = load_field(cfg, sched, ds)
    d = cfg["distill"]
    rng = np.random.default_rng([cfg["run"]["seed"], 31])
    init = rng.standard_normal((d["n_runs"], ds.dim)) * d["init_std"]
    labels = resolve_labels(d["label"], field.n_labels, d["n_runs"], rng)
    return field, init, labels


def _distill_report(cfg, out, ds, tag, theta, rec):
    rec.write_csv(out / f"{tag}_run.csv")
    rec.write_trace_csv(out / f"{tag}_trace.csv")
    _write_points(out / f"{tag}_theta.csv", theta)
    held, q = _quality(ds, cfg, theta)
    summary = {f"{tag}_{k}": v for k, v in {**rec.summary, **q}.items()}
    try:
        mix = ds.as_mixture()
        dist, _ = mode_distances(theta, mix.means)
        summary[f"{tag}_mode_fraction_3sigma"] = float(np.mean(dist < 3 * np.sqrt(mix.variances.max())))
    except ValueError:
        pass
    if ds.dim == 2:
        plots.theta_trace_svg(out / f"{tag}_trace.svg", rec.trace, held, f"{tag}: parameter traces")
    return summary


def exp_rfds(cfg, out, sched, ds):
    field, init, labels = _distill_common(cfg, sched, ds)
    mode = cfg["distill"]["jacobian"]
    if mode not in ("drop", "full", "both"):
        raise ConfigError([f"distill.jacobian must be drop, full or both; got {mode!r}"])
    variants = {"drop": [False], "full": [True], "both": [False, True]}[mode]
    if True in variants and not isinstance(field, VelocityNet):
        raise ConfigError(["distill.jacobian = full/both needs a network field (the oracle has no input Jacobian)"])
    dcfg = build_distill_config(cfg)
    summary, finals = {}, []
    for full in variants:
        tag = "rfds_full" if full else "rfds"
        theta, rec = rfds_optimize(field, sched, IdentityGenerator(ds.dim), init, labels, dcfg, full_jacobian=full,
                                   run_id=tag)
        summary.update(_distill_report(cfg, out, ds, tag, theta, rec))
        finals.append((f"{tag} (ED {summary[f'{tag}_energy_distance']:.3f})", theta))
    if len(finals) == 2 and ds.dim == 2:
        held, _ = sample_dataset(ds, cfg["data"]["n_holdout"], stream=1)
        plots.paired_svg(out / "jacobian_ablation.svg", finals, held)
    return summary


def exp_rfds_rev(cfg, out, sched, ds):
    field, init, labels = _distill_common(cfg, sched, ds)
    theta, rec = rfds_rev_optimize(field, sched, IdentityGenerator(ds.dim), init, labels, build_distill_config(cfg))
    return _distill_report(cfg, out, ds, "rfds_rev", theta, rec)


def exp_irfds_edit(cfg, out, sched, ds):
    """Invert source-class points, then regenerate them under the target class."""
    field = load_field(cfg, sched, ds)
    e = cfg["edit"]
    src_label, tgt_label = e["source_label"], e["target_label"]
    pool, pool_labels = sample_dataset(ds, 50 * e["n_images"], stream=2)
    if pool_labels is None:
        raise ConfigError(["irfds-edit needs a labeled dataset"])
    source = pool[pool_labels == src_label][: e["n_images"]]
    inv_cfg = build_distill_config(cfg, cfg_scale=cfg["sampler"]["cfg_scale"])
    noise, rec = irfds_invert(field, sched, source, src_label, inv_cfg)
    rec.write_csv(out / "inversion_run.csv")
    scfg = SamplerConfig(steps=e["steps"], cfg_scale=e["cfg_scale"])
    edited = partial_insert_sample(field, sched, noise, source, e["fraction"], scfg, tgt_label)
    recon = partial_insert_sample(field, sched, noise, source, e["fraction"], SamplerConfig(steps=e["steps"]), src_label)
    _write_points(out / "source.csv", source, src_label)
    _write_points(out / "edited.csv", edited, tgt_label)
    summary = {"edit_distance_mean": float(np.mean(np.linalg.norm(edited - source, axis=1))),
               "reconstruction_mean": float(np.mean(np.linalg.norm(recon - source, axis=1)))}
    try:
        _, nearest = mode_distances(edited, ds.as_mixture().means)
        summary["edited_at_target_fraction"] = float(np.mean(nearest == tgt_label))
    except ValueError:
        pass
    if ds.dim == 2:
        held, _ = sample_dataset(ds, cfg["data"]["n_holdout"], stream=1)
        plots.paired_svg(out / "edit.svg", [("source", source), ("reconstruction", recon), ("edited", edited)], held)
    return summary


def bridge_check(n_points=100, seed=0):
    """Largest ``|score_to_velocity(score) - velocity|`` over Gaussian and 3-component oracles."""
    rng = np.random.default_rng(seed)
    mixes = {
        "gaussian": GaussianMixture.isotropic(np.zeros((1, 2)), 1.0),
        "mixture3": GaussianMixture([0.2, 0.5, 0.3], [[2.0, 0.0], [-1.0, 1.5], [0.0, -2.0]],
                                    [[0.3, 0.5], [0.2, 0.2], [0.6, 0.1]]),
    }
    out = {}
    for kind in ScheduleKind:
        sched = Schedule(kind)
        for name, mix in mixes.items():
            x = rng.normal(0.0, 2.0, (n_points, 2))
            t = rng.uniform(0.05, 0.95, n_points)
            err = np.abs(score_to_velocity(sched, oracle_score(mix, sched, x, t), x, t) - oracle_velocity(mix, sched, x, t))
            out[f"{kind.value}/{name}"] = float(err.max())
    return out


def exp_bridge_check(cfg, out, sched, ds):
    errs = bridge_check(seed=cfg["run"]["seed"])
    worst = max(errs.values())
    print(f"max bridge error: {worst:.3e}")
    return {"max_bridge_error": worst, "per_case": errs, "passed": worst <= 1e-8}


def cost_table(field: MixtureVelocityField, sched, cond, cfg: DistillConfig, iters=10):
    """Counter-measured network passes per iteration for each method."""
    gen = IdentityGenerator(field.mix.dim)
    theta = np.zeros((4, field.mix.dim))
    table = {}
    runs = {
        "rfds": lambda c: rfds_optimize(field, sched, gen, theta, cond, c),
        "irfds": lambda c: irfds_invert(field, sched, theta, cond, DistillConfig(**{**c.as_dict(), "cfg_scale": 1.0})),
        "rfds_rev": lambda c: rfds_rev_optimize(field, sched, gen, theta, cond, c),
    }
    for name, run in runs.items():
        _, rec = run(DistillConfig(**{**cfg.as_dict(), "max_iters": iters, "keep_trace": False}))
        table[name] = {"forward": rec.summary["forwards_per_iter"], "backward": rec.summary["backwards_per_iter"]}
    score = MixtureScoreField(field.mix, sched, counters=PassCounters())
    rng = np.random.default_rng(0)
    for _ in range(iters):
        t = rng.uniform(*cfg.t_range, len(theta))
        sds_grad(score, sched, gen, theta, rng.standard_normal(theta.shape), t, cond, cfg)
    f, b = score.counters.snapshot()
    table["sds"] = {"forward": f / iters, "backward": b / iters}
    return table


def exp_bench_cost(cfg, out, sched, ds):
    mix = ds.as_mixture() if ds.kind is not DatasetKind.MOONS else None
    if mix is None:
        raise ConfigError(["bench-cost needs a dataset with a mixture oracle"])
    field = MixtureVelocityField(mix, sched)
    cond = 0 if field.n_labels else None
    table = cost_table(field, sched, cond, build_distill_config(cfg, keep_trace=False))
    (out / "cost.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, row in table.items():
        print(f"{name:9s} forward {row['forward']:g} backward {row['backward']:g}")
    return {"cost": table}


EXPERIMENT_FUNCS = {
    "train": exp_train,
    "reflow": exp_reflow,
    "sample": exp_sample,
    "invert": exp_invert,
    "rfds": exp_rfds,
    "rfds-rev": exp_rfds_rev,
    "irfds-edit": exp_irfds_edit,
    "bridge-check": exp_bridge_check,
    "bench-cost": exp_bench_cost,
}


def run_experiment(cfg):
    """Execute ``cfg['run']['experiment']``; returns ``(run_dir, summary)``."""
    sched = build_schedule(cfg)
    ds = build_dataset(cfg)
    out = run_dir_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    exp = cfg["run"]["experiment"]
    log.info("running %s into %s", exp, out)
    summary = EXPERIMENT_FUNCS[exp](cfg, out, sched, ds)
    rec = RunRecord(out.name, cfg, summary=summary)
    rec.write_summary(out / "summary.json")
    return out, _jsonable(summary)
