"""INI experiment configuration: schema, defaults, overrides and echo.

Every section mirrors one of the in-code config objects. Unknown sections
or keys are rejected together in a single :class:`ConfigError`. The echo
written to each run directory lists every key explicitly, so feeding it
back reproduces the run.
"""

from __future__ import annotations

import ast
import configparser
import io

EXPERIMENTS = (
    "train", "reflow", "sample", "invert", "rfds", "rfds-rev", "irfds-edit", "bridge-check", "bench-cost",
)


def _tuple(v):
    out = ast.literal_eval(v) if isinstance(v, str) else v
    return tuple(out) if isinstance(out, (list, tuple)) else (out,)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _label(v):
    # "random", "none" or an integer label
    s = str(v).strip().lower()
    return s if s in ("random", "none") else int(s)


def _opt_float(v):
    s = str(v).strip().lower()
    return None if s in ("", "none", "auto") else float(s)


def _opt_str(v):
    s = str(v).strip()
    return None if s.lower() in ("", "none", "auto") else s


SCHEMA = {
    "run": {
        "experiment": (str, None),
        "seed": (int, 0),
        "name": (_opt_str, None),
        "out_root": (_opt_str, None),
    },
    "schedule": {
        "kind": (str, "rectified_flow"),
        "t_min": (float, 0.02),
        "t_max": (float, 0.98),
    },
    "data": {
        "kind": (str, "ring8"),
        "seed": (int, 0),
        "mean": (_tuple, (0.0, 0.0)),
        "std": (float, 1.0),
        "means": (_tuple, ((2.0, 0.0), (-2.0, 0.0))),
        "mixture_std": (float, 0.2),
        "n_holdout": (int, 2000),
    },
    "model": {
        "checkpoint": (_opt_str, None),
        "field": (str, "net"),
    },
    "net": {
        "hidden": (_tuple, (128, 128, 128)),
        "n_freqs": (int, 16),
        "embed_dim": (int, 16),
        "activation": (str, "silu"),
    },
    "train": {
        "batch": (int, 256),
        "steps": (int, 20000),
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "cond_dropout": (float, 0.1),
        "seed": (int, 0),
    },
    "reflow": {
        "n_pairs": (int, 20000),
        "sample_steps": (int, 100),
        "steps": (int, 10000),
        "cfg_scale": (float, 1.0),
        "seed": (int, 1),
    },
    "sampler": {
        "steps": (int, 50),
        "cfg_scale": (float, 1.0),
        "n_samples": (int, 2000),
        "label": (_label, "random"),
        "n_trajectories": (int, 64),
    },
    "distill": {
        "w_sign": (_opt_float, None),
        "cfg_scale": (float, 50.0),
        "inner_cfg_scale": (float, 1.0),
        "lr": (float, 3e-3),
        "t_min": (float, 0.02),
        "t_max": (float, 0.98),
        "n_inner": (int, 1),
        "irfds_step_rule": (_opt_str, None),
        "irfds_step": (float, 1.0),
        "gauss_reg_weight": (float, 0.1),
        "max_iters": (int, 1000),
        "n_runs": (int, 50),
        "init_std": (float, 3.0),
        "label": (_label, "random"),
        "jacobian": (str, "drop"),
    },
    "edit": {
        "n_images": (int, 16),
        "source_label": (int, 0),
        "target_label": (int, 1),
        "fraction": (float, 1.0),
        "steps": (int, 5),
        "cfg_scale": (float, 1.5),
    },
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


def _parse_text(text):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([str(exc)]) from exc
    return {s: dict(cp[s]) for s in cp.sections()}


def load_config(path=None, text=None, overrides=()):
    """Parse, apply ``section.key=value`` overrides, validate and fill defaults."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = _parse_text(f.read())
    elif text is not None:
        raw = _parse_text(text)
    problems = []
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            problems.append(f"override {item!r} is not of the form section.key=value")
            continue
        raw.setdefault(section, {})[name] = value.strip()

    for section, values in raw.items():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key in values:
            if key not in SCHEMA[section]:
                problems.append(f"unknown key {section}.{key}")

    cfg = {}
    for section, keys in SCHEMA.items():
        cfg[section] = {}
        for key, (conv, default) in keys.items():
            if key in raw.get(section, {}):
                try:
                    cfg[section][key] = conv(raw[section][key])
                except (ValueError, SyntaxError) as exc:
                    problems.append(f"bad value for {section}.{key}: {exc}")
            else:
                cfg[section][key] = default
    exp = cfg["run"]["experiment"]
    if exp not in EXPERIMENTS:
        problems.append(f"run.experiment must be one of {', '.join(EXPERIMENTS)}; got {exp!r}")
    if problems:
        raise ConfigError(problems)
    return cfg


def _render(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return repr(tuple(v))
    return str(v)


def dump_config(cfg) -> str:
    """INI text listing every key; ``load_config(text=dump_config(c)) == c``."""
    buf = io.StringIO()
    for section, keys in SCHEMA.items():
        buf.write(f"[{section}]\n")
        for key in keys:
            buf.write(f"{key} = {_render(cfg[section][key])}\n")
        buf.write("\n")
    return buf.getvalue()
