from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class RunRecord:
    """Per-iteration metrics of one optimization or training run."""

    run_id: str = "run"
    config: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    trace: np.ndarray | None = None

    def add(self, **row):
        if self.rows and row["iter"] <= self.rows[-1]["iter"]:
            raise ValueError("rows must be strictly increasing in iter")
        self.rows.append(row)

    @property
    def columns(self):
        cols = []
        for row in self.rows:
            cols.extend(k for k in row if k not in cols)
        return cols

    def column(self, name):
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def write_csv(self, path):
        cols = self.columns or ["iter"]
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=cols, restval="")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(v) for k, v in row.items()})

    def write_trace_csv(self, path):
        """Columns ``iter, run, theta0..``; one line per run per recorded iteration."""
        if self.trace is None:
            raise ValueError("no trace recorded")
        tr = self.trace.reshape(self.trace.shape[0], -1, self.trace.shape[-1])
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["iter", "run"] + [f"theta{i}" for i in range(tr.shape[-1])])
            for k in range(tr.shape[0]):
                for j in range(tr.shape[1]):
                    w.writerow([k, j] + [repr(float(v)) for v in tr[k, j]])

    def write_summary(self, path):
        payload = {"run_id": self.run_id, "config": self.config, "summary": self.summary}
        Path(path).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj
