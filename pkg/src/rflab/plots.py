"""SVG figures for 2D runs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt keeps the SVG text identical across runs
matplotlib.rcParams["svg.hashsalt"] = "rflab"
matplotlib.rcParams["svg.fonttype"] = "none"

_SVG_META = {"Date": None, "Creator": None}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def _reference(ax, reference):
    if reference is not None:
        ax.scatter(reference[:, 0], reference[:, 1], s=2, c="0.75", label="data")


def scatter_svg(path, points, reference=None, title=""):
    fig, ax = plt.subplots(figsize=(4, 4))
    _reference(ax, reference)
    ax.scatter(points[:, 0], points[:, 1], s=3, c="tab:blue", label="samples")
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    _finish(fig, path)


def trajectories_svg(path, states, reference=None, title=""):
    """``states`` is ``(steps + 1, n, 2)``."""
    fig, ax = plt.subplots(figsize=(4, 4))
    _reference(ax, reference)
    for j in range(states.shape[1]):
        ax.plot(states[:, j, 0], states[:, j, 1], lw=0.6, c="tab:blue", alpha=0.6)
    ax.scatter(states[0, :, 0], states[0, :, 1], s=4, c="k", label="start")
    ax.scatter(states[-1, :, 0], states[-1, :, 1], s=4, c="tab:red", label="end")
    ax.set_aspect("equal")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    _finish(fig, path)


def theta_trace_svg(path, trace, reference=None, title=""):
    """``trace`` is ``(iters + 1, n_runs, 2)``; one polyline per run."""
    stride = max(1, trace.shape[0] // 400)
    trajectories_svg(path, trace[::stride] if stride > 1 else trace, reference, title)


def paired_svg(path, panels, reference=None):
    """Side-by-side scatter panels; ``panels`` is a list of ``(title, points)``."""
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4), squeeze=False)
    for ax, (title, pts) in zip(axes[0], panels):
        _reference(ax, reference)
        ax.scatter(pts[:, 0], pts[:, 1], s=4, c="tab:blue")
        ax.set_aspect("equal")
        ax.set_title(title)
    _finish(fig, path)


def loss_svg(path, losses, window=100):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, lw=0.4, c="0.7")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, len(losses)), smooth, c="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    _finish(fig, path)
