"""Matplotlib figures written next to the CSV / key=value reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(rows: Sequence[dict], path: str | Path) -> Path:
    """Loss per step, with held-out AEPE and PCK@0.1 when they were logged."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_pck) = plt.subplots(1, 2, figsize=(8, 3))
        steps = [r["step"] for r in rows]
        ax_loss.plot(steps, [r["loss"] for r in rows], label="train AEPE", color="tab:blue")
        evals = [r for r in rows if r.get("aepe") is not None]
        if evals:
            ax_loss.plot([r["step"] for r in evals], [r["aepe"] for r in evals], "o-", label="eval AEPE", color="tab:orange")
            ax_pck.plot([r["step"] for r in evals], [r["pck10"] for r in evals], "o-", color="tab:green")
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("AEPE (cells)")
        ax_loss.legend(frameon=False)
        ax_pck.set_xlabel("step")
        ax_pck.set_ylabel("eval PCK@0.1")
        ax_pck.set_ylim(0, 1)
        return _save(fig, path)


def plot_pck_bars(metrics: dict[str, dict[str, float]], path: str | Path) -> Path:
    """Grouped bars of PCK@{0.05, 0.1, 0.15}, one group per model."""
    keys = ("pck05", "pck10", "pck15")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        width = 0.8 / max(len(metrics), 1)
        x = np.arange(len(keys))
        for k, (name, m) in enumerate(metrics.items()):
            ax.bar(x + k * width, [m[key] for key in keys], width, label=name)
        ax.set_xticks(x + width * (len(metrics) - 1) / 2, ["α=0.05", "α=0.1", "α=0.15"])
        ax.set_ylabel("PCK")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_flow(pred: np.ndarray, path: str | Path, gt: np.ndarray | None = None, valid: np.ndarray | None = None) -> Path:
    """Quiver plot of an ``(h, w, 2)`` flow, optionally over the ground truth."""
    h, w = pred.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(4, 4))
        if gt is not None:
            mask = np.ones((h, w), bool) if valid is None else valid
            ax.quiver(xs[mask], ys[mask], gt[..., 0][mask], gt[..., 1][mask], angles="xy", scale_units="xy",
                      scale=1, color="0.6", width=0.004, label="ground truth")
        ax.quiver(xs, ys, pred[..., 0], pred[..., 1], angles="xy", scale_units="xy", scale=1,
                  color="tab:red", width=0.004, label="predicted")
        ax.set_xlim(-1, w)
        ax.set_ylim(h, -1)
        ax.set_aspect("equal")
        ax.legend(frameon=False, loc="upper right", fontsize=7)
        return _save(fig, path)
