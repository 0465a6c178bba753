"""PNG figures rendered from the plot-ready CSV rows (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_COLORS = {"direct": "#4c72b0", "reason": "#dd8452", "adaptive": "#55a868"}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def family_bars(rows: Sequence[dict], path: Path, metric: str = "mIoU") -> Path:
    """Grouped bars: one group per family, one bar per router mode."""
    fams = list(dict.fromkeys(r["family"] for r in rows))
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    width = 0.8 / max(1, len(modes))
    fig, ax = plt.subplots(figsize=(1.1 * len(fams) + 2.5, 3.6))
    x = np.arange(len(fams))
    for i, mode in enumerate(modes):
        vals = [next((r[metric] for r in rows if r["mode"] == mode and r["family"] == f), np.nan)
                for f in fams]
        ax.bar(x + (i - (len(modes) - 1) / 2) * width, vals, width, label=mode,
               color=MODE_COLORS.get(mode))
    ax.set_xticks(x, fams, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"{metric} (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    return _save(fig, path)


def routing_bars(rows: Sequence[dict], path: Path) -> Path:
    """Share of episodes sent to the direct path, per family."""
    fams = [r["family"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.0 * len(fams) + 2.0, 3.2))
    ax.bar(np.arange(len(fams)), [r["routing_rate"] for r in rows], color="#8172b3")
    ax.set_xticks(np.arange(len(fams)), fams, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("routed direct (%)")
    ax.set_ylim(0, 100)
    return _save(fig, path)


def training_curves(trace: Sequence[dict], path: Path) -> Path:
    """Stage I loss and Stage II mean unified reward against the step."""
    s1 = [t for t in trace if t.get("stage") == 1 and "step" in t and "loss" in t]
    s2 = [t for t in trace if t.get("stage") == 2 and "step" in t and "r_uni" in t]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    if s1:
        axes[0].plot([t["step"] for t in s1], [t["loss"] for t in s1], lw=0.8)
    axes[0].set_title("stage I loss", fontsize=9)
    axes[0].set_xlabel("step")
    if s2:
        steps = np.array([t["step"] for t in s2])
        vals = np.array([t["r_uni"] for t in s2])
        win = max(1, len(vals) // 50)
        smooth = np.convolve(vals, np.ones(win) / win, mode="valid")
        axes[1].plot(steps[win - 1:], smooth, lw=0.8)
    axes[1].set_title("stage II unified reward (moving mean)", fontsize=9)
    axes[1].set_xlabel("step")
    return _save(fig, path)


def sweep_lines(rows: Sequence[dict], axis: str, path: Path, metric: str = "mIoU") -> Path:
    """Metric against the swept value, one line per router mode."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    values = list(dict.fromkeys(r["value"] for r in rows))
    for mode in dict.fromkeys(r["mode"] for r in rows):
        ys = [next(r[metric] for r in rows if r["mode"] == mode and r["value"] == v) for v in values]
        ax.plot(range(len(values)), ys, marker="o", label=mode, color=MODE_COLORS.get(mode))
    ax.set_xticks(range(len(values)), [str(v) for v in values])
    ax.set_xlabel(axis)
    ax.set_ylabel(f"{metric} (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)
