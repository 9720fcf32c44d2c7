"""Figures written next to the text reports (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import GROUP_TITLES, GROUPS, _as_rows  # noqa: E402
from .training import LogRow  # noqa: E402


def plot_condition_bars(reports, out_path, title: str = "mIoU per condition") -> Path:
    """Grouped bars: one cluster per condition column, one bar per model; absent cells skipped."""
    rows = _as_rows(reports)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(GROUPS) + 0.4 * len(rows)), 3.6))
    x = np.arange(len(GROUPS))
    width = 0.8 / max(len(rows), 1)
    for i, (name, rep) in enumerate(rows):
        vals = [rep.miou(g) for g in GROUPS]
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, [np.nan if v is None else v for v in vals],
               width, label=name)
    ax.set_xticks(x, [GROUP_TITLES[g] for g in GROUPS])
    ax.set_ylim(0, 1)
    ax.set_ylabel("mIoU")
    ax.set_title(title)
    if rows:
        ax.legend(fontsize="small", ncol=2 if len(rows) > 3 else 1)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out_path


def plot_losses(log: Sequence[LogRow], out_path, window: int = 25) -> Path:
    """Segmentation loss per domain plus the supervisor losses, smoothed by a moving mean."""
    def smooth(v):
        v = np.asarray(v, float)
        if len(v) < window:
            return v
        return np.convolve(v, np.ones(window) / window, mode="valid")

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for dom in sorted({r.domain for r in log}):
        rows = [r for r in log if r.domain == dom]
        s = smooth([r.l_seg for r in rows])
        axes[0].plot([r.iter for r in rows][len(rows) - len(s):], s, label=dom)
    axes[0].set_title("segmentation loss")
    axes[0].set_xlabel("iteration")
    for key in ("l_was", "l_tas"):
        rows = [r for r in log if getattr(r, key) > 0]
        if rows:
            s = smooth([getattr(r, key) for r in rows])
            axes[1].plot([r.iter for r in rows][len(rows) - len(s):], s, label=key[2:].upper())
    axes[1].set_title("supervisor losses")
    axes[1].set_xlabel("iteration")
    for ax in axes:
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize="small")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out_path
