"""Report figures rendered straight to files (Agg backend, no display)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def figsize(width: float = 6.0, height: float | None = None) -> tuple[float, float]:
    """Width in inches; height defaults to width times the golden ratio."""
    if height is None:
        height = width * (math.sqrt(5) - 1.0) / 2.0
    return width, height


def plot_loss_curve(history, path, title: str = "training loss") -> Path:
    """Loss (log scale) and learning rate against step.

    ``history`` holds ``(step, lr, loss)`` triples as written to losses.csv.
    """
    path = Path(path)
    steps = [h[0] for h in history]
    lrs = [h[1] for h in history]
    losses = [h[2] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(steps, losses, color="tab:blue", lw=1.2, label="loss")
        if losses and min(losses) > 0:
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("masked NLL")
        ax.set_title(title)
        ax2 = ax.twinx()
        ax2.plot(steps, lrs, color="tab:orange", lw=0.8, ls="--", label="lr")
        ax2.set_ylabel("learning rate")
        ax2.spines["top"].set_visible(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right", frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_ablation(rows: list[dict], columns: list[str], path, title: str = "ablation") -> Path:
    """Grouped bars of relative deltas (percentage points) per grid point.

    ``rows`` are dicts with a ``name`` key and one numeric entry per column.
    """
    path = Path(path)
    n = max(len(rows), 1)
    width = 0.8 / max(len(columns), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(max(6.0, 0.55 * n + 2), 3.6))
        for j, col in enumerate(columns):
            xs = [i + (j - (len(columns) - 1) / 2) * width for i in range(len(rows))]
            ax.bar(xs, [r[col] for r in rows], width=width, label=col)
        ax.axhline(0.0, color="black", lw=0.6)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r["name"] for r in rows], rotation=45, ha="right")
        ax.set_ylabel("delta vs baseline (points)")
        ax.set_title(title)
        ax.legend(ncol=len(columns), frameon=False, loc="best")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_accuracy(acc: dict, path, title: str = "multiple-choice accuracy") -> Path:
    """Per-domain accuracy bars with the micro average as a reference line."""
    path = Path(path)
    names = list(acc["per_domain"])
    vals = [acc["per_domain"][d] for d in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(4.5))
        ax.bar(names, vals, color="tab:blue", width=0.6)
        ax.axhline(acc["micro"], color="black", lw=0.8, ls="--", label=f"micro {acc['micro']:.1f}")
        ax.axhline(25.0, color="gray", lw=0.6, ls=":", label="chance")
        ax.set_ylim(0, 100)
        ax.set_ylabel("accuracy (%)")
        ax.set_title(title)
        ax.legend(frameon=False, loc="upper right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
