"""Report figures rendered to PNG next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import CLASS_NAMES, PHASES


def save_loss_curve(records, path) -> None:
    """Per-iteration training loss, one line per stage."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for stage, color in ((1, "tab:blue"), (2, "tab:red")):
        pts = [(r["iter"], r["loss"]) for r in records if r.get("stage") == stage]
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, color=color, lw=1.2, label=f"stage {stage}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_dice_bars(reports, path) -> None:
    """Mean Dice per class and phase over all evaluated patients."""
    names = list(CLASS_NAMES.values())
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.38
    xs = np.arange(len(names))
    for k, phase in enumerate(PHASES):
        means = [float(np.mean([r.dice_scores[(phase, n)] for r in reports]))
                 for n in names]
        ax.bar(xs + (k - 0.5) * width, means, width, label=phase)
    ax.set_xticks(xs)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("Dice")
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_consistency_series(reports, path) -> None:
    """Frame-to-frame foreground Dice, one line per patient."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for report in reports:
        ax.plot(range(len(report.consistency)), report.consistency,
                lw=1.0, alpha=0.8, label=report.patient_id)
    ax.set_xlabel("frame pair t, t+1")
    ax.set_ylabel("consistency Dice")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if len(reports) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
