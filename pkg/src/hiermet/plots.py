"""Figure rendering for evaluation reports and decoded hierarchies.

Everything renders through the Agg backend straight to files, so the module
works in headless environments and never pops a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from hiermet.core import LevelSequence
from hiermet.evaluate import EvalReport


def _save_png(fig, path) -> None:
    # fixed metadata so identical inputs produce identical bytes
    fig.savefig(path, dpi=120, format="png", metadata={"Software": "hiermet"})
    plt.close(fig)


def render_report_figure(report: EvalReport, path) -> None:
    """Bar chart of mean F1 per metric with population-std error bars."""
    levels = sorted(report.per_level_f1)
    labels = [f"level {lv}" for lv in levels] + ["downbeat"]
    means = [report.per_level_f1[lv][0] for lv in levels] + [report.downbeat_f1[0]]
    stds = [report.per_level_f1[lv][1] for lv in levels] + [report.downbeat_f1[1]]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(labels)), 4.0))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4878a8", ecolor="#30303a")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("boundary F1")
    ax.set_title(f"mean and std over {report.num_songs} songs")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save_png(fig, path)


def render_structure_figure(
    decoded: LevelSequence,
    path,
    truth: LevelSequence | None = None,
    max_steps: int = 256,
) -> None:
    """Metrical dot diagram: one dot column per tatum, stacked by level.

    A step whose boundary level is ``l`` shows dots on rows 0..l, the
    familiar way metrical grids are drawn in analysis textbooks.  When
    ground truth is given it appears in a second panel on a shared axis.
    """
    panels = [("decoded", decoded)]
    if truth is not None:
        panels.append(("ground truth", truth))
    fig, axes = plt.subplots(
        len(panels),
        1,
        sharex=True,
        squeeze=False,
        figsize=(10.0, 2.2 * len(panels)),
    )
    for ax, (label, seq) in zip(axes[:, 0], panels):
        arr = seq.levels[:max_steps]
        for level in range(seq.num_layers + 1):
            xs = np.flatnonzero(arr >= level)
            ax.scatter(xs, np.full(xs.size, level), s=8, marker="o", color="#202028")
        ax.set_ylabel(label)
        ax.set_yticks(range(seq.num_layers + 1))
        ax.set_ylim(-0.6, seq.num_layers + 0.6)
        ax.grid(axis="y", alpha=0.2)
    axes[-1, 0].set_xlabel("tatum")
    fig.tight_layout()
    _save_png(fig, path)
