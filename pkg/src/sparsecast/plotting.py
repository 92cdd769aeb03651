"""Report figures: per-phase metric curves per feature set and the
personalisation drop/recovery bars. Files only; never opens a window."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def phase_curves(report, path, metric="macro_f1", ordering=None):
    """One line per feature set across training phases (mean over orderings)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for spec in report.specs:
            rows = [r for r in report.rows if r["features"] == spec and (ordering is None or r["ordering"] == ordering)]
            phases = sorted({r["phase"] for r in rows})
            labels, values = [], []
            for ph in phases:
                at = [r for r in rows if r["phase"] == ph]
                labels.append(f"{at[0]['train_users']}-{at[0]['test_users']}")
                values.append(sum(r[metric] for r in at) / len(at))
            ax.plot(range(len(phases)), values, marker="o", label=spec)
            ax.set_xticks(range(len(phases)), labels)
        ax.set_xlabel("train-test participants")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_ylim(0, 1.02)
        ax.legend(ncol=2)
        return _save(fig, path)


def personalization_bars(stages, path):
    """``stages`` maps a stage label to Metrics, in display order."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, sharey=True)
        names = list(stages)
        for ax, metric in zip(axes, ("accuracy", "macro_f1")):
            vals = [getattr(stages[n], metric) for n in names]
            ax.bar(range(len(names)), vals, color=["#4c72b0", "#c44e52", "#55a868"][: len(names)])
            ax.set_xticks(range(len(names)), names, rotation=15)
            ax.set_title(metric.replace("_", " "))
            for i, v in enumerate(vals):
                ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=7)
        axes[0].set_ylim(0, 1.08)
        return _save(fig, path)


def loss_curves(reports, path):
    """Epoch loss per phase from PhaseReports."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x0 = 0
        for rep in reports:
            xs = range(x0, x0 + len(rep.epoch_losses))
            ax.plot(list(xs), rep.epoch_losses, marker=".", label=f"phase {rep.phase}")
            x0 += len(rep.epoch_losses)
        ax.set_xlabel("epoch (cumulative)")
        ax.set_ylabel("training loss")
        ax.legend(ncol=3)
        return _save(fig, path)
