"""Report figures: per-group accuracy curves written next to the CSV files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

# fixed colours so the two methods read the same in every figure
METHOD_COLORS = {"gbdt": "tab:orange", "setnet": "tab:blue"}
METHOD_LABELS = {"gbdt": "binned features + boosting", "setnet": "GMM posteriors + set network"}

_STYLE = {
    "figure.figsize": (6.4, 3.6),
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 120,
}


def _save(fig, path):
    # no Software/date metadata so reruns give byte-identical files
    fig.savefig(path, metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)


def plot_group_accuracy(report, path, title=None):
    """Accuracy per group for one method's EvalReport."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ids = [g.group_id for g in report.groups]
        acc = [g.accuracy for g in report.groups]
        ax.plot(range(len(ids)), acc, marker="o", color=METHOD_COLORS.get(report.method, "k"),
                label=METHOD_LABELS.get(report.method, report.method))
        ax.axhline(report.macro_accuracy, ls="--", lw=0.8, color="grey",
                   label=f"macro {report.macro_accuracy:.3f}")
        ax.set_xticks(range(len(ids)), ids)
        ax.set_xlabel("group")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(max(0.0, min(acc, default=1.0) - 0.05), 1.01)
        ax.legend(loc="lower right")
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_comparison(rows, path, title=None):
    """Paired per-group accuracies of both methods.

    ``rows`` holds (group_id, n_test, acc_gbdt, acc_setnet); failed entries are None.
    """
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ids = [r[0] for r in rows]
        xs = range(len(ids))
        lows = []
        for col, method in ((2, "gbdt"), (3, "setnet")):
            pts = [(x, r[col]) for x, r in zip(xs, rows) if r[col] is not None]
            if not pts:
                continue
            lows.extend(a for _, a in pts)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    color=METHOD_COLORS[method], label=METHOD_LABELS[method])
        ax.set_xticks(list(xs), ids)
        ax.set_xlabel("group")
        ax.set_ylabel("test accuracy")
        low = min(lows, default=1.0)
        ax.set_ylim(max(0.0, low - 0.05), 1.01)
        ax.legend(loc="lower right")
        if title:
            ax.set_title(title)
        _save(fig, path)
