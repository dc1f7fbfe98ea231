"""Report figures rendered to files with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(rows: list[dict], path) -> Path:
    """Per-step loss (faint) with the epoch mean on top."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = np.array([r["step"] for r in rows])
        loss = np.array([r["loss"] for r in rows])
        epochs = np.array([r["epoch"] for r in rows])
        ax.plot(steps, loss, lw=0.6, alpha=0.35, color="C0", label="step")
        ue = np.unique(epochs)
        centers = [steps[epochs == e].mean() for e in ue]
        means = [loss[epochs == e].mean() for e in ue]
        ax.plot(centers, means, marker="o", ms=3, color="C1", label="epoch mean")
        ax.set_xlabel("step")
        ax.set_ylabel("self-distillation loss")
        ax.legend()
        return _save(fig, path)


def plot_retrieval_curves(curves: dict, path) -> Path:
    """``curves`` maps a model name to ``{K: (recall, mAP)}``."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for i, (name, c) in enumerate(sorted(curves.items())):
            ks = sorted(c)
            a1.plot(ks, [c[k][0] for k in ks], marker=".", color=f"C{i}", label=name)
            a2.plot(ks, [c[k][1] for k in ks], marker=".", color=f"C{i}", label=name)
        a1.set_xlabel("K")
        a1.set_ylabel("Recall@K")
        a2.set_xlabel("K")
        a2.set_ylabel("mAP@K")
        a1.legend()
        return _save(fig, path)


def plot_metric_series(summaries: list[dict], x: str, path, metric: str = "bal_acc") -> Path:
    """Mean +- std of ``metric`` against ``x`` (``ratio`` or ``checkpoint``), one line per model."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        models = sorted({s["model"] for s in summaries})
        for i, m in enumerate(models):
            pts = sorted((s[x], s[f"{metric}_mean"], s[f"{metric}_std"]) for s in summaries
                         if s["model"] == m and s.get(x) is not None)
            if not pts:
                continue
            xs, ys, es = zip(*pts)
            ax.errorbar(xs, ys, yerr=es, marker="o", ms=3, capsize=2, color=f"C{i}", label=m)
        ax.set_xlabel(x)
        ax.set_ylabel(metric)
        ax.legend()
        return _save(fig, path)
