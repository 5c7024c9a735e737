"""Static SVG line charts of training-metrics columns."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import load_metrics_csv  # noqa: E402

DEFAULT_COLUMNS = ("entropy_tgt", "recall_s2t", "recall_t2s")

_TITLES = {
    "entropy_tgt": "Mean target-side sense entropy",
    "recall_s2t": "Source-to-target recall@1",
    "recall_t2s": "Target-to-source recall@1",
    "ppl_tgt": "Target-side perplexity",
    "l_total": "Total training loss",
}


def plot_metrics(metrics_csv, out_dir, columns=DEFAULT_COLUMNS):
    """One SVG per requested column; returns the written paths."""
    rows = load_metrics_csv(metrics_csv)
    if not rows:
        raise ValueError(f"{metrics_csv}: no metrics rows to plot")
    steps = [r["step"] for r in rows]
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for col in columns:
        if col not in rows[0]:
            raise ValueError(f"unknown metrics column {col!r}")
        ys = [r[col] for r in rows]
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        ax.plot(steps, ys, marker="o", markersize=2.5, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(col)
        ax.set_title(_TITLES.get(col, col))
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{col}.svg")
        fig.savefig(path, format="svg")
        plt.close(fig)
        paths.append(path)
    return paths
