"""Figures written next to the tabular outputs (PNG, non-interactive backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.cluster.hierarchy import dendrogram  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# fixed metadata keeps repeated renders byte-identical
_META = {"Software": "racesim"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def placement_heatmap(pm, path, title: str = "Placement probabilities"):
    """Competitor-by-rank heatmap with cell annotations."""
    with plt.rc_context(STYLE):
        n = len(pm.labels)
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * n, 0.8 + 0.45 * n))
        im = ax.imshow(pm.probs, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_xticks(range(n), [str(r) for r in range(1, n + 1)])
        ax.set_yticks(range(n), [f"{lab} ({er:.2f})" for lab, er in zip(pm.labels, pm.expected_rank)])
        ax.set_xlabel("finishing rank")
        ax.set_title(title)
        for h in range(n):
            for r in range(n):
                p = pm.probs[h, r]
                ax.text(r, h, f"{p:.2f}", ha="center", va="center", fontsize=7,
                        color="black" if p > 0.6 else "white")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="probability")
        return _save(fig, path)


def win_probability_series(series: pd.DataFrame, path):
    """Win probability of each competitor against the simulation start frame."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        for comp, sub in series.groupby("competitor", sort=True):
            ax.plot(sub["start_frame"], sub["p_rank_1"], marker="o", ms=3, lw=1.2, label=str(comp))
        ax.set_xlabel("start frame")
        ax.set_ylabel("win probability")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7, ncol=2, frameon=False)
        return _save(fig, path)


def profile_curves(curves: pd.DataFrame, path):
    """Speed profiles coloured by cluster."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.5))
        colours = plt.get_cmap("tab10")
        for (cl, horse), sub in curves.groupby(["cluster", "horse_id"], sort=True):
            ax.plot(sub["j"], sub["value"], color=colours((int(cl) - 1) % 10), lw=0.8, alpha=0.8)
        for cl in sorted(curves["cluster"].unique()):
            ax.plot([], [], color=colours((int(cl) - 1) % 10), label=f"cluster {cl}")
        ax.set_xlabel("distance run (m)")
        ax.set_ylabel("mean forward movement (m/frame)")
        ax.legend(frameon=False)
        return _save(fig, path)


def dendrogram_plot(result, path):
    with plt.rc_context(STYLE):
        n = len(result.horse_ids)
        fig, ax = plt.subplots(figsize=(max(4.0, 0.25 * n), 3.5))
        if n > 1:
            dendrogram(result.linkage_matrix(), labels=list(result.horse_ids), ax=ax, leaf_rotation=90,
                       color_threshold=0.0, above_threshold_color="0.3")
        ax.set_ylabel("Ward height")
        return _save(fig, path)


def ratings_plot(ratings: pd.DataFrame, path, top: int = 20):
    with plt.rc_context(STYLE):
        sub = ratings.head(top).iloc[::-1]
        fig, ax = plt.subplots(figsize=(5.0, 0.6 + 0.22 * len(sub)))
        ax.barh(sub["jockey_id"], sub["rating"], xerr=1.96 * sub["posterior_sd"], color="0.45", ecolor="0.2")
        ax.axvline(0.0, color="black", lw=0.6)
        ax.set_xlabel("jockey effect (m/frame)")
        return _save(fig, path)


def lane_heatmap(pm, path):
    return placement_heatmap(pm, path, title="Lane placement probabilities")


def finish_time_intervals(pm, path):
    with plt.rc_context(STYLE):
        n = len(pm.labels)
        fig, ax = plt.subplots(figsize=(5.0, 0.8 + 0.35 * n))
        y = np.arange(n)
        err = np.maximum([pm.finish_mean - pm.finish_lo, pm.finish_hi - pm.finish_mean], 0.0)
        ax.errorbar(pm.finish_mean, y, xerr=err, fmt="o", color="0.2", ms=4, capsize=3)
        ax.set_yticks(y, list(pm.labels))
        ax.invert_yaxis()
        ax.set_xlabel("finish time (s), mean and 95% interval")
        return _save(fig, path)
