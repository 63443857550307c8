"""Matplotlib figures written next to the JSON/CSV reports."""
from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)


def plot_field(field, scene=None, path="field.png", sample=None, title: Optional[str] = None):
    """Heatmap of a placement field with object boxes and an optional sampled point."""
    ws = field.workspace
    extent = (-ws.width / 2, ws.width / 2, -ws.height / 2, ws.height / 2)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        probs = np.ma.masked_where(field.probs <= 0, field.probs)
        im = ax.imshow(probs, origin="lower", extent=extent, cmap="Greys", interpolation="nearest")
        if scene is not None:
            for o in scene.objects:
                b = o.aabb
                ax.add_patch(Rectangle((b.min.x, b.min.y), b.width, b.height, fill=False, ec="tab:red", lw=1))
                ax.annotate(o.name, (b.center.x, b.max.y), fontsize=6, ha="center", va="bottom", color="tab:red")
        if sample is not None:
            ax.plot([sample.x], [sample.y], marker="*", ms=10, color="tab:orange", mec="k", mew=0.5)
        ax.set_xlim(extent[:2])
        ax.set_ylim(extent[2:])
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        if title:
            ax.set_title(title, fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.7, label="p(cell)")
        _save(fig, path)


def plot_loss(trace: Sequence[float], path="loss.png", window: int = 200):
    trace = np.asarray(trace, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(trace, lw=0.3, alpha=0.4, color="0.5", label="per step")
        if len(trace) >= window:
            smooth = np.convolve(trace, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, len(trace)), smooth, lw=1.2, color="k", label=f"mean of {window}")
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_eval(report, path="eval.png"):
    """Per-level success rates (left) and failure reasons (right)."""
    doc = report.to_json()
    levels = list(doc["levels"])
    rates = [100 * (doc["levels"][lv]["rate"] or 0.0) for lv in levels]
    reasons = [k for k, v in doc["failures"].items() if v]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.0, 3.0), gridspec_kw={"width_ratios": [1, 1.3]})
        bars = ax1.bar(levels + ["overall"], rates + [100 * (doc["overall"] or 0.0)], color="0.35")
        ax1.bar_label(bars, fmt="%.1f", fontsize=7)
        ax1.set_ylim(0, 105)
        ax1.set_ylabel("success rate [%]")
        if reasons:
            ax2.barh(reasons, [doc["failures"][k] for k in reasons], color="tab:red")
        ax2.set_xlabel("failures")
        ax2.set_title(f"{doc['count']} records", fontsize=8)
        _save(fig, path)


def plot_sample_efficiency(fractions: Sequence[float], rates: Sequence[float], path="sample_efficiency.png",
                           baseline: Optional[float] = None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(100 * np.asarray(fractions), 100 * np.asarray(rates), marker="o", color="k", label="adapted")
        if baseline is not None:
            ax.axhline(100 * baseline, ls="--", color="0.5", label="untrained")
        ax.set_xlabel("training data [%]")
        ax.set_ylabel("success rate [%]")
        ax.set_ylim(0, 105)
        ax.legend(frameon=False)
        _save(fig, path)
