"""Figures written next to the delimited outputs of the CLI.

Everything renders through the non-interactive Agg backend, so no display is
needed. Each figure also has a CSV twin holding the plotted numbers.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import METRIC_COLUMNS, MetricReport, wasserstein_1d  # noqa: E402

# PNG metadata without the matplotlib version keeps files stable across installs
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}

DISTRIBUTIONS = {
    "accel": ("accel_pred", "accel_true", "acceleration [m/s$^2$]"),
    "turnrate": ("turnrate_pred", "turnrate_true", "turning rate [rad/s]"),
}


def _bins(pred: np.ndarray, true: np.ndarray, n: int = 60) -> np.ndarray:
    both = np.concatenate([pred, true])
    lo, hi = float(both.min()), float(both.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, n + 1)


def distribution_histograms(report: MetricReport, n_bins: int = 60) -> dict[str, dict]:
    """Histogram counts of predicted and true rates, keyed by quantity."""
    out = {}
    for key, (p_key, t_key, label) in DISTRIBUTIONS.items():
        pred = np.asarray(report.pooled.get(p_key, ()), dtype=np.float64)
        true = np.asarray(report.pooled.get(t_key, ()), dtype=np.float64)
        if pred.size == 0 or true.size == 0:
            continue
        edges = _bins(pred, true, n_bins)
        out[key] = {
            "edges": edges,
            "pred": np.histogram(pred, edges)[0],
            "true": np.histogram(true, edges)[0],
            "w1": wasserstein_1d(pred, true),
            "label": label,
        }
    return out


def write_histogram_csv(hists: dict[str, dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "bin_lo", "bin_hi", "pred_count", "true_count"])
        for key, h in hists.items():
            e = h["edges"]
            for i in range(len(e) - 1):
                w.writerow([key, repr(float(e[i])), repr(float(e[i + 1])), int(h["pred"][i]), int(h["true"][i])])


def plot_distributions(report: MetricReport, stem) -> list[Path]:
    """Log-scale histograms of predicted vs. true acceleration and turning rate.

    Writes ``<stem>.<quantity>.png`` per quantity plus ``<stem>.hist.csv``;
    returns the written paths.
    """
    stem = Path(stem)
    hists = distribution_histograms(report)
    written = []
    for key, h in hists.items():
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        centers = 0.5 * (h["edges"][:-1] + h["edges"][1:])
        width = np.diff(h["edges"])
        ax.bar(centers, h["true"], width=width, color="0.75", label="ground truth")
        ax.step(centers, h["pred"], where="mid", color="C3", lw=1.4, label=report.method)
        ax.set_yscale("log")
        ax.set_xlabel(h["label"])
        ax.set_ylabel("count")
        ax.set_title(f"{report.method}: W1 = {h['w1']:.4f}")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        path = stem.with_name(f"{stem.name}.{key}.png")
        fig.savefig(path, **_SAVE_KW)
        plt.close(fig)
        written.append(path)
    if hists:
        csv_path = stem.with_name(f"{stem.name}.hist.csv")
        write_histogram_csv(hists, csv_path)
        written.append(csv_path)
    return written


def plot_comparison(rows: Sequence[dict], path, columns: Sequence[str] = METRIC_COLUMNS[:5]) -> Path:
    """Grouped bars, one panel per metric column."""
    path = Path(path)
    methods = [r["method"] for r in rows]
    fig, axes = plt.subplots(1, len(columns), figsize=(2.6 * len(columns), 3.2), squeeze=False)
    for ax, col in zip(axes[0], columns):
        vals = [r[col] for r in rows]
        shown = [0.0 if math.isnan(v) else v for v in vals]
        ax.bar(range(len(rows)), shown, color=[f"C{i % 10}" for i in range(len(rows))])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(methods, rotation=45, ha="right", fontsize=7)
        ax.set_title(col, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_training_curve(log: Sequence[dict], path) -> Path:
    """Training loss per iteration, with validation l2@6s on a twin axis when logged."""
    path = Path(path)
    it = np.array([r["iteration"] for r in log])
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(it, [r["loss_total"] for r in log], color="C0", lw=0.6, label="train loss")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    val = [(r["iteration"], r["val_l2_6s"]) for r in log if r.get("val_l2_6s") is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="C3", ms=3, lw=1.0)
        ax2.set_ylabel("val l2@6s [m]", color="C3")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_rollout(states: np.ndarray, path, initial=(0.0, 0.0)) -> Path:
    """Top-down view of a rolled-out path (equal axis scaling)."""
    path = Path(path)
    xy = np.vstack([np.asarray(initial, dtype=np.float64).reshape(1, 2), np.asarray(states)[:, :2]])
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.plot(xy[:, 0], xy[:, 1], "-", color="C0", lw=1.2)
    ax.plot(xy[0, 0], xy[0, 1], "o", color="k", ms=4)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
