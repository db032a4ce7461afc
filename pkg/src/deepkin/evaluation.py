"""Prediction metrics: position and heading errors at fixed horizons, infeasibility
rate, and Wasserstein distances between predicted and true acceleration and
turning-rate distributions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import check_feasibility, wrap_angle
from .kinematics import KinematicParams
from .models import POSITION_ONLY_HEADS, Batch, PredictionArrays, make_batch

REPORT_COLUMNS = (
    "method",
    "l2_3s_m",
    "l2_6s_m",
    "heading_3s_deg",
    "heading_6s_deg",
    "infeasible_pct",
    "w1_accel",
    "w1_turnrate",
)
METRIC_COLUMNS = REPORT_COLUMNS[1:]
HEADING_ERROR_ASSUMPTION = "heading error is the mean absolute wrapped difference at the horizon point"


@dataclass
class MetricReport:
    method: str
    l2_3s: float
    l2_6s: float
    heading_3s: float
    heading_6s: float
    infeasible_pct: float
    w1_accel: float
    w1_turnrate: float
    n_samples: int = 0
    selection: str = "top"
    flags: list[str] = field(default_factory=list)
    pooled: dict = field(default_factory=dict, repr=False)

    def row(self) -> dict:
        return dict(zip(REPORT_COLUMNS, (self.method,) + self.values()))

    def values(self) -> tuple[float, ...]:
        return (
            self.l2_3s,
            self.l2_6s,
            self.heading_3s,
            self.heading_6s,
            self.infeasible_pct,
            self.w1_accel,
            self.w1_turnrate,
        )

    def metadata(self) -> dict:
        return {
            "method": self.method,
            "n_samples": self.n_samples,
            "selection": self.selection,
            "flags": self.flags,
            "assumptions": [HEADING_ERROR_ASSUMPTION],
        }


def wasserstein_1d(a, b) -> float:
    """Earth mover's distance between two empirical 1-D distributions.

    Integrates |F_a^-1 - F_b^-1| over the merged set of quantile breakpoints;
    for equal sizes this is the mean absolute difference of sorted samples.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    if a.size == b.size:
        return math.fsum(np.abs(a - b)) / a.size
    n, m = a.size, b.size
    # quantile breakpoints k/n and k/m, merged exactly on the integer grid of n*m
    cuts = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    widths = np.diff(cuts)
    mids = cuts[:-1]
    ia = mids // m
    ib = mids // n
    return math.fsum(widths * np.abs(a[ia] - b[ib])) / (n * m)


def horizon_index(t: float, dt: float) -> int:
    return int(round(t / dt)) - 1


def _select_modes(pred: PredictionArrays, truth: np.ndarray, min_over_n: bool) -> np.ndarray:
    if not min_over_n:
        return pred.top_index()
    err = np.linalg.norm(pred.positions - truth[:, None, :, :2], axis=-1).mean(axis=-1)
    return np.argmin(err, axis=1)


def _mean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return math.fsum(x) / x.size if x.size else math.nan


def evaluate_arrays(
    pred: PredictionArrays,
    batch: Batch,
    min_over_n: bool = False,
    averaged: bool = False,
    horizons=(3.0, 6.0),
) -> MetricReport:
    """Metrics for numeric predictions against ``batch.truth``."""
    if len(batch) == 0:
        raise ValueError("cannot evaluate an empty test set")
    truth = batch.truth
    H = truth.shape[1]
    if pred.positions.shape[2] != H:
        raise ValueError(f"prediction horizon {pred.positions.shape[2]} does not match data horizon {H}")
    sel = _select_modes(pred, truth, min_over_n)
    rows = np.arange(len(sel))
    pos = pred.positions[rows, sel]  # (B, H, 2)
    psi = pred.headings[rows, sel]
    spd = pred.speeds[rows, sel]
    pos_err = np.linalg.norm(pos - truth[:, :, :2], axis=-1)
    head_err = np.degrees(np.abs(wrap_angle(psi - truth[:, :, 2])))
    flags = []
    l2, hd = [], []
    for t in horizons:
        k = horizon_index(t, pred.dt)
        if k >= H or k < 0:
            flags.append(f"horizon {t:g}s unavailable (H={H}, dt={pred.dt:g})")
            l2.append(math.nan)
            hd.append(math.nan)
            continue
        if averaged:
            l2.append(_mean(pos_err[:, : k + 1].mean(axis=1)))
            hd.append(_mean(head_err[:, : k + 1].mean(axis=1)))
        else:
            l2.append(_mean(pos_err[:, k]))
            hd.append(_mean(head_err[:, k]))
    # position-only heads have no heading channel of their own to check
    own_headings = pred.method not in POSITION_ONLY_HEADS
    infeasible = 0
    for b in range(len(sel)):
        kap = KinematicParams(batch.l_r[b], batch.l_f[b], batch.a_max[b], batch.gamma_max[b], batch.r_min[b])
        if not check_feasibility(np.column_stack([pos[b], psi[b]]) if own_headings else pos[b], kap).feasible:
            infeasible += 1
    dt = pred.dt
    acc_pred = (np.diff(spd, axis=1) / dt).ravel()
    acc_true = (np.diff(truth[:, :, 3], axis=1) / dt).ravel()
    om_pred = (wrap_angle(np.diff(psi, axis=1)) / dt).ravel()
    om_true = (wrap_angle(np.diff(truth[:, :, 2], axis=1)) / dt).ravel()
    have_rates = acc_pred.size > 0
    return MetricReport(
        method=pred.method,
        l2_3s=l2[0],
        l2_6s=l2[1],
        heading_3s=hd[0],
        heading_6s=hd[1],
        infeasible_pct=100.0 * infeasible / len(sel),
        w1_accel=wasserstein_1d(acc_pred, acc_true) if have_rates else math.nan,
        w1_turnrate=wasserstein_1d(om_pred, om_true) if have_rates else math.nan,
        n_samples=len(sel),
        selection="min_over_n" if min_over_n else "top",
        flags=flags,
        pooled={"accel_pred": acc_pred, "accel_true": acc_true, "turnrate_pred": om_pred, "turnrate_true": om_true},
    )


def evaluate(model, samples: Sequence, min_over_n: bool = False, averaged: bool = False) -> MetricReport:
    """Evaluate ``model`` (anything with ``predict_batch`` and ``config.K`` or ``K``) on ``samples``."""
    if not samples:
        raise ValueError("cannot evaluate an empty test set")
    K = model.config.K if hasattr(model, "config") else model.K
    batch = make_batch(samples, K)
    return evaluate_arrays(model.predict_batch(batch), batch, min_over_n=min_over_n, averaged=averaged)


def evaluate_by_scenario(model, samples: Sequence, **kwargs) -> list[MetricReport]:
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.scenario, []).append(s)
    out = []
    for name in sorted(groups):
        rep = evaluate(model, groups[name], **kwargs)
        rep.method = f"{rep.method}[{name}]"
        out.append(rep)
    return out


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def write_report(reports: Sequence[MetricReport], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.method] + [_fmt(v) for v in r.values()])
    meta = {"reports": [r.metadata() for r in reports]}
    with open(f"{path}.meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty report")
        missing = [c for c in REPORT_COLUMNS if c not in header]
        extra = [c for c in header if c not in REPORT_COLUMNS]
        if missing or extra:
            raise ValueError(f"{path}: column mismatch (missing {missing}, unexpected {extra})")
        rows = []
        for rec in reader:
            d = dict(zip(header, rec))
            rows.append({"method": d["method"], **{c: float(d[c]) for c in METRIC_COLUMNS}})
        return rows


@dataclass
class ComparisonTable:
    rows: list[dict]
    best: dict[str, list[int]]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(REPORT_COLUMNS) + ["best"])
            for i, r in enumerate(self.rows):
                best = ";".join(c for c in METRIC_COLUMNS if i in self.best[c])
                w.writerow([r["method"]] + [_fmt(r[c]) for c in METRIC_COLUMNS] + [best])

    def to_text(self) -> str:
        """Aligned table; best value per column marked with '*'."""
        header = list(REPORT_COLUMNS)
        body = []
        for i, r in enumerate(self.rows):
            cells = [r["method"]]
            for c in METRIC_COLUMNS:
                v = r[c]
                cell = "-" if math.isnan(v) else f"{v:.3f}"
                cells.append(cell + ("*" if i in self.best[c] else ""))
            body.append(cells)
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(str(x).rjust(w) if j else str(x).ljust(w) for j, (x, w) in enumerate(zip(line, widths))) for line in [header] + body]
        return "\n".join(lines) + "\n"


def compare(reports: Sequence) -> ComparisonTable:
    """Stack reports (MetricReport objects or CSV rows) and flag per-column minima."""
    rows = [r.row() if isinstance(r, MetricReport) else dict(r) for r in reports]
    if not rows:
        raise ValueError("nothing to compare")
    best = {}
    for c in METRIC_COLUMNS:
        vals = np.array([r[c] for r in rows], dtype=np.float64)
        if np.all(np.isnan(vals)):
            best[c] = []
            continue
        lo = np.nanmin(vals)
        best[c] = [i for i, v in enumerate(vals) if v == lo]
    return ComparisonTable(rows, best)
