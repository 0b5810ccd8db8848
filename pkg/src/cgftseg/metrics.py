"""Per-slice overlap metrics, confidence intervals and boxplot statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import InsufficientData, InvalidInput
from .slices import check_binary

METRICS = ("dice", "sen", "spe")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred, gt) -> Confusion:
    p = check_binary(pred, "prediction")
    g = check_binary(gt, "ground truth")
    if p.shape != g.shape:
        raise InvalidInput(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    return Confusion(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num, den, empty):
    return empty if den == 0 else num / den


def dice_score(c: Confusion) -> float:
    # both masks empty counts as perfect agreement
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1.0)


def sensitivity(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fn, 1.0)


def specificity(c: Confusion) -> float:
    return _ratio(c.tn, c.tn + c.fp, 1.0)


def binarize(prob, threshold=0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def aggregate(values):
    """Mean and Student-t 95% half-width."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        raise InsufficientData(f"need at least 2 values for a confidence interval, got {n}")
    sd = v.std(ddof=1)
    return float(v.mean()), float(stats.t.ppf(0.975, n - 1) * sd / np.sqrt(n))


def boxplot_stats(values) -> dict:
    """Tukey boxplot: linear-interpolation quartiles, 1.5 IQR whiskers clipped to data."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size < 4:
        raise InsufficientData(f"boxplot needs at least 4 values, got {v.size}")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "min": float(v[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v[-1]),
        "whisker_lo": float(inside.min()),
        "whisker_hi": float(inside.max()),
        "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
    }


@dataclass
class MetricReport:
    per_slice: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    boxplot: dict = field(default_factory=dict)

    def column(self, metric):
        return [row[metric] for row in self.per_slice]

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")

    def write_per_slice_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("slice_id",) + METRICS)
            for row in self.per_slice:
                w.writerow([row["slice_id"]] + [repr(row[m]) for m in METRICS])

    def write_boxplot_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("metric", "min", "q1", "median", "q3", "max", "whisker_lo", "whisker_hi", "outliers"))
            for m, b in self.boxplot.items():
                w.writerow([m] + [repr(b[k]) for k in ("min", "q1", "median", "q3", "max", "whisker_lo", "whisker_hi")]
                           + [" ".join(repr(x) for x in b["outliers"])])


def slice_metrics(pred, gt) -> dict:
    c = confusion(pred, gt)
    return {"dice": dice_score(c), "sen": sensitivity(c), "spe": specificity(c)}


def build_report(slice_ids, preds, gts) -> MetricReport:
    report = MetricReport()
    for sid, p, g in zip(slice_ids, preds, gts):
        report.per_slice.append({"slice_id": sid, **slice_metrics(p, g)})
    n = len(report.per_slice)
    for m in METRICS:
        col = report.column(m)
        if n >= 2:
            mean, hw = aggregate(col)
            report.aggregate[m] = {"mean": mean, "ci95_half_width": hw}
        if n >= 4:
            report.boxplot[m] = boxplot_stats(col)
    return report


def read_per_slice_csv(path):
    with open(path, newline="") as fh:
        return [{"slice_id": r["slice_id"], **{m: float(r[m]) for m in METRICS}} for r in csv.DictReader(fh)]
