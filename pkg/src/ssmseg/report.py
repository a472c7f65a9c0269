"""Report emission: delimited metric tables, per-image IoU histogram
data, Dice box-plot statistics, and optional rendered figures.

CSV layouts (column names are fixed):

* ``metrics.csv``: image_id, case_id, slice_index, dice, accuracy,
  precision, sensitivity, specificity, hd95, asd, iou. The first row is
  the aggregate (image_id ``aggregate``, slice_index blank).
* ``iou_histogram.csv``: bin_lo, bin_hi, count. Bins partition [0, 1];
  the top bin includes 1.0.
* ``dice_boxplot.csv``: min, q1, median, q3, max. Quartiles are Tukey
  hinges (medians of the lower/upper halves, the overall median included
  in both halves when the count is odd).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .metrics import MetricRow, aggregate_rows  # noqa: E402

METRICS_COLUMNS = ("image_id", "case_id", "slice_index") + MetricRow.FIELDS
DEFAULT_BINS = 10


def iou_histogram(ious, bins: int = DEFAULT_BINS):
    """(bin_lo, bin_hi, count) triples over [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.asarray(ious, dtype=np.float64), bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def boxplot_stats(values) -> dict:
    """Five-number summary with Tukey-hinge quartiles."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values to summarize")
    n = v.size
    half = n // 2
    lower = v[:half + (n % 2)]
    upper = v[half:]
    return {"min": float(v[0]), "q1": float(np.median(lower)),
            "median": float(np.median(v)), "q3": float(np.median(upper)),
            "max": float(v[-1])}


def _fmt(x) -> str:
    return f"{x:.6f}"


def write_metrics_csv(rows, aggregate: MetricRow, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        w.writerow(["aggregate", aggregate.case_id, ""]
                   + [_fmt(getattr(aggregate, f)) for f in MetricRow.FIELDS])
        for i, r in enumerate(rows):
            w.writerow([f"img_{i:04d}", r.case_id, r.slice_index]
                       + [_fmt(getattr(r, f)) for f in MetricRow.FIELDS])


def read_metrics_csv(path):
    """Parse a metrics.csv back into (rows, aggregate)."""
    rows, aggregate = [], None
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = {f: float(rec[f]) for f in MetricRow.FIELDS}
            row = MetricRow(**vals, case_id=rec["case_id"],
                            slice_index=int(rec["slice_index"] or -1))
            if rec["image_id"] == "aggregate":
                aggregate = row
            else:
                rows.append(row)
    if aggregate is None:
        aggregate = aggregate_rows(rows)
    return rows, aggregate


def emit_report(rows, out_dir, formats=("csv", "png"), aggregate=None) -> list:
    """Write report files for per-image metric rows; returns written paths."""
    if not rows:
        raise ValueError("no metric rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if aggregate is None:
        aggregate = aggregate_rows(rows)
    written = []

    if "csv" in formats:
        metrics_path = out / "metrics.csv"
        write_metrics_csv(rows, aggregate, metrics_path)
        written.append(metrics_path)

        hist = iou_histogram([r.iou for r in rows])
        hist_path = out / "iou_histogram.csv"
        with open(hist_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, n in hist:
                w.writerow([_fmt(lo), _fmt(hi), n])
        written.append(hist_path)

        stats = boxplot_stats([r.dice for r in rows])
        box_path = out / "dice_boxplot.csv"
        with open(box_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["min", "q1", "median", "q3", "max"])
            w.writerow([_fmt(stats[k]) for k in ("min", "q1", "median", "q3", "max")])
        written.append(box_path)

    if "png" in formats:
        hist = iou_histogram([r.iou for r in rows])
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar([lo for lo, _, _ in hist], [n for _, _, n in hist],
               width=1.0 / len(hist), align="edge", edgecolor="black")
        ax.set_xlabel("IoU")
        ax.set_ylabel("images")
        ax.set_xlim(0, 1)
        fig.tight_layout()
        hist_png = out / "iou_histogram.png"
        fig.savefig(hist_png)
        plt.close(fig)
        written.append(hist_png)

        stats = boxplot_stats([r.dice for r in rows])
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        ax.bxp([{"med": stats["median"], "q1": stats["q1"], "q3": stats["q3"],
                 "whislo": stats["min"], "whishi": stats["max"], "fliers": []}],
               showfliers=False)
        ax.set_ylabel("Dice")
        ax.set_xticklabels(["test set"])
        fig.tight_layout()
        box_png = out / "dice_boxplot.png"
        fig.savefig(box_png)
        plt.close(fig)
        written.append(box_png)

    return written
