"""Segmentation metrics: overlap scores from confusion counts plus
boundary distances (95th-percentile Hausdorff and average surface
distance), per-image IoU, and whole-test-set evaluation.

Conventions for degenerate masks (documented, applied consistently):

* both masks empty: dice/iou/precision/sensitivity = 1, hd95 = asd = 0
* exactly one mask empty: overlap scores follow the raw counts (dice 0);
  hd95/asd take the image diagonal as a finite worst-case sentinel
* any 0/0 ratio resolves to 1 when the relevant error count is zero,
  else 0

Boundary pixels are foreground pixels with at least one background
4-neighbor; the image border counts as background. Percentiles use
linear interpolation over the sorted directed distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .data import resize_pair


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricRow:
    dice: float
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    hd95: float
    asd: float
    iou: float = float("nan")
    case_id: str = ""
    slice_index: int = -1

    FIELDS = ("dice", "accuracy", "precision", "sensitivity", "specificity",
              "hd95", "asd", "iou")


def confusion(pred: np.ndarray, gt: np.ndarray, class_index: int) -> ConfusionCounts:
    """One-vs-rest pixel counts for one class on one image."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred == class_index
    g = gt == class_index
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int, errors: int) -> float:
    if den == 0:
        return 1.0 if errors == 0 else 0.0
    return num / den


def similarity_metrics(c: ConfusionCounts):
    """(dice, accuracy, precision, sensitivity, specificity) from counts."""
    if c.total <= 0:
        raise ValueError("empty confusion counts")
    dice = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.fp + c.fn)
    accuracy = (c.tp + c.tn) / c.total
    precision = _ratio(c.tp, c.tp + c.fp, c.fn)
    sensitivity = _ratio(c.tp, c.tp + c.fn, c.fp)
    specificity = _ratio(c.tn, c.tn + c.fp, 0)
    return dice, accuracy, precision, sensitivity, specificity


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(n, 2) coordinates of foreground pixels with a background 4-neighbor."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def surface_distances(pred_mask: np.ndarray, gt_mask: np.ndarray):
    """(hd95, asd) between the boundaries of two binary masks."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    p_empty, g_empty = not pred_mask.any(), not gt_mask.any()
    if p_empty and g_empty:
        return 0.0, 0.0
    if p_empty or g_empty:
        h, w = pred_mask.shape
        diag = math.sqrt((h - 1) ** 2 + (w - 1) ** 2)
        return diag, diag

    pb = boundary_pixels(pred_mask).astype(np.float64)
    gb = boundary_pixels(gt_mask).astype(np.float64)
    d_pg = cKDTree(gb).query(pb)[0]
    d_gp = cKDTree(pb).query(gb)[0]
    hd95 = max(float(np.percentile(d_pg, 95)), float(np.percentile(d_gp, 95)))
    asd = float(np.mean(np.concatenate([d_pg, d_gp])))
    return hd95, asd


def per_image_iou(pred: np.ndarray, gt: np.ndarray, classes: int | None = None) -> float:
    """Mean over foreground classes of tp / (tp + fp + fn)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if classes is None:
        classes = int(max(pred.max(), gt.max())) + 1
    vals = []
    for cls in range(1, classes):
        c = confusion(pred, gt, cls)
        vals.append(_ratio(c.tp, c.tp + c.fp + c.fn, c.fp + c.fn))
    return float(np.mean(vals)) if vals else 1.0


def image_metrics(pred: np.ndarray, gt: np.ndarray, classes: int) -> MetricRow:
    """Metrics for one image, averaged over foreground classes."""
    per_class = []
    for cls in range(1, classes):
        c = confusion(pred, gt, cls)
        dice, acc, pre, sen, spe = similarity_metrics(c)
        hd95, asd = surface_distances(pred == cls, gt == cls)
        per_class.append((dice, acc, pre, sen, spe, hd95, asd))
    means = np.mean(per_class, axis=0)
    return MetricRow(*[float(v) for v in means],
                     iou=per_image_iou(pred, gt, classes))


def aggregate_rows(rows) -> MetricRow:
    vals = {f: float(np.mean([getattr(r, f) for r in rows])) for f in MetricRow.FIELDS}
    return MetricRow(**vals, case_id="aggregate")


def predict_mask(network: torch.nn.Module, image: np.ndarray) -> np.ndarray:
    """Argmax prediction for one image at the network's input size."""
    size = network.spec.input_size
    resized, _ = resize_pair(image, None, target=size)
    x = torch.from_numpy(np.ascontiguousarray(resized)).float().view(1, 1, size, size)
    with torch.no_grad():
        logits, _ = network(x)
    return logits.argmax(dim=1)[0].numpy()


def evaluate_testset(network: torch.nn.Module, samples):
    """Per-image metric rows plus their aggregate for a labelled test set."""
    if not samples:
        raise ValueError("empty test set")
    network.eval()
    classes = network.spec.classes
    size = network.spec.input_size
    rows = []
    for s in samples:
        if s.mask is None:
            raise ValueError(f"test sample {s.case_id}/{s.slice_index} has no mask")
        _, gt = resize_pair(s.image, s.mask, target=size)
        pred = predict_mask(network, s.image)
        row = image_metrics(pred, gt, classes)
        row.case_id = s.case_id
        row.slice_index = s.slice_index
        rows.append(row)
    return rows, aggregate_rows(rows)
