"""Confusion-matrix based segmentation metrics (acc, mIoU, the aquatic-subset
restrictions A-acc / A-mIoU) and support-weighted precision/recall/F1 for
patch classification.

Conventions: ignore handling is GT-sided (pixels whose ground truth equals
the ignore id never enter any count); classes with an empty union are
dropped from the mIoU mean; the subset accuracy denominator is the number of
pixels whose GT lies in the subset.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyScope, IdOutOfRange, LengthMismatch, ShapeMismatch


class ConfusionMatrix:
    """K x K pixel tally, counts[gt, pred]. Additive: accumulation order-free,
    per-image matrices merge by +."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored_pixels = 0

    def copy(self) -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts.copy()
        out.ignored_pixels = self.ignored_pixels
        return out

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeMismatch("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        self.ignored_pixels += other.ignored_pixels
        return self

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum()) + self.ignored_pixels


def accumulate(cm: ConfusionMatrix, pred_mask, gt_mask, ignore_id: int) -> ConfusionMatrix:
    """Add one (pred, gt) mask pair into ``cm``. GT pixels equal to
    ``ignore_id`` only bump the ignored counter."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred shape {pred.shape} != gt shape {gt.shape}")
    pred = pred.reshape(-1).astype(np.int64)
    gt = gt.reshape(-1).astype(np.int64)
    k = cm.num_classes
    valid = gt != ignore_id
    if pred.size and (pred.min() < 0 or pred.max() >= k):
        raise IdOutOfRange(f"pred ids outside 0..{k - 1}")
    gv = gt[valid]
    if gv.size and (gv.min() < 0 or gv.max() >= k):
        raise IdOutOfRange(f"gt ids outside 0..{k - 1} (ignore_id={ignore_id})")
    cm.ignored_pixels += int((~valid).sum())
    if gv.size:
        flat = gv * k + pred[valid]
        cm.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
    return cm


def _subset_indices(cm: ConfusionMatrix, class_subset: Optional[Iterable[int]]) -> np.ndarray:
    if class_subset is None:
        return np.arange(cm.num_classes)
    idx = np.asarray(sorted(set(int(c) for c in class_subset)), dtype=np.int64)
    if idx.size == 0:
        raise EmptyScope("empty class subset")
    if idx.min() < 0 or idx.max() >= cm.num_classes:
        raise IdOutOfRange(f"subset ids outside 0..{cm.num_classes - 1}")
    return idx


def pixel_acc(cm: ConfusionMatrix, class_subset: Optional[Iterable[int]] = None) -> float:
    """Fraction of correctly predicted pixels among pixels whose GT lies in
    the subset (all classes when subset is None)."""
    idx = _subset_indices(cm, class_subset)
    total = cm.counts[idx, :].sum()
    if total == 0:
        raise EmptyScope("no counted pixels with GT in the requested scope")
    correct = cm.counts[idx, idx].sum()
    return float(correct / total)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the union is empty (class absent from both
    GT and predictions)."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - np.diag(cm.counts)
    fn = cm.counts.sum(axis=1) - np.diag(cm.counts)
    union = tp + fp + fn
    iou = np.full(cm.num_classes, np.nan)
    nz = union > 0
    iou[nz] = tp[nz] / union[nz]
    return iou


def miou(cm: ConfusionMatrix, class_subset: Optional[Iterable[int]] = None) -> float:
    """Mean IoU over subset classes with a nonzero union.

    Computed in exact rational arithmetic from the integer tallies and
    rounded once, so small hand-checkable cases come out bit-exact."""
    idx = _subset_indices(cm, class_subset)
    tp = np.diag(cm.counts)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    ious = [Fraction(int(tp[c]), int(union[c])) for c in idx if union[c] > 0]
    if not ious:
        raise EmptyScope("no class in scope has a nonzero union")
    return float(sum(ious) / len(ious))


def weighted_prf(
    labels_true: Sequence[int], labels_pred: Sequence[int], num_classes: int
) -> tuple[float, float, float]:
    """Support-weighted precision / recall / F1 over class labels.

    Per-class values use the zero-division -> 0 convention; weights are the
    class supports in ``labels_true``.
    """
    t = np.asarray(labels_true, dtype=np.int64)
    p = np.asarray(labels_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.shape[0]} true labels vs {p.shape[0]} predicted")
    if t.size == 0:
        raise LengthMismatch("empty label lists")
    if t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise IdOutOfRange(f"labels outside 0..{num_classes - 1}")
    cm = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    cm = cm.reshape(num_classes, num_classes).astype(np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        rec = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    w = support / support.sum()
    return float((w * prec).sum()), float((w * rec).sum()), float((w * f1).sum())


def segmentation_report(cm: ConfusionMatrix, taxonomy) -> "MetricsReport":
    """Assemble acc / mIoU, the aquatic restrictions and per-class IoU from an
    accumulated confusion matrix. Aquatic values are None when the matrix
    holds no aquatic-GT pixels."""
    aquatic = taxonomy.aquatic_ids()
    iou = per_class_iou(cm)
    try:
        a_acc = pixel_acc(cm, aquatic) if aquatic else None
        a_miou = miou(cm, aquatic) if aquatic else None
    except EmptyScope:
        a_acc, a_miou = None, None
    per_class = {
        c.name: (None if np.isnan(iou[c.id]) else float(iou[c.id]))
        for c in taxonomy.classes
    }
    return MetricsReport(
        acc=pixel_acc(cm),
        miou=miou(cm),
        aquatic_acc=a_acc,
        aquatic_miou=a_miou,
        per_class_iou=per_class,
        ignored_pixels=cm.ignored_pixels,
        total_pixels=cm.total_pixels,
    )


@dataclass
class MetricsReport:
    """Evaluation summary. Values are fractions in [0,1]; rendered tables
    show percentages."""

    acc: float
    miou: float
    aquatic_acc: Optional[float]
    aquatic_miou: Optional[float]
    per_class_iou: dict
    ignored_pixels: int = 0
    total_pixels: int = 0

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "miou": self.miou,
            "aquatic_acc": self.aquatic_acc,
            "aquatic_miou": self.aquatic_miou,
            "per_class_iou": self.per_class_iou,
            "ignored_pixels": self.ignored_pixels,
            "total_pixels": self.total_pixels,
        }


def _fmt_pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def render_metrics_table(rows: list[tuple[str, "MetricsReport"]], taxonomy) -> str:
    """Aligned text table: one row per entry, per-aquatic-category IoU columns
    followed by A-acc, A-mIoU, acc and mIoU (all in %)."""
    aquatic_names = [c.name for c in taxonomy.classes if c.aquatic]
    header = ["variant"] + aquatic_names + ["A-acc", "A-mIoU", "acc", "mIoU"]
    body = []
    for label, rep in rows:
        cells = [label]
        cells += [_fmt_pct(rep.per_class_iou.get(n)) for n in aquatic_names]
        cells += [_fmt_pct(rep.aquatic_acc), _fmt_pct(rep.aquatic_miou),
                  _fmt_pct(rep.acc), _fmt_pct(rep.miou)]
        body.append(cells)
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i])
              for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for cells in body:
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def per_class_prf(
    labels_true: Sequence[int], labels_pred: Sequence[int], num_classes: int
) -> list[dict]:
    """Per-class precision/recall/F1/support rows backing the weighted report."""
    t = np.asarray(labels_true, dtype=np.int64)
    p = np.asarray(labels_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.shape[0]} true labels vs {p.shape[0]} predicted")
    rows = []
    for c in range(num_classes):
        tp = int(((t == c) & (p == c)).sum())
        support = int((t == c).sum())
        predicted = int((p == c).sum())
        prec = tp / predicted if predicted else 0.0
        rec = tp / support if support else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append(
            {"class_id": c, "precision": prec, "recall": rec, "f1": f1, "support": support}
        )
    return rows
