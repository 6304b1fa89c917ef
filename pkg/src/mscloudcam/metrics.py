"""Confusion-matrix evaluation: per-class IoU / F1 / accuracy, macro means,
and micro (pixel) accuracy, with ignore-index semantics.
"""
from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, Tuple

import numpy as np

from .errors import DataError, ShapeError

CLASS_NAMES = ("Clear", "Thick", "Thin", "Shadow")
DEFAULT_IGNORE = 255


class ConfusionMatrix:
    """counts[t][p] = number of valid pixels with true class t predicted p.

    64-bit counters; accumulation is order-independent and mergeable, so
    per-worker matrices can be summed entrywise.
    """

    def __init__(self, num_classes: int = 4):
        if num_classes < 2:
            raise ShapeError("confusion matrix: need at least 2 classes")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, truth: np.ndarray,
                   ignore: int = DEFAULT_IGNORE) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"accumulate: pred {pred.shape} vs truth {truth.shape}")
        k = self.num_classes
        bad_pred = (pred < 0) | (pred >= k)
        if bad_pred.any():
            at = tuple(int(v) for v in np.argwhere(bad_pred)[0])
            raise DataError(f"accumulate: prediction {int(pred[at])} out of range "
                            f"0..{k - 1} at pixel {at} ({int(bad_pred.sum())} total)")
        valid = truth != ignore
        bad_truth = valid & ((truth < 0) | (truth >= k))
        if bad_truth.any():
            at = tuple(int(v) for v in np.argwhere(bad_truth)[0])
            raise DataError(f"accumulate: label {int(truth[at])} out of range "
                            f"0..{k - 1} at pixel {at} ({int(bad_truth.sum())} total)")
        flat = truth[valid].astype(np.int64) * k + pred[valid].astype(np.int64)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("merge: class count mismatch")
        self.counts += other.counts
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def report(self) -> "MetricsReport":
        return report_from_matrix(self)


@dataclass
class MetricsReport:
    """Per-class and aggregate metrics as fractions in [0, 1]. A class with
    TP+FP+FN = 0 is flagged absent and contributes 0 to the IoU/F1 macro
    means rather than being dropped."""

    iou: np.ndarray
    f1: np.ndarray
    acc: np.ndarray
    miou: float
    mf1: float
    macc: float
    aacc: float
    absent: Tuple[bool, ...]


def report_from_matrix(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise DataError("metrics report: confusion matrix is empty (0 valid pixels)")
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = float(total) - tp - fp - fn
    union = tp + fp + fn
    absent = union == 0
    safe_union = np.where(absent, 1.0, union)
    iou = np.where(absent, 0.0, tp / safe_union)
    f1_den = np.where(absent, 1.0, 2 * tp + fp + fn)
    f1 = np.where(absent, 0.0, 2 * tp / f1_den)
    acc = (tp + tn) / float(total)
    return MetricsReport(
        iou=iou, f1=f1, acc=acc,
        miou=float(iou.mean()), mf1=float(f1.mean()), macc=float(acc.mean()),
        aacc=float(tp.sum() / total),
        absent=tuple(bool(a) for a in absent),
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def format_pct(x: float) -> str:
    """Percentage with two decimals, half-up: round(x*10000)/100."""
    q = (Decimal(repr(float(x))) * 10000).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return f"{q / 100:.2f}"


def emit_table(reports: Dict[str, MetricsReport]) -> str:
    """Fixed-width table: per-class IoU / F1 / Accuracy plus macro means and
    overall accuracy, percentages with two decimals."""
    if not reports:
        raise DataError("emit_table: no reports to render")
    groups = (("IoU", "iou", "miou"), ("F1", "f1", "mf1"), ("Accuracy", "acc", "macc"))
    header_cells = []
    for gname, _, _ in groups:
        header_cells.extend(f"{gname}:{c}" for c in CLASS_NAMES)
        header_cells.append(f"{gname}:mean")
    header_cells.append("aAcc")
    name_w = max(len("Model/Dataset"), *(len(n) for n in reports))
    lines = ["Model/Dataset".ljust(name_w) + " | " + " ".join(f"{c:>12}" for c in header_cells)]
    for name, rep in reports.items():
        cells = []
        for _, attr, mean_attr in groups:
            vals = getattr(rep, attr)
            cells.extend(format_pct(v) for v in vals)
            cells.append(format_pct(getattr(rep, mean_attr)))
        cells.append(format_pct(rep.aacc))
        lines.append(name.ljust(name_w) + " | " + " ".join(f"{c:>12}" for c in cells))
        flagged = [CLASS_NAMES[i] for i, a in enumerate(rep.absent) if a]
        if flagged:
            lines.append(f"{'':{name_w}} | absent classes (metrics fixed at 0): "
                         + ", ".join(flagged))
    return "\n".join(lines)


def csv_rows(reports: Dict[str, MetricsReport]) -> Iterable[str]:
    """CSV: one row per report, columns matching the table layout."""
    cols = ["name"]
    for g in ("iou", "f1", "acc"):
        cols.extend(f"{g}_{c.lower()}" for c in CLASS_NAMES)
        cols.append(f"m{g}")
    cols.append("aacc")
    yield ",".join(cols)
    for name, rep in reports.items():
        cells = [name]
        for attr, mean_attr in (("iou", "miou"), ("f1", "mf1"), ("acc", "macc")):
            cells.extend(format_pct(v) for v in getattr(rep, attr))
            cells.append(format_pct(getattr(rep, mean_attr)))
        cells.append(format_pct(rep.aacc))
        yield ",".join(cells)
