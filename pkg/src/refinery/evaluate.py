"""Confusion-matrix metrics and single/multi-scale prediction."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .engine import no_grad
from .errors import LabelError, ShapeError
from .ops import IGNORE_LABEL, resize_array, softmax_array

DEFAULT_SCALES = (0.8, 1.0, 1.2)


class ConfusionMatrix:
    """``counts[i, j]`` = pixels with truth ``i`` predicted ``j``."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, truth, ignore_label: int = IGNORE_LABEL) -> "ConfusionMatrix":
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ", dim="shape")
        keep = truth != ignore_label
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        k = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= k):
            raise LabelError(f"truth label outside [0, {k})")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise LabelError(f"predicted label outside [0, {k})")
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvalReport:
    iou: np.ndarray
    class_acc: np.ndarray
    mean_iou: float
    pixel_acc: float
    mean_acc: float
    empty_classes: List[int] = field(default_factory=list)
    scored_pixels: int = 0
    empty: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,iou,acc\n")
        for k, (i, a) in enumerate(zip(self.iou, self.class_acc)):
            buf.write(f"{k},{_fmt(i)},{_fmt(a)}\n")
        buf.write(f"mean_iou,{_fmt(self.mean_iou)}\n")
        buf.write(f"pixel_acc,{_fmt(self.pixel_acc)}\n")
        buf.write(f"mean_acc,{_fmt(self.mean_acc)}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        if self.empty:
            return "EMPTY REPORT: no scored pixels\n"
        lines = [f"{'class':>5}  {'IoU':>7}  {'acc':>7}"]
        for k, (i, a) in enumerate(zip(self.iou, self.class_acc)):
            lines.append(f"{k:>5}  {_fmt(i):>7}  {_fmt(a):>7}")
        lines.append(f"mean IoU   {_fmt(self.mean_iou)}")
        lines.append(f"pixel acc  {_fmt(self.pixel_acc)}")
        lines.append(f"mean acc   {_fmt(self.mean_acc)}")
        if self.empty_classes:
            lines.append(f"classes absent from ground truth: {self.empty_classes}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "nan" if v is None or np.isnan(v) else f"{v:.4f}"


def report(cm: ConfusionMatrix) -> EvalReport:
    """Per-class IoU, mean IoU, pixel accuracy and mean accuracy.

    Classes whose ground-truth row is empty get NaN and are excluded from
    both means. Zero scored pixels yields a report with ``empty=True``.
    """
    m = cm.counts.astype(np.float64)
    k = cm.num_classes
    if cm.total == 0:
        nan = np.full(k, np.nan)
        return EvalReport(nan, nan, float("nan"), float("nan"), float("nan"),
                          list(range(k)), 0, empty=True)
    diag = np.diag(m)
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    present = rows > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, diag / (rows + cols - diag), np.nan)
        acc = np.where(present, diag / rows, np.nan)
    return EvalReport(
        iou=iou,
        class_acc=acc,
        mean_iou=float(iou[present].mean()),
        pixel_acc=float(diag.sum() / m.sum()),
        mean_acc=float(acc[present].mean()),
        empty_classes=[int(c) for c in np.nonzero(~present)[0]],
        scored_pixels=cm.total,
    )


# ---------------------------------------------------------------- prediction


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over axis 1; ties resolve to the lowest class."""
    return probs.argmax(axis=1).astype(np.uint8)


def predict_probs(model, images: np.ndarray) -> np.ndarray:
    with no_grad():
        scores = model(images)
    return softmax_array(scores.data.astype(np.float64))


def predict(model, images: np.ndarray) -> np.ndarray:
    return argmax_labels(predict_probs(model, images))


def average_probs(prob_maps: Sequence[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack(prob_maps), axis=0)


def multiscale_probs(model, images: np.ndarray, scales: Sequence[float] = DEFAULT_SCALES) -> np.ndarray:
    """Average of softmax maps predicted at each rescaled copy, each resized
    back to the input size."""
    if not scales or min(scales) <= 0:
        raise ValueError("scales must be a non-empty list of positive factors")
    images = np.asarray(images)
    h, w = images.shape[2:]
    maps = []
    for s in scales:
        sh, sw = max(1, round(h * s)), max(1, round(w * s))
        scaled = images if (sh, sw) == (h, w) else resize_array(images, sh, sw)
        p = predict_probs(model, scaled)
        maps.append(p if (sh, sw) == (h, w) else resize_array(p, h, w))
    return average_probs(maps)


def multiscale_predict(model, images: np.ndarray, scales: Sequence[float] = DEFAULT_SCALES) -> np.ndarray:
    return argmax_labels(multiscale_probs(model, images, scales))


def evaluate(model, samples, num_classes: int, scales: Optional[Sequence[float]] = None,
             batch_size: int = 16) -> ConfusionMatrix:
    """Confusion matrix over ``samples`` (single-scale when ``scales`` is None)."""
    cm = ConfusionMatrix(num_classes)
    by_size = {}
    for s in samples:
        by_size.setdefault(s.size, []).append(s)
    for group in by_size.values():
        for i in range(0, len(group), batch_size):
            chunk = group[i:i + batch_size]
            images = np.stack([s.image for s in chunk])
            if scales is None:
                pred = predict(model, images)
            else:
                pred = multiscale_predict(model, images, scales)
            for p, s in zip(pred, chunk):
                cm.accumulate(p, s.mask)
    return cm
