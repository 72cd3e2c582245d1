"""Decoding logits into blur labels, N-1/N-3 accuracy and blur-map images."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deconv import DI_SENTINEL, PAD_SENTINEL
from .errors import DataError
from .optics import label_set

__all__ = [
    "PredictionMap",
    "MetricsReport",
    "decode",
    "metrics",
    "crop_border",
    "render_blur_map",
]


@dataclass(frozen=True)
class PredictionMap:
    labels: np.ndarray
    slice_index: np.ndarray


@dataclass
class MetricsReport:
    n1: float
    n3: float
    pixels: int
    label_order: tuple
    confusion: np.ndarray = field(repr=False)
    border: int = 0

    def as_text(self) -> str:
        lines = [
            f"pixels   {self.pixels:>10d}",
            f"border   {self.border:>10d}",
            f"N-1      {self.n1:>9.2f}%",
            f"N-3      {self.n3:>9.2f}%",
            "",
            "confusion (rows: ground truth, cols: prediction)",
            "      " + "".join(f"{lab:>7d}" for lab in self.label_order),
        ]
        for lab, row in zip(self.label_order, self.confusion):
            lines.append(f"{lab:>6d}" + "".join(f"{c:>7d}" for c in row))
        return "\n".join(lines)

    def as_keyvalue(self) -> str:
        return "\n".join([
            f"n1={self.n1:.6f}",
            f"n3={self.n3:.6f}",
            f"pixels={self.pixels}",
            f"border={self.border}",
            "labels=" + ",".join(str(v) for v in self.label_order),
        ]) + "\n"


def decode(logits, slice_labels) -> PredictionMap:
    """Per-pixel argmax over non-padding slices, mapped to signed labels.

    Ties go to the lowest depth index and the defocused-image slice maps to 0.
    """
    slice_labels = np.asarray(slice_labels)
    logits = np.asarray(logits)
    if logits.shape[-1] != slice_labels.size:
        raise DataError("logit depth does not match the number of slice labels")
    masked = np.where(slice_labels == PAD_SENTINEL, -np.inf, logits)
    idx = np.argmax(masked, axis=-1)
    signed = np.where(slice_labels == DI_SENTINEL, 0, slice_labels)
    return PredictionMap(signed[idx].astype(np.int64), idx)


def crop_border(arr, border: int):
    if border <= 0:
        return arr
    return arr[border:-border, border:-border]


def metrics(pred, gt, label_order, border: int = 0) -> MetricsReport:
    """N-1 and N-3 accuracy in percent.

    A prediction counts for N-3 when it sits at most one step from the truth
    in ``label_order`` (so for the set ``..., -2, 0, +2, ...`` the neighbours
    of +2 are 0 and +3). ``border`` pixels on each side are excluded.
    """
    pred = np.asarray(getattr(pred, "labels", pred))
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    pred, gt = crop_border(pred, border), crop_border(gt, border)
    order = tuple(int(v) for v in label_order)
    lookup = np.full(256, -1, dtype=np.int64)
    for i, lab in enumerate(order):
        lookup[lab + 128] = i
    if pred.size == 0:
        raise DataError("no pixels left to score")
    if np.any(np.abs(pred) > 127) or np.any(np.abs(gt) > 127):
        raise DataError("label outside the label set")
    pi, gi = lookup[pred + 128], lookup[gt + 128]
    if np.any(pi < 0) or np.any(gi < 0):
        raise DataError("label outside the label set")
    n = pred.size
    n1 = 100.0 * np.count_nonzero(pi == gi) / n
    n3 = 100.0 * np.count_nonzero(np.abs(pi - gi) <= 1) / n
    confusion = np.zeros((len(order), len(order)), dtype=np.int64)
    np.add.at(confusion, (gi.ravel(), pi.ravel()), 1)
    return MetricsReport(n1, n3, n, order, confusion, border)


_COOL = np.array([59, 76, 192], dtype=np.float64)
_MID = np.array([221, 221, 221], dtype=np.float64)
_WARM = np.array([180, 4, 38], dtype=np.float64)


def _colors(values, max_blur):
    t = np.clip(np.asarray(values, dtype=np.float64) / max_blur, -1.0, 1.0)[..., None]
    neg = _MID + (-t) * (_COOL - _MID)
    pos = _MID + t * (_WARM - _MID)
    return np.round(np.where(t < 0, neg, pos)).astype(np.uint8)


def render_blur_map(labels, max_blur: int, legend_height: int = 8):
    """Diverging RGB rendering of a signed label map: cool in front of the
    focal plane, warm behind, grey in focus. A legend strip listing every
    label from ``-m`` to ``+m`` is appended below."""
    labels = np.asarray(labels)
    allowed = set(label_set(max_blur))
    if not set(np.unique(labels).tolist()) <= allowed:
        raise DataError("blur map holds labels outside the label set")
    image = _colors(labels, max_blur)
    if legend_height <= 0:
        return image
    order = np.array(label_set(max_blur))
    w = labels.shape[1]
    cols = order[np.minimum((np.arange(w) * order.size) // w, order.size - 1)]
    legend = np.broadcast_to(_colors(cols, max_blur), (legend_height, w, 3))
    gap = np.zeros((1, w, 3), dtype=np.uint8)
    return np.concatenate([image, gap, legend], axis=0)
