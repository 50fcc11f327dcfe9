"""Axis-aligned box arithmetic.

Boxes use corner format ``(x1, y1, x2, y2)`` in pixel coordinates. The scalar
functions operate on :class:`Box` values; the ``pairwise_*`` and ``*_arrays``
helpers are the vectorised forms used by the assigners and the evaluator.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> "Point":
        return Point((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2


class Point(NamedTuple):
    x: float
    y: float


class LTRB(NamedTuple):
    left: float
    top: float
    right: float
    bottom: float


def area(b: Box) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def _intersection(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter = _intersection(a, b)
    union = area(a) + area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the share of the enclosing box not covered by the union."""
    inter = _intersection(a, b)
    union = area(a) + area(b) - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if union <= 0:
        # both boxes degenerate: IoU term and penalty term are both taken as 0
        return 0.0
    value = inter / union
    if enclose > 0:
        value -= (enclose - union) / enclose
    return value


def ltrb_encode(p: Point, b: Box) -> LTRB:
    return LTRB(p.x - b.x1, p.y - b.y1, b.x2 - p.x, b.y2 - p.y)


def ltrb_decode(p: Point, d: LTRB) -> Box:
    l, t, r, btm = (max(v, 0.0) for v in d)
    return Box(p.x - l, p.y - t, p.x + r, p.y + btm)


def centerness_target(p: Point, b: Box) -> float:
    """FCOS center-ness of location ``p`` inside ``b``.

    Raises ValueError if ``p`` is not strictly inside the box.
    """
    l, t, r, btm = ltrb_encode(p, b)
    if min(l, t, r, btm) <= 0:
        raise ValueError(f"point {tuple(p)} is not strictly inside box {tuple(b)}")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, btm) / max(t, btm)))


# ---------------------------------------------------------------------------
# vectorised forms, boxes as (..., 4) float arrays
# ---------------------------------------------------------------------------


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclose = ewh[..., 0] * ewh[..., 1]
    iou_ = np.zeros_like(inter)
    np.divide(inter, union, out=iou_, where=union > 0)
    penalty = np.zeros_like(inter)
    np.divide(enclose - union, enclose, out=penalty, where=(enclose > 0) & (union > 0))
    return iou_ - penalty


def ltrb_encode_arrays(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Distances from each point to each box, shape (P, G, 4)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    px = points[:, None, 0]
    py = points[:, None, 1]
    return np.stack(
        [px - boxes[None, :, 0], py - boxes[None, :, 1], boxes[None, :, 2] - px, boxes[None, :, 3] - py],
        axis=-1,
    )


def ltrb_decode_arrays(points: np.ndarray, ltrb: np.ndarray) -> np.ndarray:
    """Element-wise decode; ``points`` (..., 2), ``ltrb`` (..., 4)."""
    points = np.asarray(points, dtype=np.float64)
    d = np.clip(np.asarray(ltrb, dtype=np.float64), 0.0, None)
    return np.stack(
        [points[..., 0] - d[..., 0], points[..., 1] - d[..., 1], points[..., 0] + d[..., 2], points[..., 1] + d[..., 3]],
        axis=-1,
    )


def centerness_arrays(ltrb: np.ndarray) -> np.ndarray:
    """Center-ness for rows of strictly positive LTRB distances."""
    ltrb = np.asarray(ltrb, dtype=np.float64)
    lr = ltrb[..., [0, 2]]
    tb = ltrb[..., [1, 3]]
    return np.sqrt((lr.min(-1) / lr.max(-1)) * (tb.min(-1) / tb.max(-1)))
