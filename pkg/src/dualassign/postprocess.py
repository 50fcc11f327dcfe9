"""Inference-time selection: NMS-free top-k and classical greedy NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, pairwise_iou

DEFAULT_TOPK = 100
DEFAULT_NMS_IOU = 0.6


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def select_topk(
    cls_logits: np.ndarray,
    boxes: np.ndarray,
    k: int = DEFAULT_TOPK,
    score_floor: float = 0.0,
    score_mode: str = "cls",
    ctr_logits: np.ndarray | None = None,
) -> list[Detection]:
    """Top-k (location, class) pairs of one image, highest score first.

    ``cls_logits`` is (P, K) and ``boxes`` (P, 4). With ``score_mode =
    "cls_times_ctr"`` class probabilities are multiplied by the sigmoid of
    ``ctr_logits`` (P,). Nothing is suppressed; equal scores keep flattened
    (location, class) order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = _sigmoid(np.asarray(cls_logits, dtype=np.float64))
    if score_mode == "cls_times_ctr":
        if ctr_logits is None:
            raise ValueError("cls_times_ctr needs center-ness logits")
        scores = scores * _sigmoid(np.asarray(ctr_logits, dtype=np.float64)).reshape(-1, 1)
    elif score_mode != "cls":
        raise ValueError(f"unknown score_mode {score_mode!r}")
    n_cls = scores.shape[1]
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    order = order[flat[order] > score_floor][:k]
    boxes = np.asarray(boxes, dtype=np.float64)
    return [Detection(Box(*boxes[i // n_cls].tolist()), float(flat[i]), int(i % n_cls)) for i in order]


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU, class_aware: bool = True) -> list[Detection]:
    """Greedy NMS; suppresses overlaps with IoU strictly above the threshold.

    Output is ordered by descending score, ties by input order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    overlaps = pairwise_iou(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        hit = overlaps[i] > iou_threshold
        if class_aware:
            hit &= classes == classes[i]
        alive &= ~hit
    return [dets[i] for i in keep]
