"""Detection losses and their weighted combinations.

The elementwise losses accept either plain numbers (returning floats) or
:class:`~dualassign.autodiff.Tensor` inputs (returning tensors that stay in the
gradient graph). Branch losses normalise every term by the image's positive
count (at least 1) and average over the batch.

Default weights are the customary ones of the underlying detectors: the
one-to-one branch uses (cls, reg, iou) = (2, 5, 2), the one-to-many branch uses
(1, 1, 1), focal loss uses alpha 0.25 and gamma 2.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .assignment import IGNORED, AssignmentResult
from .autodiff import Tensor
from .geometry import Box, giou
from .scenegen import GroundTruth

PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_o2o: float = 1.0
    lambda_o2m: float = 1.0
    alpha_cls: float = 2.0
    alpha_reg: float = 5.0
    alpha_iou: float = 2.0
    beta_cls: float = 1.0
    beta_reg: float = 1.0
    beta_ctr: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")

    @classmethod
    def for_style(cls, style: str, **overrides) -> "LossWeights":
        """Defaults for a one-to-many style: FCOS keeps lambda_o2m = 1, RetinaNet uses 2 and no center-ness."""
        if style == "fcos":
            base = {}
        elif style == "retina":
            base = {"lambda_o2m": 2.0, "beta_ctr": 0.0}
        else:
            raise ValueError(f"unknown one-to-many style {style!r}")
        base.update(overrides)
        return cls(**base)


@dataclass
class LossReport:
    l_o2o_cls: float = 0.0
    l_o2o_reg: float = 0.0
    l_o2o_iou: float = 0.0
    l_o2m_cls: float = 0.0
    l_o2m_reg: float = 0.0
    l_o2m_ctr: float = 0.0
    l_o2o: float = 0.0
    l_o2m: float = 0.0
    l_DA: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class BranchOutputs:
    """One head's dense outputs for a batch.

    ``logits`` (B, P, K) and ``ltrb`` (B, P, 4, pixels) are tensors; ``points``
    (P, 2) holds the location each prediction regresses from. ``centerness``
    is the (B, P) center-ness logit tensor of FCOS-style heads.
    """

    logits: Tensor
    ltrb: Tensor
    points: np.ndarray
    centerness: Tensor | None = None


# ---------------------------------------------------------------------------
# elementwise losses
# ---------------------------------------------------------------------------


def _plain(*xs) -> bool:
    return not any(isinstance(x, Tensor) for x in xs)


def _to_plain(t: Tensor):
    return float(t.data) if t.size == 1 else t.data


def focal_loss(p, target, alpha_t: float = 0.25, gamma: float = 2.0):
    """Sigmoid focal loss on probabilities ``p`` against binary ``target``."""
    if _plain(p):
        return _to_plain(focal_loss(Tensor(p), target, alpha_t, gamma))
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    pc = ad.clip(p, PROB_EPS, 1 - PROB_EPS)
    pt = pc * t + (1.0 - pc) * (1.0 - t)
    balance = alpha_t * t + (1.0 - alpha_t) * (1.0 - t)
    modulating = (1.0 - pt) ** gamma if gamma != 0 else Tensor(np.ones(p.shape))
    return -(Tensor(balance) * modulating * ad.log(pt))


def bce_loss(p, target):
    if _plain(p):
        return _to_plain(bce_loss(Tensor(p), target))
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    pc = ad.clip(p, PROB_EPS, 1 - PROB_EPS)
    return -(ad.log(pc) * t + ad.log(1.0 - pc) * (1.0 - t))


def l1_loss(pred, target):
    """Mean absolute difference over the last (LTRB) axis."""
    if _plain(pred):
        return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))
    t = np.asarray(target, dtype=np.float64)
    return ad.mean(ad.tabs(pred - t), axis=-1)


def giou_loss(pred, gt):
    """``1 - GIoU``. Tensor form takes (N, 4) predicted boxes and returns (N,)."""
    if _plain(pred):
        return 1.0 - giou(Box(*pred), Box(*gt))
    g = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    x1, y1, x2, y2 = (pred[:, k] for k in range(4))
    gx1, gy1, gx2, gy2 = (g[:, k] for k in range(4))
    iw = ad.clip(ad.minimum(x2, gx2) - ad.maximum(x1, gx1), 0.0, None)
    ih = ad.clip(ad.minimum(y2, gy2) - ad.maximum(y1, gy1), 0.0, None)
    inter = iw * ih
    union = (x2 - x1) * (y2 - y1) + (gx2 - gx1) * (gy2 - gy1) - inter
    enclose = (ad.maximum(x2, gx2) - ad.minimum(x1, gx1)) * (ad.maximum(y2, gy2) - ad.minimum(y1, gy1))
    return 1.0 - (inter / union - (enclose - union) / enclose)


def dual_loss(l_o2o, l_o2m, weights: LossWeights):
    """Weighted sum of the one-to-one and one-to-many branch losses."""
    return weights.lambda_o2o * l_o2o + weights.lambda_o2m * l_o2m


# ---------------------------------------------------------------------------
# branch losses
# ---------------------------------------------------------------------------

_SIGNS = np.array([-1.0, -1.0, 1.0, 1.0])


def decode_boxes(points: np.ndarray, ltrb: Tensor) -> Tensor:
    """Box tensor (M, 4) from locations (M, 2) and distances (M, 4)."""
    anchor = np.concatenate([points, points], axis=1)
    return ltrb * np.broadcast_to(_SIGNS, ltrb.shape).copy() + anchor


def encode_targets(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Row-wise LTRB distances from ``points[i]`` to ``boxes[i]``."""
    return np.concatenate([points - boxes[:, :2], boxes[:, 2:] - points], axis=1)


def _normalizers(assignments: Sequence[AssignmentResult]) -> np.ndarray:
    b = len(assignments)
    return np.array([1.0 / (b * max(a.num_positive, 1)) for a in assignments])


def _cls_term(out: BranchOutputs, assignments, gts, weights: LossWeights, norm) -> Tensor:
    b, p, k = out.logits.shape
    target = np.zeros((b, p, k))
    mask = np.ones((b, p, k))
    for i, (a, g) in enumerate(zip(assignments, gts)):
        pos = a.positives
        if len(pos):
            classes = np.array([g[j].class_id for j in a.gt_index[pos]])
            target[i, pos, classes] = 1.0
        mask[i, a.gt_index == IGNORED] = 0.0
        mask[i] *= norm[i]
    fl = focal_loss(ad.sigmoid(out.logits), target, weights.focal_alpha, weights.focal_gamma)
    return ad.tsum(fl * mask)


def _gather_positives(out: BranchOutputs, assignments, gts, norm):
    """Flat positive indices, their points, target boxes and per-positive weights."""
    p = out.logits.shape[1]
    flat, pts, boxes, w = [], [], [], []
    for i, (a, g) in enumerate(zip(assignments, gts)):
        pos = a.positives
        flat.append(i * p + pos)
        pts.append(out.points[pos])
        boxes.append(np.array([g[j].box for j in a.gt_index[pos]], dtype=np.float64).reshape(-1, 4))
        w.append(np.full(len(pos), norm[i]))
    return np.concatenate(flat), np.concatenate(pts), np.concatenate(boxes), np.concatenate(w)


def _zero() -> Tensor:
    return Tensor(0.0)


def branch_loss_o2o(out: BranchOutputs, assignments: Sequence[AssignmentResult], gts: Sequence[Sequence[GroundTruth]], weights: LossWeights, image_size: float = 64.0):
    """``alpha_cls * cls + alpha_reg * reg + alpha_iou * iou``.

    Regression is L1 on LTRB distances divided by ``image_size`` (equal to L1
    on image-normalised corner coordinates); the IoU term is GIoU loss.
    Returns ``(loss, components)``.
    """
    norm = _normalizers(assignments)
    cls = _cls_term(out, assignments, gts, weights, norm)
    flat, pts, boxes, w = _gather_positives(out, assignments, gts, norm)
    if len(flat):
        pred = out.ltrb.reshape(-1, 4)[flat]
        target = encode_targets(pts, boxes)
        reg = ad.tsum(l1_loss(pred * (1.0 / image_size), target / image_size) * w)
        iou = ad.tsum(giou_loss(decode_boxes(pts, pred), boxes) * w)
    else:
        reg, iou = _zero(), _zero()
    total = weights.alpha_cls * cls + weights.alpha_reg * reg + weights.alpha_iou * iou
    return total, {"cls": cls, "reg": reg, "iou": iou}


def branch_loss_o2m(out: BranchOutputs, assignments: Sequence[AssignmentResult], gts: Sequence[Sequence[GroundTruth]], weights: LossWeights, style: str = "fcos"):
    """``beta_cls * cls + beta_reg * reg + beta_ctr * ctr``.

    Regression is GIoU loss on decoded boxes. The center-ness term is BCE
    against the FCOS target and is identically 0 for the RetinaNet style.
    Returns ``(loss, components)``.
    """
    if style not in ("fcos", "retina"):
        raise ValueError(f"unknown one-to-many style {style!r}")
    if style == "fcos" and (out.centerness is None or any(a.centerness is None for a in assignments)):
        raise ValueError("fcos-style branch loss needs center-ness predictions and targets")
    norm = _normalizers(assignments)
    cls = _cls_term(out, assignments, gts, weights, norm)
    flat, pts, boxes, w = _gather_positives(out, assignments, gts, norm)
    ctr = _zero()
    if len(flat):
        pred = out.ltrb.reshape(-1, 4)[flat]
        reg = ad.tsum(giou_loss(decode_boxes(pts, pred), boxes) * w)
        if style == "fcos":
            target = np.concatenate([a.centerness[a.positives] for a in assignments])
            logit = out.centerness.reshape(-1)[flat]
            ctr = ad.tsum(bce_loss(ad.sigmoid(logit), target) * w)
    else:
        reg = _zero()
    total = weights.beta_cls * cls + weights.beta_reg * reg
    if style == "fcos":
        total = total + weights.beta_ctr * ctr
    return total, {"cls": cls, "reg": reg, "ctr": ctr}
