"""Label assignment: exact Hungarian matching, POTO one-to-one assignment,
FCOS-style and max-IoU one-to-many assignment, and anchor generation.

Sign convention: matching minimises cost, and the one-to-one assigner uses
``cost = -quality``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import box_areas, centerness_arrays, ltrb_encode_arrays, pairwise_iou
from .scenegen import GroundTruth

log = logging.getLogger(__name__)

NEGATIVE = -1
IGNORED = -2


@dataclass
class Matching:
    pairs: list[tuple[int, int]]
    total_cost: float


@dataclass
class AssignmentResult:
    """Per-prediction targets.

    ``gt_index[j]`` is the matched ground-truth index, ``NEGATIVE`` for
    background or ``IGNORED`` for predictions excluded from every loss term.
    """

    gt_index: np.ndarray
    centerness: np.ndarray | None = None
    unassigned_gts: list[int] = field(default_factory=list)

    @property
    def positive_mask(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.gt_index >= 0)

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.gt_index >= 0))


@dataclass(frozen=True)
class O2OAssignerConfig:
    alpha: float = 0.8
    restrict_to_box_interior: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class FcosAssignerConfig:
    regress_ranges: tuple[tuple[float, float], ...] = ((0.0, 32.0), (32.0, math.inf))
    center_sampling_radius: float = 0.0

    def __post_init__(self):
        rr = self.regress_ranges
        if not rr or rr[0][0] != 0 or rr[-1][1] != math.inf:
            raise ValueError("regress ranges must cover [0, inf)")
        for (lo, hi), (nlo, _) in zip(rr, list(rr[1:]) + [(math.inf, None)]):
            if not lo < hi or hi != nlo:
                raise ValueError(f"regress ranges must be contiguous and increasing: {rr}")


@dataclass(frozen=True)
class AnchorConfig:
    base_sizes: tuple[float, ...] = (16.0, 32.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    scales: tuple[float, ...] = (1.0,)
    positive_iou_threshold: float = 0.5
    negative_iou_threshold: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.negative_iou_threshold <= self.positive_iou_threshold <= 1.0:
            raise ValueError("need 0 <= negative_iou_threshold <= positive_iou_threshold <= 1")

    @property
    def anchors_per_location(self) -> int:
        return len(self.ratios) * len(self.scales)


# ---------------------------------------------------------------------------
# Hungarian matching
# ---------------------------------------------------------------------------


def hungarian(cost) -> Matching:
    """Minimum-cost assignment of every row to a distinct column.

    Shortest-augmenting-path Kuhn-Munkres with row/column potentials, working
    directly on the rectangular G x P matrix (G <= P). Ties resolve to the
    lowest column index.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n > m:
        raise ValueError(f"cannot match {n} ground truths to {m} predictions")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    if n == 0:
        return Matching([], 0.0)

    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = sorted((int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j])
    return Matching(pairs, math.fsum(c[r, k] for r, k in pairs))


# ---------------------------------------------------------------------------
# one-to-one
# ---------------------------------------------------------------------------


def poto_quality(cls_prob, pred_box, gt_box, gt_inside, alpha: float) -> float:
    """Matching quality ``prior * p**(1 - alpha) * IoU**alpha`` with ``0**0 = 1``."""
    if not gt_inside:
        return 0.0
    overlap = pairwise_iou(np.asarray([pred_box]), np.asarray([gt_box]))[0, 0]
    return float(np.power(cls_prob, 1.0 - alpha) * np.power(overlap, alpha))


def _inside_mask(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(G, P) mask of points strictly inside each box."""
    d = ltrb_encode_arrays(points, boxes)  # P, G, 4
    return (d.min(axis=-1) > 0).T


def quality_matrix(cls_prob, pred_boxes, points, gts: Sequence[GroundTruth], cfg: O2OAssignerConfig) -> np.ndarray:
    """Vectorised POTO quality, shape (G, P)."""
    cls_prob = np.asarray(cls_prob, dtype=np.float64)
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4)
    gt_cls = np.array([g.class_id for g in gts], dtype=np.int64)
    probs = cls_prob[:, gt_cls].T  # G, P
    overlaps = pairwise_iou(gt_boxes, pred_boxes)
    q = np.power(probs, 1.0 - cfg.alpha) * np.power(overlaps, cfg.alpha)
    if cfg.restrict_to_box_interior:
        q = q * _inside_mask(points, gt_boxes)
    return q


def assign_o2o(cls_prob, pred_boxes, points, gts: Sequence[GroundTruth], cfg: O2OAssignerConfig = O2OAssignerConfig()) -> AssignmentResult:
    """Hungarian matching on POTO quality; exactly one positive per ground truth."""
    n_pred = len(points)
    gt_index = np.full(n_pred, NEGATIVE, dtype=np.int64)
    if not gts:
        return AssignmentResult(gt_index)
    q = quality_matrix(cls_prob, pred_boxes, points, gts, cfg)
    match = hungarian(-q)
    for g, p in match.pairs:
        gt_index[p] = g
    return AssignmentResult(gt_index)


# ---------------------------------------------------------------------------
# one-to-many
# ---------------------------------------------------------------------------


def assign_o2m_fcos(level_points: Sequence[np.ndarray], gts: Sequence[GroundTruth], cfg: FcosAssignerConfig = FcosAssignerConfig()) -> AssignmentResult:
    """FCOS assignment over the concatenated locations of all levels.

    A location is positive for a box it lies strictly inside (and within the
    centre-sampling square when enabled) whose largest LTRB distance falls in
    the level's half-open range ``[lo, hi)``. Ambiguous locations go to the
    smallest box, lowest index first.
    """
    if len(level_points) != len(cfg.regress_ranges):
        raise ValueError(f"{len(level_points)} levels but {len(cfg.regress_ranges)} regress ranges")
    points = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in level_points])
    n_pred = len(points)
    gt_index = np.full(n_pred, NEGATIVE, dtype=np.int64)
    ctr = np.zeros(n_pred)
    if not gts:
        return AssignmentResult(gt_index, ctr)
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64)
    lo = np.concatenate([np.full(len(p), r[0]) for p, r in zip(level_points, cfg.regress_ranges)])
    hi = np.concatenate([np.full(len(p), r[1]) for p, r in zip(level_points, cfg.regress_ranges)])

    d = ltrb_encode_arrays(points, gt_boxes)  # P, G, 4
    ok = d.min(axis=-1) > 0
    if cfg.center_sampling_radius > 0:
        r = cfg.center_sampling_radius
        cx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2
        cy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2
        ok &= (np.abs(points[:, None, 0] - cx[None]) < r) & (np.abs(points[:, None, 1] - cy[None]) < r)
    reach = d.max(axis=-1)
    ok &= (reach >= lo[:, None]) & (reach < hi[:, None])

    areas = np.where(ok, box_areas(gt_boxes)[None, :], np.inf)
    best = np.argmin(areas, axis=1)
    pos = ok.any(axis=1)
    gt_index[pos] = best[pos]
    ctr[pos] = centerness_arrays(d[pos, best[pos]])
    unassigned = sorted(set(range(len(gts))) - set(gt_index[pos].tolist()))
    if unassigned:
        log.debug("fcos: %d ground truths without positives", len(unassigned))
    return AssignmentResult(gt_index, ctr, unassigned)


def generate_anchors(level_points: Sequence[np.ndarray], cfg: AnchorConfig = AnchorConfig()) -> list[np.ndarray]:
    """Anchors centred on each location; (P_l * A, 4) per level, location-major.

    ``ratio`` is height / width and preserves area: ``w = s / sqrt(r)``,
    ``h = s * sqrt(r)`` with ``s = base * scale``.
    """
    if len(level_points) != len(cfg.base_sizes):
        raise ValueError(f"{len(level_points)} levels but {len(cfg.base_sizes)} base sizes")
    out = []
    for pts, base in zip(level_points, cfg.base_sizes):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        wh = []
        for ratio in cfg.ratios:
            for scale in cfg.scales:
                s = base * scale
                wh.append((s / math.sqrt(ratio), s * math.sqrt(ratio)))
        wh = np.array(wh)  # A, 2
        cx = pts[:, None, 0]
        cy = pts[:, None, 1]
        anchors = np.stack(
            [cx - wh[None, :, 0] / 2, cy - wh[None, :, 1] / 2, cx + wh[None, :, 0] / 2, cy + wh[None, :, 1] / 2],
            axis=-1,
        )
        out.append(anchors.reshape(-1, 4))
    return out


def assign_o2m_retina(anchors, gts: Sequence[GroundTruth], cfg: AnchorConfig = AnchorConfig()) -> AssignmentResult:
    """Max-IoU assignment with the forced best-anchor rule."""
    anchors = np.concatenate([np.asarray(a).reshape(-1, 4) for a in anchors]) if isinstance(anchors, (list, tuple)) else np.asarray(anchors).reshape(-1, 4)
    n = len(anchors)
    gt_index = np.full(n, NEGATIVE, dtype=np.int64)
    if not gts:
        return AssignmentResult(gt_index)
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64)
    overlaps = pairwise_iou(anchors, gt_boxes)  # A, G
    best_iou = overlaps.max(axis=1)
    best_gt = overlaps.argmax(axis=1)
    gt_index[(best_iou >= cfg.negative_iou_threshold) & (best_iou < cfg.positive_iou_threshold)] = IGNORED
    pos = best_iou >= cfg.positive_iou_threshold
    gt_index[pos] = best_gt[pos]
    unassigned = []
    for g in range(len(gts)):
        a = int(np.argmax(overlaps[:, g]))
        if overlaps[a, g] > 0:
            gt_index[a] = g
        else:
            unassigned.append(g)
    return AssignmentResult(gt_index, None, unassigned)
