"""COCO-style average precision and recall.

AP is 101-point interpolated, averaged over classes that have ground truth and
over IoU thresholds 0.50:0.05:0.95. Equal scores keep input order (image order,
then detection order within an image).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import pairwise_iou
from .postprocess import DEFAULT_TOPK, Detection, nms
from .scenegen import GroundTruth

RESULT_SCHEMA = 1
IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)


class EvaluationError(ValueError):
    pass


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_per_threshold: list[float]
    recall: float
    per_class: dict[int, float] = field(default_factory=dict)

    CSV_FIELDS = ("schema", "AP", "AP50", "AP75", "recall") + tuple(f"AP@{t:.2f}" for t in IOU_THRESHOLDS)

    def to_json(self) -> dict:
        return {
            "schema": RESULT_SCHEMA,
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_per_threshold": dict(zip([f"{t:.2f}" for t in IOU_THRESHOLDS], self.ap_per_threshold)),
            "recall": self.recall,
            "per_class_AP": {str(k): v for k, v in sorted(self.per_class.items())},
        }

    def csv_row(self) -> dict:
        row = {"schema": RESULT_SCHEMA, "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "recall": self.recall}
        row.update({f"AP@{t:.2f}": v for t, v in zip(IOU_THRESHOLDS, self.ap_per_threshold)})
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS)
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()

    def summary(self) -> str:
        return f"AP {100 * self.ap:.1f}  AP50 {100 * self.ap50:.1f}  AP75 {100 * self.ap75:.1f}  recall {100 * self.recall:.1f}"


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float) -> list[bool]:
    """TP flags for detections already sorted by descending score.

    Each detection takes the unmatched same-class ground truth of highest IoU
    (lowest index on ties) and is a TP when that IoU reaches the threshold.
    """
    if not dets:
        return []
    if not gts:
        return [False] * len(dets)
    overlaps = pairwise_iou(np.array([d.box for d in dets]), np.array([g.box for g in gts]))
    same = np.array([d.class_id for d in dets])[:, None] == np.array([g.class_id for g in gts])[None, :]
    return _greedy_match(np.where(same, overlaps, -1.0), iou_threshold)


def _greedy_match(overlaps: np.ndarray, iou_threshold: float) -> list[bool]:
    """Greedy matching on a (D, G) overlap matrix; -1 marks forbidden pairs."""
    taken = np.zeros(overlaps.shape[1], dtype=bool)
    flags = []
    for row in overlaps:
        if taken.all():
            flags.append(False)
            continue
        cand = np.where(taken, -1.0, row)
        j = int(np.argmax(cand))
        hit = bool(cand[j] >= iou_threshold)
        taken[j] |= hit
        flags.append(hit)
    return flags


def average_precision(tp_flags: Sequence[bool], gt_count: int) -> float | None:
    """101-point interpolated AP of score-sorted TP flags.

    Returns None when there is neither ground truth nor any detection, and 0
    when detections exist without ground truth.
    """
    flags = np.asarray(tp_flags, dtype=bool)
    if gt_count == 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / gt_count
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return math.fsum(sampled) / len(sampled)


def _as_mapping(x) -> Mapping:
    return x if isinstance(x, Mapping) else dict(enumerate(x))


def _sorted_dets(dets: Sequence[Detection]) -> list[Detection]:
    order = np.argsort(-np.array([d.score for d in dets]), kind="stable") if dets else []
    return [dets[i] for i in order]


def evaluate(
    detections,
    ground_truths,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = DEFAULT_TOPK,
) -> EvalResult:
    """Evaluate per-image detections against per-image annotations.

    Both arguments are mappings (or sequences) keyed by image id; the key sets
    must agree.
    """
    dets_map = _as_mapping(detections)
    gts_map = _as_mapping(ground_truths)
    if set(dets_map) != set(gts_map):
        raise EvaluationError("detection and ground-truth image ids differ")
    ids = list(gts_map)
    per_image = {i: _sorted_dets(list(dets_map[i]))[:max_dets] for i in ids}
    classes = sorted({g.class_id for i in ids for g in gts_map[i]})

    # per (image, class): detection scores and the det x gt overlap matrix
    cells: dict[int, list[tuple[list[float], np.ndarray]]] = {c: [] for c in classes}
    gt_counts = {c: 0 for c in classes}
    for i in ids:
        for c in classes:
            gts_c = [g.box for g in gts_map[i] if g.class_id == c]
            dets_c = [d for d in per_image[i] if d.class_id == c]
            gt_counts[c] += len(gts_c)
            if not dets_c:
                continue
            if gts_c:
                ov = pairwise_iou(np.array([d.box for d in dets_c]), np.array(gts_c))
            else:
                ov = np.full((len(dets_c), 1), -1.0)
            cells[c].append(([d.score for d in dets_c], ov))

    ap_table = np.zeros((len(iou_thresholds), len(classes)))
    for ci, c in enumerate(classes):
        scores = [s for sc, _ in cells[c] for s in sc]
        order = np.argsort(-np.array(scores), kind="stable") if scores else []
        for ti, thr in enumerate(iou_thresholds):
            flags = [f for _, ov in cells[c] for f in _greedy_match(ov, thr)]
            ap_table[ti, ci] = average_precision([flags[k] for k in order], gt_counts[c])

    # correctly rounded means keep results independent of summation order
    per_thr = [math.fsum(row) / len(row) if classes else 0.0 for row in ap_table]
    thr_list = [round(float(t), 2) for t in iou_thresholds]

    def at(t):
        return float(per_thr[thr_list.index(t)]) if t in thr_list else float("nan")

    matched = total = 0
    for i in ids:
        total += len(gts_map[i])
        matched += sum(match_detections(per_image[i], gts_map[i], 0.5))
    return EvalResult(
        ap=math.fsum(per_thr) / len(per_thr),
        ap50=at(0.5),
        ap75=at(0.75),
        ap_per_threshold=[float(v) for v in per_thr],
        recall=matched / total if total else 0.0,
        per_class={c: math.fsum(ap_table[:, ci]) / len(iou_thresholds) for ci, c in enumerate(classes)},
    )


def recall_after_nms_on_gt(gts_per_image, iou_threshold: float = 0.5) -> float:
    """Share of annotations that survive class-aware NMS run on the annotations themselves."""
    kept = total = 0
    for gts in _as_mapping(gts_per_image).values():
        dets = [Detection(g.box, 1.0, g.class_id) for g in gts]
        kept += len(nms(dets, iou_threshold, class_aware=True))
        total += len(gts)
    return kept / total if total else 1.0


def recall_ceiling_topk(gts_per_image, k: int = DEFAULT_TOPK) -> float:
    """Share of annotations reachable by top-k selection when every annotation is a candidate."""
    kept = total = 0
    for gts in _as_mapping(gts_per_image).values():
        dets = _sorted_dets([Detection(g.box, 1.0, g.class_id) for g in gts])[:k]
        kept += sum(match_detections(dets, gts, 0.5))
        total += len(gts)
    return kept / total if total else 1.0


def write_result(result: EvalResult, json_path, csv_path=None) -> None:
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    Path(json_path).write_text(json.dumps(result.to_json(), indent=2) + "\n")
    if csv_path is not None:
        Path(csv_path).write_text(result.to_csv())
