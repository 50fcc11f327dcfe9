"""Training loop, inference helpers and periodic evaluation."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .assignment import FcosAssignerConfig, O2OAssignerConfig
from .detector import REGIMES, AdamW, Model, ModelConfig, StepConfig, build_model, decoded_boxes, training_step
from .evaluator import EvalResult, evaluate
from .losses import LossReport, LossWeights
from .postprocess import DEFAULT_NMS_IOU, DEFAULT_TOPK, Detection, nms, select_topk
from .scenegen import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "dual-f"
    iterations: int = 3000
    batch_size: int = 8
    seed: int = 0
    lambda_o2o: float | None = None
    lambda_o2m: float | None = None
    lr: float = 4e-4
    weight_decay: float = 1e-4
    lr_step: bool = False
    eval_interval: int = 300
    eval_limit: int | None = None
    topk: int = DEFAULT_TOPK
    score_floor: float = 0.0
    nms_iou: float = DEFAULT_NMS_IOU
    o2o: O2OAssignerConfig = field(default_factory=O2OAssignerConfig)
    fcos: FcosAssignerConfig = field(default_factory=FcosAssignerConfig)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {sorted(REGIMES)}")

    @property
    def style(self) -> str | None:
        return REGIMES[self.regime][1]

    def loss_weights(self) -> LossWeights:
        over = {}
        if self.lambda_o2o is not None:
            over["lambda_o2o"] = self.lambda_o2o
        if self.lambda_o2m is not None:
            over["lambda_o2m"] = self.lambda_o2m
        return LossWeights.for_style(self.style or "fcos", **over)

    def step_config(self) -> StepConfig:
        return StepConfig(self.loss_weights(), self.o2o, self.fcos)

    def lr_at(self, iteration: int) -> float:
        if not self.lr_step:
            return self.lr
        # 1x-style decay at 8/12 and 11/12 of the budget
        factor = 1.0
        for frac in (8 / 12, 11 / 12):
            if iteration >= int(frac * self.iterations):
                factor *= 0.1
        return self.lr * factor


@dataclass
class TrainResult:
    model: Model
    config: TrainConfig
    losses: list[LossReport]
    evals: list[dict]
    positives: dict[str, list[int]] = field(default_factory=dict)
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict(
    model: Model,
    images: np.ndarray,
    head: str = "o2o",
    use_nms: bool = False,
    nms_iou: float = DEFAULT_NMS_IOU,
    topk: int = DEFAULT_TOPK,
    score_floor: float = 0.0,
    batch_size: int = 100,
) -> list[list[Detection]]:
    """Per-image detections from one head; NMS only when ``use_nms``."""
    if head not in model.cfg.heads:
        raise ValueError(f"model has no {head} head")
    out: list[list[Detection]] = []
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            preds = model.forward(images[lo : lo + batch_size])
            branch = preds.o2o if head == "o2o" else preds.o2m
            boxes = decoded_boxes(branch)
            logits = branch.logits.data
            ctr = branch.centerness.data if branch.centerness is not None else None
            mode = "cls_times_ctr" if ctr is not None else "cls"
            for i in range(len(boxes)):
                dets = select_topk(logits[i], boxes[i], topk, score_floor, mode, None if ctr is None else ctr[i])
                if use_nms:
                    dets = nms(dets, nms_iou, class_aware=True)
                out.append(dets)
    return out


def evaluate_model(model: Model, ds: Dataset, head: str = "o2o", use_nms: bool = False, limit: int | None = None, **kw) -> EvalResult:
    n = len(ds) if limit is None else min(limit, len(ds))
    dets = predict(model, ds.images()[:n], head, use_nms, **kw)
    return evaluate(dets, ds.annotations[:n])


def default_eval_heads(model_cfg: ModelConfig) -> list[tuple[str, bool]]:
    """(head, nms) pairs tracked during training: o2o without NMS, o2m with NMS."""
    heads = []
    if "o2o" in model_cfg.heads:
        heads.append(("o2o", False))
    if "o2m" in model_cfg.heads:
        heads.append(("o2m", True))
    return heads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _batches(n: int, batch_size: int, seed: int):
    rng = np.random.default_rng([seed, 0xBA7C4])
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield perm[lo : lo + batch_size]


def train(
    cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset | None = None,
    model_cfg: ModelConfig | None = None,
    on_assign: Callable | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Train one regime from scratch; deterministic in ``(cfg, data)``."""
    if len(train_ds) < cfg.batch_size:
        raise ValueError(f"training set has {len(train_ds)} scenes, fewer than batch size {cfg.batch_size}")
    model_cfg = model_cfg or ModelConfig.for_regime(cfg.regime)
    model = build_model(model_cfg, cfg.seed)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    step_cfg = cfg.step_config()
    images = train_ds.images()
    batches = _batches(len(train_ds), cfg.batch_size, cfg.seed)
    losses: list[LossReport] = []
    evals: list[dict] = []
    positives: dict[str, list[int]] = {"o2o": [], "o2m": [], "gt": []}

    def count(assignments, gts_batch):
        o2o_a, o2m_a = assignments
        positives["gt"].append(sum(len(g) for g in gts_batch))
        if o2o_a is not None:
            positives["o2o"].append(sum(a.num_positive for a in o2o_a))
        if o2m_a is not None:
            positives["o2m"].append(sum(a.num_positive for a in o2m_a))
        if on_assign is not None:
            on_assign(assignments, gts_batch)

    def run_eval(it: int):
        if test_ds is None or cfg.eval_interval <= 0:
            return
        for head, use_nms in default_eval_heads(model_cfg):
            res = evaluate_model(model, test_ds, head, use_nms, cfg.eval_limit, nms_iou=cfg.nms_iou, topk=cfg.topk, score_floor=cfg.score_floor)
            evals.append({"iteration": it, "head": head, "nms": use_nms, **res.csv_row()})

    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        opt.lr = cfg.lr_at(it - 1)
        idx = next(batches)
        report = training_step(model, opt, images[idx], [train_ds.annotations[i] for i in idx], step_cfg, count)
        if not np.isfinite(report.l_DA):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        losses.append(report)
        if on_step is not None:
            on_step(it, report)
        if it % max(cfg.eval_interval, 1) == 0 or it == cfg.iterations:
            run_eval(it)
            log.info("%s seed %d it %d l_DA %.4f", cfg.regime, cfg.seed, it, report.l_DA)
    return TrainResult(model, cfg, losses, evals, positives, time.perf_counter() - start)


def replace(cfg: TrainConfig, **kw) -> TrainConfig:
    return dataclasses.replace(cfg, **kw)
