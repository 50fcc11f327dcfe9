"""Toy fully convolutional detector with one-to-one and one-to-many heads.

Layout:

    image -> stride-2 conv stem -> pyramid levels (strides 8, 16)
          -> classification subnet / regression subnet   (shared across levels)
          -> o2o head: cls conv, reg conv
          -> o2m head: cls conv, reg conv (+ center-ness conv for FCOS style)

With ``share_subnets`` both heads read the same subnet features, so the only
extra training-time parameters are the o2m output convs. Regression outputs are
``exp(raw) * scale`` where ``scale`` is the level stride (anchor half-size for
the RetinaNet style), which keeps distances positive.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .assignment import (
    AnchorConfig,
    FcosAssignerConfig,
    O2OAssignerConfig,
    assign_o2m_fcos,
    assign_o2m_retina,
    assign_o2o,
    generate_anchors,
)
from .autodiff import Tensor
from .geometry import ltrb_decode_arrays
from .losses import BranchOutputs, LossReport, LossWeights, branch_loss_o2m, branch_loss_o2o, dual_loss
from .scenegen import GroundTruth

CHECKPOINT_SCHEMA = 1
PRIOR_PROB = 0.01

REGIMES = {
    # name: (heads, o2m style)
    "o2o": (("o2o",), None),
    "o2m-fcos": (("o2m",), "fcos"),
    "o2m-retina": (("o2m",), "retina"),
    "dual-f": (("o2o", "o2m"), "fcos"),
    "dual-r": (("o2o", "o2m"), "retina"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    stem_channels: tuple[int, ...] = (16, 32)
    feat_channels: int = 48
    strides: tuple[int, ...] = (8, 16)
    subnet_depth: int = 2
    num_classes: int = 3
    heads: tuple[str, ...] = ("o2o", "o2m")
    o2m_style: str | None = "fcos"
    share_subnets: bool = True
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        h, w = self.image_size
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not self.heads or any(hd not in ("o2o", "o2m") for hd in self.heads):
            raise ConfigError(f"bad heads {self.heads}")
        if "o2m" in self.heads and self.o2m_style not in ("fcos", "retina"):
            raise ConfigError(f"o2m head needs style fcos or retina, got {self.o2m_style!r}")
        first = 2 ** (len(self.stem_channels) + 1)
        if not self.strides or self.strides[0] != first:
            raise ConfigError(f"first stride must be {first} for {len(self.stem_channels)} stem convs")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ConfigError(f"strides must double per level: {self.strides}")
        for s in self.strides:
            if h % s or w % s:
                raise ConfigError(f"stride {s} does not divide image size {self.image_size}")
        if self.o2m_style == "retina" and len(self.anchors.base_sizes) != len(self.strides):
            raise ConfigError("one anchor base size per pyramid level is required")

    @classmethod
    def for_regime(cls, regime: str, **kw) -> "ModelConfig":
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}; choose from {sorted(REGIMES)}")
        heads, style = REGIMES[regime]
        return cls(heads=heads, o2m_style=style, **kw)

    @property
    def num_anchors(self) -> int:
        return self.anchors.anchors_per_location if self.o2m_style == "retina" else 1

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        kw = dict(obj)
        for key in ("image_size", "stem_channels", "strides", "heads"):
            kw[key] = tuple(kw[key])
        a = dict(kw.pop("anchors"))
        for key in ("base_sizes", "ratios", "scales"):
            a[key] = tuple(a[key])
        return cls(anchors=AnchorConfig(**a), **kw)


@dataclass
class Predictions:
    o2o: BranchOutputs | None
    o2m: BranchOutputs | None
    level_points: list[np.ndarray]
    level_shapes: list[tuple[int, int]]

    @property
    def num_locations(self) -> int:
        return sum(h * w for h, w in self.level_shapes)


def _conv_specs(cfg: ModelConfig) -> dict[str, tuple[int, int, str]]:
    """Parameter layout: name -> (in_channels, out_channels, init kind)."""
    specs: dict[str, tuple[int, int, str]] = {}
    c_in = cfg.in_channels
    for i, c in enumerate(cfg.stem_channels):
        specs[f"stem.{i}"] = (c_in, c, "he")
        c_in = c
    for i in range(len(cfg.strides)):
        specs[f"level.{i}"] = (c_in, cfg.feat_channels, "he")
        c_in = cfg.feat_channels
    f = cfg.feat_channels
    subnet_prefixes = ["subnet"]
    if "o2o" in cfg.heads and "o2m" in cfg.heads and not cfg.share_subnets:
        subnet_prefixes.append("o2m_subnet")
    for prefix in subnet_prefixes:
        for kind in ("cls", "reg"):
            for d in range(cfg.subnet_depth):
                specs[f"{prefix}.{kind}.{d}"] = (f, f, "he")
    k, a = cfg.num_classes, cfg.num_anchors
    if "o2o" in cfg.heads:
        specs["o2o.cls"] = (f, k, "cls")
        specs["o2o.reg"] = (f, 4, "head")
    if "o2m" in cfg.heads:
        specs["o2m.cls"] = (f, k * a, "cls")
        specs["o2m.reg"] = (f, 4 * a, "head")
        if cfg.o2m_style == "fcos":
            specs["o2m.ctr"] = (f, 1, "head")
    return specs


def count_parameters_closed_form(cfg: ModelConfig) -> int:
    """Parameter total of 3x3 convs with bias: sum of out * (9 * in + 1)."""
    return sum(o * (9 * i + 1) for i, o, _ in _conv_specs(cfg).values())


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._grid_cache: tuple | None = None

    # -- bookkeeping ----------------------------------------------------------
    def num_parameters(self, prefix: str | None = None) -> int:
        return sum(p.size for n, p in self.params.items() if prefix is None or n.startswith(prefix))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "Model":
        return Model(self.cfg, {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()})

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        return ad.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride=stride, padding=1)

    def grids(self):
        """Per-level location points, grid shapes, and the regression scale of each prediction."""
        if self._grid_cache is None:
            h, w = self.cfg.image_size
            pts, shapes = [], []
            for s in self.cfg.strides:
                gh, gw = h // s, w // s
                ys, xs = np.mgrid[0:gh, 0:gw]
                pts.append(np.stack([xs.ravel() * s + s / 2, ys.ravel() * s + s / 2], axis=1).astype(np.float64))
                shapes.append((gh, gw))
            points = np.concatenate(pts)
            stride_scale = np.concatenate([np.full((len(p), 4), float(s)) for p, s in zip(pts, self.cfg.strides)])
            if self.cfg.o2m_style == "retina":
                anchors = np.concatenate(generate_anchors(pts, self.cfg.anchors))
                aw = anchors[:, 2] - anchors[:, 0]
                ah = anchors[:, 3] - anchors[:, 1]
                o2m_scale = np.stack([aw / 2, ah / 2, aw / 2, ah / 2], axis=1)
                o2m_points = np.repeat(points, self.cfg.num_anchors, axis=0)
            else:
                anchors = None
                o2m_scale = stride_scale
                o2m_points = points
            self._grid_cache = (pts, shapes, points, stride_scale, o2m_points, o2m_scale, anchors)
        return self._grid_cache

    # -- forward ------------------------------------------------------------------
    def forward(self, images) -> Predictions:
        cfg = self.cfg
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, *cfg.image_size):
            raise ad.ShapeError(f"expected images of shape (B, {cfg.in_channels}, {cfg.image_size[0]}, {cfg.image_size[1]}), got {x.shape}")
        b = x.shape[0]
        for i in range(len(cfg.stem_channels)):
            x = ad.relu(self._conv(x, f"stem.{i}", stride=2))
        feats = []
        for i in range(len(cfg.strides)):
            x = ad.relu(self._conv(x, f"level.{i}", stride=2))
            feats.append(x)

        def subnet(feat, prefix, kind):
            for d in range(cfg.subnet_depth):
                feat = ad.relu(self._conv(feat, f"{prefix}.{kind}.{d}"))
            return feat

        outs: dict[str, list[Tensor]] = {}
        a = cfg.num_anchors
        for feat in feats:
            cls_f = subnet(feat, "subnet", "cls")
            reg_f = subnet(feat, "subnet", "reg")
            if "o2o" in cfg.heads:
                outs.setdefault("o2o.cls", []).append(_flatten(self._conv(cls_f, "o2o.cls"), 1))
                outs.setdefault("o2o.reg", []).append(_flatten(self._conv(reg_f, "o2o.reg"), 1))
            if "o2m" in cfg.heads:
                if "o2m_subnet.cls.0.w" in self.params:
                    cls_f = subnet(feat, "o2m_subnet", "cls")
                    reg_f = subnet(feat, "o2m_subnet", "reg")
                outs.setdefault("o2m.cls", []).append(_flatten(self._conv(cls_f, "o2m.cls"), a))
                outs.setdefault("o2m.reg", []).append(_flatten(self._conv(reg_f, "o2m.reg"), a))
                if cfg.o2m_style == "fcos":
                    outs.setdefault("o2m.ctr", []).append(_flatten(self._conv(reg_f, "o2m.ctr"), 1))

        pts, shapes, points, stride_scale, o2m_points, o2m_scale, _ = self.grids()
        o2o = o2m = None
        if "o2o" in cfg.heads:
            raw = ad.concat(outs["o2o.reg"], axis=1)
            o2o = BranchOutputs(
                ad.concat(outs["o2o.cls"], axis=1),
                ad.exp(raw) * np.broadcast_to(stride_scale, raw.shape).copy(),
                points,
            )
        if "o2m" in cfg.heads:
            raw = ad.concat(outs["o2m.reg"], axis=1)
            ctr = None
            if cfg.o2m_style == "fcos":
                ctr = ad.concat(outs["o2m.ctr"], axis=1).reshape(b, -1)
            o2m = BranchOutputs(
                ad.concat(outs["o2m.cls"], axis=1),
                ad.exp(raw) * np.broadcast_to(o2m_scale, raw.shape).copy(),
                o2m_points,
                ctr,
            )
        return Predictions(o2o, o2m, pts, shapes)

    __call__ = forward


def _flatten(t: Tensor, per_location: int) -> Tensor:
    """(B, A*C, H, W) -> (B, H*W*A, C), location-major."""
    b, c, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(b, h * w * per_location, c // per_location)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Initialise parameters deterministically.

    Each parameter draws from its own generator keyed on ``(seed, name)``, so a
    model with fewer heads gets bit-identical values for the parameters it
    shares with a larger one.
    """
    params: dict[str, Tensor] = {}
    for name, (c_in, c_out, kind) in _conv_specs(cfg).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if kind == "he":
            w = rng.normal(0.0, math.sqrt(2.0 / (9 * c_in)), size=(c_out, c_in, 3, 3))
        else:
            w = rng.normal(0.0, 0.01, size=(c_out, c_in, 3, 3))
        b = np.zeros(c_out)
        if kind == "cls":
            b[:] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        params[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        params[name + ".b"] = Tensor(b, requires_grad=True, name=name + ".b")
    return Model(cfg, params)


def strip_branch(model: Model, keep: str) -> Model:
    """Inference model holding only the ``keep`` head ("o2o" or "o2m")."""
    cfg = model.cfg
    if keep not in cfg.heads:
        raise ConfigError(f"model has no {keep} head")
    style = cfg.o2m_style if keep == "o2m" else None
    new_cfg = dataclasses.replace(cfg, heads=(keep,), o2m_style=style)
    separate = "o2m_subnet.cls.0.w" in model.params
    params = {}
    for name in _conv_specs(new_cfg):
        src = name
        if keep == "o2m" and separate and name.startswith("subnet."):
            src = "o2m_" + name
        for suffix in (".w", ".b"):
            params[name + suffix] = Tensor(model.params[src + suffix].data.copy(), requires_grad=True, name=name + suffix)
    return Model(new_cfg, params)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    lr: float = 4e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        """Decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= self.lr * update


def adamw_step(state: AdamW, params: dict[str, Tensor]) -> None:
    state.step(params)


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    o2o: O2OAssignerConfig = field(default_factory=O2OAssignerConfig)
    fcos: FcosAssignerConfig = field(default_factory=FcosAssignerConfig)


def decoded_boxes(out: BranchOutputs) -> np.ndarray:
    """Detached (B, P, 4) boxes of a head."""
    return ltrb_decode_arrays(out.points[None], out.ltrb.data)


def assign_batch(model: Model, preds: Predictions, gts_batch: Sequence[Sequence[GroundTruth]], step_cfg: StepConfig):
    """One-to-one and one-to-many assignments for every image of the batch."""
    o2o_assign = o2m_assign = None
    if preds.o2o is not None:
        probs = 1.0 / (1.0 + np.exp(-preds.o2o.logits.data))
        boxes = decoded_boxes(preds.o2o)
        o2o_assign = [assign_o2o(probs[i], boxes[i], preds.o2o.points, g, step_cfg.o2o) for i, g in enumerate(gts_batch)]
    if preds.o2m is not None:
        if model.cfg.o2m_style == "fcos":
            o2m_assign = [assign_o2m_fcos(preds.level_points, g, step_cfg.fcos) for g in gts_batch]
        else:
            anchors = model.grids()[6]
            o2m_assign = [assign_o2m_retina(anchors, g, model.cfg.anchors) for g in gts_batch]
    return o2o_assign, o2m_assign


def compute_losses(model: Model, preds: Predictions, gts_batch, step_cfg: StepConfig, assignments=None):
    """Returns ``(l_DA tensor, components dict of tensors, (o2o_assign, o2m_assign))``."""
    if assignments is None:
        assignments = assign_batch(model, preds, gts_batch, step_cfg)
    o2o_assign, o2m_assign = assignments
    w = step_cfg.weights
    comps: dict[str, Tensor] = {}
    l_o2o = l_o2m = Tensor(0.0)
    if preds.o2o is not None:
        l_o2o, c = branch_loss_o2o(preds.o2o, o2o_assign, gts_batch, w, float(max(model.cfg.image_size)))
        comps.update({f"l_o2o_{k}": v for k, v in c.items()})
    if preds.o2m is not None:
        l_o2m, c = branch_loss_o2m(preds.o2m, o2m_assign, gts_batch, w, model.cfg.o2m_style)
        comps.update({f"l_o2m_{k}": v for k, v in c.items()})
    if preds.o2o is not None and preds.o2m is not None:
        total = dual_loss(l_o2o, l_o2m, w)
    elif preds.o2o is not None:
        total = w.lambda_o2o * l_o2o
    else:
        total = w.lambda_o2m * l_o2m
    comps["l_o2o"] = l_o2o
    comps["l_o2m"] = l_o2m
    return total, comps, assignments


def training_step(
    model: Model,
    optimizer: AdamW,
    images: np.ndarray,
    gts_batch: Sequence[Sequence[GroundTruth]],
    step_cfg: StepConfig,
    on_assign: Callable | None = None,
) -> LossReport:
    """Forward, assign, dual loss, backward, AdamW update."""
    model.zero_grad()
    preds = model.forward(images)
    total, comps, assignments = compute_losses(model, preds, gts_batch, step_cfg)
    if on_assign is not None:
        on_assign(assignments, gts_batch)
    report = LossReport(**{k: float(v.data) for k, v in comps.items()}, l_DA=float(total.data))
    total.backward()
    optimizer.step(model.params)
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"schema": CHECKPOINT_SCHEMA, "model": model.cfg.to_json(), "extra": extra or {}}
    arrays = {f"param/{n}": p.data for n, p in model.params.items()}
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ConfigError(f"{path}: unsupported checkpoint schema {meta.get('schema')!r}")
        cfg = ModelConfig.from_json(meta["model"])
        params = {k[len("param/") :]: Tensor(z[k].copy(), requires_grad=True, name=k[len("param/") :]) for k in z.files if k.startswith("param/")}
    expected = {n + s for n in _conv_specs(cfg) for s in (".w", ".b")}
    if set(params) != expected:
        raise ConfigError(f"{path}: parameter set does not match its config")
    return Model(cfg, params), meta.get("extra", {})
