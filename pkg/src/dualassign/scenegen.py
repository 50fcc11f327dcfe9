"""Procedural synthetic detection scenes.

Three shape classes are drawn on a noisy grey background:

* 0 -- axis-aligned rectangle with a horizontal stripe texture
* 1 -- filled disc with a radial brightness ramp
* 2 -- ring (annulus) of uniform brightness

Every annotation is the tight bounding box of the pixels actually rendered for
that object, so the rendered support always lies inside its box. Images are a
pure function of ``(seed, SceneConfig)``; datasets on disk store only seeds and
annotations and re-render pixels on read.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, pairwise_iou

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CLASS_NAMES = ("rectangle", "disc", "ring")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int

    def to_json(self) -> dict:
        return {"box": [float(v) for v in self.box], "class_id": int(self.class_id)}

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls(Box(*map(float, obj["box"])), int(obj["class_id"]))


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 3
    objects_per_scene: tuple[int, int] = (1, 6)
    size_range: tuple[int, int] = (8, 40)
    max_overlap_iou: float = 0.5
    crowd_mode: bool = False
    crowd_iou_target: float = 0.6
    noise: float = 0.1
    background: float = 0.2
    max_attempts: int = 50

    def __post_init__(self):
        h, w = self.image_size
        lo, hi = self.size_range
        if self.num_classes < 1 or self.num_classes > len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if not (2 <= lo <= hi <= min(h, w)):
            raise ValueError(f"size_range {self.size_range} does not fit image {self.image_size}")
        a, b = self.objects_per_scene
        if not (0 <= a <= b):
            raise ValueError(f"bad objects_per_scene {self.objects_per_scene}")
        if not (0.0 <= self.crowd_iou_target <= 1.0):
            raise ValueError("crowd_iou_target must lie in [0, 1]")

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_json(cls, obj: dict) -> "SceneConfig":
        kw = dict(obj)
        for key in ("image_size", "objects_per_scene", "size_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _shape_mask(class_id: int, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary support and intensity pattern for a shape drawn in a w x h patch."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if class_id == 0:
        mask = np.ones((h, w), dtype=bool)
        pattern = np.where((yy.astype(int) // 2) % 2 == 0, 0.95, 0.6)
        return mask, pattern
    # ellipse fitted to the patch, sampled at pixel centres
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rx, ry = w / 2.0, h / 2.0
    r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    if class_id == 1:
        mask = r <= 1.0
        pattern = 1.0 - 0.5 * np.clip(r, 0.0, 1.0)
        return mask, pattern
    thickness = max(2.0, 0.2 * min(w, h)) / (min(w, h) / 2.0)
    mask = (r <= 1.0) & (r >= 1.0 - thickness)
    pattern = np.full((h, w), 0.85)
    return mask, pattern


def _tight_box(mask: np.ndarray, x0: int, y0: int) -> Box | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return Box(float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))


def _sample_object(rng: np.random.Generator, cfg: SceneConfig, class_id: int | None = None):
    h, w = cfg.image_size
    lo, hi = cfg.size_range
    cls = int(rng.integers(cfg.num_classes)) if class_id is None else class_id
    bw = int(rng.integers(lo, hi + 1))
    bh = bw if cls != 0 else int(rng.integers(lo, hi + 1))
    if cls != 0 and rng.random() < 0.5:
        # mildly elliptical discs and rings
        bh = int(np.clip(round(bw * rng.uniform(0.75, 1.33)), lo, hi))
    x0 = int(rng.integers(0, w - bw + 1))
    y0 = int(rng.integers(0, h - bh + 1))
    return cls, x0, y0, bw, bh


def _render(rng: np.random.Generator, cfg: SceneConfig, objects) -> tuple[np.ndarray, list[GroundTruth]]:
    h, w = cfg.image_size
    img = np.full((h, w), cfg.background, dtype=np.float64)
    gts = []
    # paint larger objects first so small ones stay visible
    for cls, x0, y0, bw, bh in sorted(objects, key=lambda o: -(o[3] * o[4])):
        mask, pattern = _shape_mask(cls, bw, bh)
        box = _tight_box(mask, x0, y0)
        if box is None:
            continue
        patch = img[y0 : y0 + bh, x0 : x0 + bw]
        patch[mask] = pattern[mask]
        gts.append(GroundTruth(box, cls))
    img += rng.uniform(-cfg.noise, cfg.noise, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return img, gts


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> tuple[np.ndarray, list[GroundTruth]]:
    """Render one scene; returns a (1, H, W) image and its annotations."""
    if cfg.crowd_mode and cfg.crowd_iou_target > 0:
        return generate_crowded_scene(seed, cfg)
    rng = np.random.default_rng([seed, 0x5CE7E])
    lo, hi = cfg.objects_per_scene
    target = int(rng.integers(lo, hi + 1))
    objects: list = []
    boxes: list = []
    attempts = 0
    while len(objects) < target and attempts < cfg.max_attempts * max(target, 1):
        attempts += 1
        obj = _sample_object(rng, cfg)
        cand = [obj[1], obj[2], obj[1] + obj[3], obj[2] + obj[4]]
        if boxes and pairwise_iou(np.array([cand]), np.array(boxes)).max() > cfg.max_overlap_iou:
            continue
        objects.append(obj)
        boxes.append(cand)
    if len(objects) < lo:
        log.debug("scene %d: placed %d of %d objects", seed, len(objects), target)
    img, gts = _render(rng, cfg, objects)
    return img[None], gts


def _crowd_partner(rng, cfg, obj):
    """A same-class object shifted slightly off ``obj`` so the two boxes overlap heavily."""
    h, w = cfg.image_size
    cls, x0, y0, bw, bh = obj
    max_dx = max(1, int(bw * (1 - cfg.crowd_iou_target) / (1 + cfg.crowd_iou_target) / 2))
    max_dy = max(1, int(bh * (1 - cfg.crowd_iou_target) / (1 + cfg.crowd_iou_target) / 2))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    nx = int(np.clip(x0 + dx, 0, w - bw))
    ny = int(np.clip(y0 + dy, 0, h - bh))
    return cls, nx, ny, bw, bh


def generate_crowded_scene(seed: int, cfg: SceneConfig) -> tuple[np.ndarray, list[GroundTruth]]:
    """Scene containing at least one same-class pair with IoU >= crowd_iou_target.

    Raises GenerationError when the bounded retries are exhausted.
    """
    if cfg.crowd_iou_target <= 0:
        return generate_scene(seed, dataclasses.replace(cfg, crowd_mode=False))
    rng = np.random.default_rng([seed, 0xC20D])
    lo, hi = cfg.objects_per_scene
    for _ in range(cfg.max_attempts):
        target = max(2, int(rng.integers(lo, hi + 1)))
        objects = []
        while len(objects) + 2 <= target:
            base = _sample_object(rng, cfg)
            objects.extend([base, _crowd_partner(rng, cfg, base)])
        if len(objects) < target:
            objects.append(_sample_object(rng, cfg))
        img, gts = _render(rng, cfg, objects)
        if _has_crowded_pair(gts, cfg.crowd_iou_target):
            return img[None], gts
    raise GenerationError(f"seed {seed}: no crowded pair after {cfg.max_attempts} attempts")


def _has_crowded_pair(gts: Sequence[GroundTruth], target: float) -> bool:
    for i in range(len(gts)):
        for j in range(i + 1, len(gts)):
            if gts[i].class_id == gts[j].class_id:
                a = np.array([gts[i].box])
                b = np.array([gts[j].box])
                if pairwise_iou(a, b)[0, 0] >= target:
                    return True
    return False


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Seeds plus annotations; images are re-rendered lazily from seeds."""

    config: SceneConfig
    seeds: list[int]
    annotations: list[list[GroundTruth]]
    _images: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.seeds)

    def image(self, i: int) -> np.ndarray:
        return self.images()[i]

    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = np.stack([generate_scene(s, self.config)[0] for s in self.seeds])
        return self._images


def build_dataset(seeds: Iterable[int], cfg: SceneConfig) -> Dataset:
    seeds = [int(s) for s in seeds]
    kept, anns, imgs = [], [], []
    for s in seeds:
        try:
            img, gts = generate_scene(s, cfg)
        except GenerationError as exc:
            log.warning("skipping seed: %s", exc)
            continue
        kept.append(s)
        anns.append(gts)
        imgs.append(img)
    images = np.stack(imgs) if imgs else np.zeros((0, 1, *cfg.image_size))
    return Dataset(cfg, kept, anns, images)


def write_dataset(path: str | Path, seeds: Iterable[int], cfg: SceneConfig) -> Dataset:
    """Write a JSON-lines dataset: one header line, then one record per scene."""
    ds = build_dataset(seeds, cfg)
    h = cfg.hash()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {"schema": SCHEMA_VERSION, "kind": "header", "config": cfg.to_json(), "config_hash": h}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for seed, gts in zip(ds.seeds, ds.annotations):
            rec = {
                "schema": SCHEMA_VERSION,
                "kind": "scene",
                "seed": seed,
                "config_hash": h,
                "annotations": [g.to_json() for g in gts],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return ds


def read_dataset(path: str | Path, expected: SceneConfig | None = None) -> Dataset:
    path = Path(path)
    cfg = None
    seeds, anns = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec.get("schema") != SCHEMA_VERSION:
                    raise DatasetError(f"{path}:{lineno}: unsupported schema {rec.get('schema')!r}")
                if rec["kind"] == "header":
                    cfg = SceneConfig.from_json(rec["config"])
                    if cfg.hash() != rec["config_hash"]:
                        raise DatasetError(f"{path}:{lineno}: header config hash mismatch")
                    if expected is not None and expected.hash() != cfg.hash():
                        raise DatasetError(f"{path}:{lineno}: dataset config differs from expected config")
                    continue
                if cfg is None:
                    raise DatasetError(f"{path}:{lineno}: scene record before header")
                if rec["config_hash"] != cfg.hash():
                    raise DatasetError(f"{path}:{lineno}: config hash mismatch")
                seeds.append(int(rec["seed"]))
                anns.append([GroundTruth.from_json(a) for a in rec["annotations"]])
            except DatasetError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: cannot parse record: {exc}") from exc
    if cfg is None:
        raise DatasetError(f"{path}: missing header")
    return Dataset(cfg, seeds, anns)
