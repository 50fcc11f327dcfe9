"""Run orchestration shared by the CLI and the acceptance suite.

Every run writes a manifest, a per-iteration loss CSV, a periodic evaluation
CSV and a checkpoint into its own directory. A run whose manifest already
records the same configuration and code version is loaded instead of retrained
when ``resume`` is set.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .assignment import FcosAssignerConfig, O2OAssignerConfig
from .detector import Model, ModelConfig, load_checkpoint, save_checkpoint
from .evaluator import recall_after_nms_on_gt, recall_ceiling_topk
from .losses import LossReport
from .scenegen import Dataset, SceneConfig, build_dataset, read_dataset, write_dataset
from .train import TrainConfig, TrainResult, evaluate_model, predict, train

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
LOSS_CSV_SCHEMA = 1
EVAL_CSV_SCHEMA = 1
LOSS_FIELDS = tuple(f.name for f in dataclasses.fields(LossReport))

DEFAULT_TRAIN_SCENES = 2000
DEFAULT_TEST_SCENES = 500
TEST_SEED_OFFSET = 1_000_000
DEFAULT_LAMBDA_GRID = (
    (1.0, 0.5),
    (1.0, 1.0),
    (1.0, 2.0),
    (1.0, 4.0),
    (0.5, 1.0),
    (2.0, 1.0),
    (4.0, 1.0),
)


def output_root() -> Path:
    return Path(os.environ.get("DUALASSIGN_OUT", "runs"))


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def default_datasets(
    n_train: int = DEFAULT_TRAIN_SCENES,
    n_test: int = DEFAULT_TEST_SCENES,
    seed: int = 0,
    cfg: SceneConfig = SceneConfig(),
) -> tuple[Dataset, Dataset]:
    base = seed * 10 * TEST_SEED_OFFSET
    train_ds = build_dataset(range(base, base + n_train), cfg)
    test_ds = build_dataset(range(base + TEST_SEED_OFFSET, base + TEST_SEED_OFFSET + n_test), cfg)
    return train_ds, test_ds


def generate_data(out: Path, n_train: int, n_test: int, seed: int, cfg: SceneConfig) -> dict[str, Path]:
    out = Path(out)
    base = seed * 10 * TEST_SEED_OFFSET
    paths = {"train": out / "train.jsonl", "test": out / "test.jsonl"}
    write_dataset(paths["train"], range(base, base + n_train), cfg)
    write_dataset(paths["test"], range(base + TEST_SEED_OFFSET, base + TEST_SEED_OFFSET + n_test), cfg)
    return paths


def load_datasets(data_dir: Path) -> tuple[Dataset, Dataset]:
    data_dir = Path(data_dir)
    missing = [p for p in ("train.jsonl", "test.jsonl") if not (data_dir / p).exists()]
    if missing:
        raise FileNotFoundError(f"{data_dir}: missing {', '.join(missing)} (run gen-data first)")
    return read_dataset(data_dir / "train.jsonl"), read_dataset(data_dir / "test.jsonl")


# ---------------------------------------------------------------------------
# config (de)serialisation
# ---------------------------------------------------------------------------


def train_config_to_json(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["fcos"]["regress_ranges"] = [[lo, "inf" if hi == float("inf") else hi] for lo, hi in cfg.fcos.regress_ranges]
    return d


def train_config_from_json(d: dict) -> TrainConfig:
    d = dict(d)
    f = dict(d.pop("fcos"))
    f["regress_ranges"] = tuple((float(lo), float(hi)) for lo, hi in f["regress_ranges"])
    o2o = O2OAssignerConfig(**d.pop("o2o"))
    return TrainConfig(**d, fcos=FcosAssignerConfig(**f), o2o=o2o)


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    """What a finished run leaves behind, whether freshly trained or loaded."""

    config: TrainConfig
    losses: list[dict]
    evals: list[dict]
    positives: dict[str, float]
    out_dir: Path | None = None
    model: Model | None = None

    def final_ap50(self, head: str = "o2o", nms: bool = False) -> float:
        rows = self.eval_curve(head, nms)
        return rows[-1][1] if rows else float("nan")

    def eval_curve(self, head: str = "o2o", nms: bool = False, metric: str = "AP50") -> list[tuple[int, float]]:
        return [(int(r["iteration"]), float(r[metric])) for r in self.evals if r["head"] == head and _truthy(r["nms"]) == nms]

    def loss_series(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.losses])


def _truthy(v) -> bool:
    return v is True or str(v).lower() in ("true", "1", "on")


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(path: Path, command: str, config: dict, seed: int | None, outputs: dict, started: float, extra: dict | None = None) -> dict:
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "config": config,
        "seed": seed,
        "version": code_version(),
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "seconds": round(time.time() - started, 3),
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _summarise_positives(res: TrainResult) -> dict[str, float]:
    return {k: float(np.mean(v)) for k, v in res.positives.items() if v}


def run_training(
    cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset | None,
    out_dir: Path | None = None,
    resume: bool = False,
    model_cfg: ModelConfig | None = None,
    on_assign=None,
) -> RunRecord:
    """Train one configuration and persist its artefacts under ``out_dir``."""
    model_cfg = model_cfg or ModelConfig.for_regime(cfg.regime)
    cfg_json = {"train": train_config_to_json(cfg), "model": model_cfg.to_json(), "train_data": train_ds.config.hash(), "n_train": len(train_ds)}
    if out_dir is not None and resume and on_assign is None:
        rec = load_run(out_dir, expect=cfg_json)
        if rec is not None:
            log.info("reusing %s", out_dir)
            return rec
    started = time.time()
    res = train(cfg, train_ds, test_ds, model_cfg, on_assign=on_assign)
    losses = [{"schema": LOSS_CSV_SCHEMA, "iteration": i, **r.as_dict()} for i, r in enumerate(res.losses, start=1)]
    evals = [{"schema": EVAL_CSV_SCHEMA, **{k: v for k, v in e.items() if k != "schema"}} for e in res.evals]
    positives = _summarise_positives(res)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"losses": out_dir / "losses.csv", "evals": out_dir / "evals.csv", "checkpoint": out_dir / "model.npz"}
        _write_csv(paths["losses"], ("schema", "iteration") + LOSS_FIELDS, losses)
        if evals:
            _write_csv(paths["evals"], list(evals[0]), evals)
        save_checkpoint(res.model, paths["checkpoint"], {"train": cfg_json["train"]})
        write_manifest(out_dir / "manifest.json", "train", cfg_json, cfg.seed, paths, started, {"positives": positives})
    return RunRecord(cfg, losses, evals, positives, out_dir, res.model)


def load_run(out_dir: Path, expect: dict | None = None) -> RunRecord | None:
    """A previously written run, or None if absent or made from other config or code."""
    out_dir = Path(out_dir)
    mf = out_dir / "manifest.json"
    if not mf.exists():
        return None
    manifest = json.loads(mf.read_text())
    if manifest.get("version") != code_version():
        return None
    if expect is not None and manifest.get("config") != json.loads(json.dumps(expect)):
        return None
    losses = _read_csv(out_dir / "losses.csv")
    evals = _read_csv(out_dir / "evals.csv") if (out_dir / "evals.csv").exists() else []
    model, _ = load_checkpoint(out_dir / "model.npz")
    cfg = train_config_from_json(manifest["config"]["train"])
    return RunRecord(cfg, losses, evals, manifest.get("positives", {}), out_dir, model)


# ---------------------------------------------------------------------------
# multi-run experiments
# ---------------------------------------------------------------------------


def _job(args):
    cfg, train_seeds, test_seeds, scene_cfg, out_dir, resume = args
    train_ds = build_dataset(train_seeds, scene_cfg)
    test_ds = build_dataset(test_seeds, scene_cfg)
    rec = run_training(cfg, train_ds, test_ds, out_dir, resume)
    rec.model = None
    return rec


def run_many(configs: Sequence[TrainConfig], train_ds: Dataset, test_ds: Dataset, out_root: Path | None, jobs: int = 1, resume: bool = False) -> list[RunRecord]:
    dirs = [None if out_root is None else Path(out_root) / run_name(c) for c in configs]
    if jobs <= 1 or len(configs) <= 1:
        return [run_training(c, train_ds, test_ds, d, resume) for c, d in zip(configs, dirs)]
    args = [(c, train_ds.seeds, test_ds.seeds, train_ds.config, d, resume) for c, d in zip(configs, dirs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_job, args))


def run_name(cfg: TrainConfig) -> str:
    lam = ""
    if cfg.lambda_o2o is not None or cfg.lambda_o2m is not None:
        w = cfg.loss_weights()
        lam = f"_l{w.lambda_o2o:g}-{w.lambda_o2m:g}"
    return f"{cfg.regime}{lam}_s{cfg.seed}_it{cfg.iterations}"


def iterations_to_reach(curve: Sequence[tuple[int, float]], target: float) -> int | None:
    """First evaluated iteration whose metric reaches ``target``."""
    for it, v in curve:
        if v >= target:
            return it
    return None


def compare_table(records: Sequence[RunRecord]) -> list[dict]:
    """Per-run rows plus one aggregate (mean and sd) row per regime."""
    rows = []
    for r in records:
        rows.append(
            {
                "regime": r.config.regime,
                "seed": r.config.seed,
                "iterations": r.config.iterations,
                "AP50": 100 * r.final_ap50(),
                "AP": 100 * r.eval_curve(metric="AP")[-1][1] if r.eval_curve() else float("nan"),
            }
        )
    for regime in dict.fromkeys(r["regime"] for r in rows):
        sub = [r for r in rows if r["regime"] == regime]
        agg = {"regime": regime, "seed": "mean", "iterations": sub[0]["iterations"]}
        for m in ("AP50", "AP"):
            vals = [r[m] for r in sub]
            agg[m] = statistics.fmean(vals)
            agg[f"{m}_sd"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        rows.append(agg)
    return rows


def convergence_summary(baseline: Sequence[RunRecord], dual: Sequence[RunRecord]) -> dict:
    """Final-AP50 gap and the fraction of iterations the dual runs need to hit the baseline's final AP50."""
    base_final = statistics.fmean(100 * r.final_ap50() for r in baseline)
    dual_final = statistics.fmean(100 * r.final_ap50() for r in dual)
    its = dual[0].config.iterations
    grid = [it for it, _ in dual[0].eval_curve()]
    mean_curve = [(it, statistics.fmean(100 * dict(r.eval_curve())[it] for r in dual)) for it in grid]
    reach = iterations_to_reach(mean_curve, base_final)
    return {
        "baseline_AP50": base_final,
        "dual_AP50": dual_final,
        "gap": dual_final - base_final,
        "iterations_to_reach": reach,
        "fraction_to_reach": None if reach is None else reach / its,
    }


def median_smooth(values: Sequence[float], window: int = 101) -> np.ndarray:
    """Centred running median; the window shrinks at the ends."""
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    return np.array([np.median(v[max(0, i - half) : i + half + 1]) for i in range(len(v))])


def sweep_configs(grid: Sequence[tuple[float, float]], seed: int, iterations: int, regime: str = "dual-f", **kw) -> list[TrainConfig]:
    return [TrainConfig(regime=regime, seed=seed, iterations=iterations, lambda_o2o=a, lambda_o2m=b, **kw) for a, b in grid]


def sweep_table(records: Sequence[RunRecord]) -> list[dict]:
    out = []
    for r in records:
        w = r.config.loss_weights()
        ap = r.eval_curve(metric="AP")
        out.append({"lambda_o2o": w.lambda_o2o, "lambda_o2m": w.lambda_o2m, "AP50": 100 * r.final_ap50(), "AP": 100 * ap[-1][1] if ap else float("nan")})
    return out


def crowd_recall(ds: Dataset, nms_iou: float = 0.5, model: Model | None = None, head: str = "o2o", topk: int = 100) -> dict:
    """NMS recall ceiling on the annotations themselves, and optionally a model's recall with and without NMS."""
    out = {
        "gt_nms_recall": recall_after_nms_on_gt(ds.annotations, nms_iou),
        "topk_ceiling": recall_ceiling_topk(ds.annotations, topk),
    }
    if model is not None:
        for use_nms in (False, True):
            res = evaluate_model(model, ds, head, use_nms, nms_iou=nms_iou, topk=topk)
            out[f"model_recall_{'nms' if use_nms else 'topk'}"] = res.recall
    return out


def write_rows(path: Path, rows: Sequence[dict]) -> None:
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


__all__ = [
    "DEFAULT_LAMBDA_GRID",
    "RunRecord",
    "compare_table",
    "convergence_summary",
    "crowd_recall",
    "default_datasets",
    "generate_data",
    "load_datasets",
    "median_smooth",
    "output_root",
    "predict",
    "run_many",
    "run_training",
    "sweep_configs",
    "sweep_table",
]
