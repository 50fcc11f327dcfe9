"""Command-line entry point: ``python -m dualassign <command>``.

Errors exit with status 1 after printing one JSON object on stderr:
``{"error": <exception type>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import experiments as ex
from .detector import REGIMES, load_checkpoint
from .evaluator import write_result
from .pareto import ObjectivePoint, argmin_weighted, pareto_front, utopia_point
from .postprocess import DEFAULT_NMS_IOU, DEFAULT_TOPK
from .scenegen import Dataset, SceneConfig, read_dataset
from .train import TrainConfig, evaluate_model


def _csv_list(kind):
    def parse(text: str):
        return [kind(t) for t in text.split(",") if t.strip()]

    return parse


def _lambda_grid(text: str) -> list[tuple[float, float]]:
    """``"1:0.5,1:1"`` -> [(1.0, 0.5), (1.0, 1.0)] as (lambda_o2o, lambda_o2m)."""
    grid = []
    for item in text.split(","):
        a, b = item.split(":")
        grid.append((float(a), float(b)))
    return grid


def _out_dir(args, default: str) -> Path:
    return Path(args.out) if args.out else ex.output_root() / default


def _load_split(path: str, split: str = "test") -> Dataset:
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    return read_dataset(p)


def _scene_config(args) -> SceneConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.crowd:
        base["crowd_mode"] = True
    return SceneConfig.from_json({**SceneConfig().to_json(), **base})


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    w = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: f"{v:.2f}" if isinstance(v, float) else v for k, v in r.items()})


def _train_kwargs(args) -> dict:
    return {"batch_size": args.batch_size, "eval_interval": args.eval_interval, "lr_step": args.lr_step}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = _scene_config(args)
    out = Path(args.out) if args.out else ex.output_root() / ("data-crowd" if cfg.crowd_mode else "data")
    paths = ex.generate_data(out, args.scenes, args.test_scenes, args.seed, cfg)
    ex.write_manifest(out / "manifest.json", "gen-data", {"scene": cfg.to_json(), "scenes": args.scenes, "test_scenes": args.test_scenes}, args.seed, paths, started)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_train(args) -> int:
    train_ds, test_ds = ex.load_datasets(Path(args.data))
    cfg = TrainConfig(
        regime=args.regime,
        iterations=args.iters,
        seed=args.seed,
        lambda_o2o=args.lambda_o2o,
        lambda_o2m=args.lambda_o2m,
        **_train_kwargs(args),
    )
    out = _out_dir(args, ex.run_name(cfg))
    rec = ex.run_training(cfg, train_ds, test_ds, out)
    for head in ("o2o", "o2m"):
        nms = head == "o2m"
        if rec.eval_curve(head, nms):
            print(f"{head} (nms {'on' if nms else 'off'}): final AP50 {100 * rec.final_ap50(head, nms):.1f}")
    print(f"artefacts in {out}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    model, meta = load_checkpoint(args.checkpoint)
    if args.head not in model.cfg.heads:
        raise ValueError(f"checkpoint has no {args.head} head (heads: {', '.join(model.cfg.heads)})")
    ds = _load_split(args.data, "test")
    use_nms = args.nms == "on"
    res = evaluate_model(model, ds, args.head, use_nms, nms_iou=args.nms_thr, topk=args.topk)
    print(res.summary())
    out = _out_dir(args, f"eval-{Path(args.checkpoint).stem}-{args.head}-nms{args.nms}")
    write_result(res, out / "result.json", out / "result.csv")
    ex.write_manifest(out / "manifest.json", "eval", {k: v for k, v in vars(args).items() if k != "func"}, None, {"json": out / "result.json", "csv": out / "result.csv"}, started)
    return 0


def cmd_compare(args) -> int:
    started = time.time()
    train_ds, test_ds = ex.load_datasets(Path(args.data))
    configs = [TrainConfig(regime=r, seed=s, iterations=args.iters, **_train_kwargs(args)) for r in args.regimes for s in args.seeds]
    out = _out_dir(args, "compare")
    records = ex.run_many(configs, train_ds, test_ds, out, args.jobs, args.resume)
    rows = ex.compare_table(records)
    ex.write_rows(out / "summary.csv", rows)
    _print_rows(rows)
    ex.write_manifest(out / "manifest.json", "compare", {k: v for k, v in vars(args).items() if k != "func"}, None, {"summary": out / "summary.csv"}, started)
    return 0


def cmd_sweep_lambda(args) -> int:
    started = time.time()
    train_ds, test_ds = ex.load_datasets(Path(args.data))
    configs = ex.sweep_configs(args.grid, args.seed, args.iters, **_train_kwargs(args))
    out = _out_dir(args, "sweep-lambda")
    records = ex.run_many(configs, train_ds, test_ds, out, args.jobs, args.resume)
    rows = ex.sweep_table(records)
    ex.write_rows(out / "sweep.csv", rows)
    _print_rows(rows)
    ex.write_manifest(out / "manifest.json", "sweep-lambda", {k: v for k, v in vars(args).items() if k != "func"}, args.seed, {"table": out / "sweep.csv"}, started)
    return 0


def cmd_crowd_recall(args) -> int:
    ds = _load_split(args.data, "test")
    model = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    res = ex.crowd_recall(ds, args.nms_thr, model, args.head, args.topk)
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_pareto_demo(args) -> int:
    with open(args.input, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{args.input}: empty file")
    header = rows[0]
    has_header = any(not _is_number(c) for c in header)
    body = rows[1:] if has_header else rows
    labelled = has_header and header[0].strip().lower() in ("id", "name", "label")
    points = []
    for i, r in enumerate(body):
        if labelled:
            points.append(ObjectivePoint(tuple(float(v) for v in r[1:]), r[0]))
        else:
            points.append(ObjectivePoint(tuple(float(v) for v in r), str(i)))
    front = pareto_front(points)
    result = {
        "utopia": list(utopia_point(points)),
        "front": [{"id": p.payload, "values": list(p.values)} for p in front],
    }
    if args.weights:
        best = argmin_weighted(points, args.weights)
        result["argmin_weighted"] = {"id": best.payload, "values": list(best.values)}
    print(json.dumps(result))
    return 0


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--eval-interval", type=int, default=300)
    p.add_argument("--lr-step", action="store_true", help="decay the learning rate x0.1 at 8/12 and 11/12 of training")
    p.add_argument("--data", default=str(ex.output_root() / "data"), help="directory holding train.jsonl and test.jsonl")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualassign", description="Dual label assignment experiments on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render synthetic train/test scenes")
    p.add_argument("--out")
    p.add_argument("--scenes", type=int, default=ex.DEFAULT_TRAIN_SCENES)
    p.add_argument("--test-scenes", type=int, default=ex.DEFAULT_TEST_SCENES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crowd", action="store_true")
    p.add_argument("--config", help="JSON file with scene config overrides")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one regime")
    p.add_argument("--regime", choices=sorted(REGIMES), default="dual-f")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-o2o", type=float)
    p.add_argument("--lambda-o2m", type=float)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=str(ex.output_root() / "data"))
    p.add_argument("--head", choices=("o2o", "o2m"), default="o2o")
    p.add_argument("--nms", choices=("off", "on"), default="off")
    p.add_argument("--nms-thr", type=float, default=DEFAULT_NMS_IOU)
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train regimes over seeds and tabulate AP")
    p.add_argument("--regimes", type=_csv_list(str), default=["o2o", "dual-f"])
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="reuse finished runs with identical config and code")
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-lambda", help="train dual-f over a grid of branch weights")
    p.add_argument("--grid", type=_lambda_grid, default=list(ex.DEFAULT_LAMBDA_GRID), help='comma list of "lambda_o2o:lambda_o2m"')
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("crowd-recall", help="recall lost to NMS on crowded scenes")
    p.add_argument("--data", default=str(ex.output_root() / "data-crowd"))
    p.add_argument("--nms-thr", type=float, default=0.5)
    p.add_argument("--checkpoint")
    p.add_argument("--head", choices=("o2o", "o2m"), default="o2o")
    p.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    p.set_defaults(func=cmd_crowd_recall)

    p = sub.add_parser("pareto-demo", help="Pareto front and utopia point of a CSV of objective vectors")
    p.add_argument("input")
    p.add_argument("--weights", type=_csv_list(float))
    p.set_defaults(func=cmd_pareto_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
