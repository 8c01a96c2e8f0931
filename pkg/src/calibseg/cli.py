"""Command-line entry point: ``calibseg {generate-data,train,eval,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .datagen import generate_dataset, load_dataset, save_dataset
from .errors import CalibsegError
from .harness import TrainConfig, evaluate, train
from .metrics import MetricsReport
from .model import load_checkpoint
from .report import emit_tables, format_table, render_sample_grid, render_uncertainty_panel
from .uncertainty import binarize_samples, decompose, draw_samples


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _size(text: str):
    parts = text.lower().replace("x", ",").split(",")
    return int(parts[0]) if len(parts) == 1 else (int(parts[0]), int(parts[1]))


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.replace(" ", "").split(",") if s]


def _add_config_overrides(parser: argparse.ArgumentParser):
    for f in dataclasses.fields(TrainConfig):
        kind = {"int": int, "float": float, "bool": _bool}.get(str(f.type).split(" ")[0], str)
        parser.add_argument(f"--{f.name}", type=kind, default=None, help=f"override TrainConfig.{f.name}")


def cmd_generate(args):
    ds = generate_dataset(args.n, args.graders, args.disagreement, args.size, args.seed)
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images to {path}")


def cmd_train(args):
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)}
    if args.config:
        config = TrainConfig.from_json(args.config, **overrides)
    else:
        profile = overrides.pop("profile") or "desk"
        config = TrainConfig.from_profile(profile, **overrides)
    result = train(config)
    last = [r for r in result.history if r["split"] == "train"][-1]
    print(f"best checkpoint: {result.checkpoint}")
    print(f"training log: {result.log_path}")
    print("final train losses: " + ", ".join(f"{k}={v:.4g}" for k, v in last.items() if k not in ("epoch", "split")))


def cmd_eval(args):
    report = evaluate(args.checkpoint, args.split, _seeds(args.seeds), dataset=args.dataset,
                      samples=args.samples, out_dir=args.out, name=args.name)
    print(format_table([report]))


def cmd_report(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.reports:
        reports = [MetricsReport.from_json(p) for p in args.reports]
        csv_path, json_path = emit_tables(reports, out / "tables")
        print(format_table(reports))
        print(f"tables: {csv_path}, {json_path}")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        sidecar = json.loads(Path(str(args.checkpoint) + ".json").read_text())
        dataset = args.dataset or sidecar.get("train_config", {}).get("dataset")
        if not dataset:
            raise CalibsegError("pass --dataset; the checkpoint does not record one")
        items = load_dataset(dataset).subset(args.split).items[:args.figures]
        generator = torch.Generator().manual_seed(args.seed)
        for it in items:
            samples = draw_samples(model, it.image.pixels, args.samples, generator)
            render_sample_grid(it.image.pixels, list(it.annotations.masks), binarize_samples(samples)[:args.grid_samples],
                               out / f"{it.id}_samples.png")
            u = decompose(samples)
            render_uncertainty_panel(it.image.pixels, it.stats.variance_map, u.aleatoric, u.epistemic,
                                     out / f"{it.id}_uncertainty.png")
        print(f"rendered {len(items)} figure pairs into {out}")
    if not args.reports and not args.checkpoint:
        raise CalibsegError("report needs --reports and/or --checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic multi-grader dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--graders", type=int, default=4)
    p.add_argument("--disagreement", type=float, default=0.5)
    p.add_argument("--size", type=_size, default=64, help="N or HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    _add_config_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (GED^2 and NCC)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seeds", default="0", help="comma-separated evaluation seeds")
    p.add_argument("--dataset", help="manifest; defaults to the one recorded in the checkpoint")
    p.add_argument("--samples", type=int, help="samples per image (default: s_eval of the run)")
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")
    p.add_argument("--name", help="model label in reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tables from eval reports and figures from a checkpoint")
    p.add_argument("--reports", nargs="*", default=[], help="JSON reports written by eval")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--figures", type=int, default=4)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--grid-samples", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CalibsegError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
