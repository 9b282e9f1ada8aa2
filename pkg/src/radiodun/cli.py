"""Command-line entry point: ``radiodun <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import AppConfig, ConfigError, DatasetSpec, SyntheticSource, load_config, parse_override
from .data import DatasetError, make_synthetic, write_scene_tree
from .plots import plot_curves
from .training import evaluate, load_checkpoint, make_dirs, read_log, run_baseline, train, transfer

log = logging.getLogger("radiodun")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="YAML/JSON config file")
    p.add_argument("--seed", type=int, help="overrides dataset.seed and run.seed")
    p.add_argument("--out-dir", type=Path, default=Path("runs/default"), help="output root (default: runs/default)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. run.epochs=5 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="radiodun", description="Sparse-sample radio map estimation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene tree")
    p.add_argument("--count", type=int, help="number of scenes")

    p = sub.add_parser("train", parents=[common], help="train the unfolding network")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--panels", type=int, default=0, help="render this many prediction panels")

    p = sub.add_parser("transfer", parents=[common], help="fine-tune a checkpoint on the configured dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--epochs", type=int, default=20)

    p = sub.add_parser("baseline", parents=[common], help="run the classical alternating-optimization solver")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = sub.add_parser("plot", parents=[common], help="plot training curves from CSV logs")
    p.add_argument("--log", dest="logs", type=Path, action="append", required=True)
    p.add_argument("--label", dest="labels", action="append", default=[])
    p.add_argument("--metric", default="val_rmse")
    return parser


def _config(args, extra: dict | None = None) -> AppConfig:
    overrides = dict(parse_override(item) for item in args.overrides)
    if args.seed is not None:
        overrides.setdefault("dataset.seed", args.seed)
        overrides.setdefault("run.seed", args.seed)
    overrides.update(extra or {})
    return load_config(args.config, overrides)


def _dataset_for_checkpoint(args, cfg: AppConfig) -> DatasetSpec:
    """Without ``--config`` the dataset recorded in the checkpoint is reused."""
    if args.config is not None or any(o.startswith("dataset.") for o in args.overrides):
        return cfg.dataset
    stored = load_checkpoint(args.checkpoint).get("dataset_spec")
    if stored is None:
        return cfg.dataset
    spec = DatasetSpec.model_validate_json(stored)
    return spec.model_copy(update={"seed": args.seed}) if args.seed is not None else spec


def _print_report(report):
    print(report.model_dump_json(indent=2))


def cmd_synth(args) -> int:
    extra = {"dataset.source.count": args.count} if args.count is not None else {}
    cfg = _config(args, extra)
    src = cfg.dataset.source
    if not isinstance(src, SyntheticSource):
        raise ConfigError(["dataset.source.kind: synth needs a synthetic source"])
    records = make_synthetic(src.generator, src.count, cfg.dataset.seed)
    out = write_scene_tree(records, Path(args.out_dir) / "scenes")
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, {"run.epochs": args.epochs} if args.epochs is not None else {})
    result = train(cfg.run, cfg.dataset, args.out_dir, resume=args.resume)
    print(json.dumps({"best": str(result.best), "last": str(result.last), "log": str(result.log)}, indent=2))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    spec = _dataset_for_checkpoint(args, cfg)
    _print_report(evaluate(args.checkpoint, spec, args.split, args.out_dir, panels=args.panels))
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    run = cfg.run if args.config is not None else None
    ckpt, report = transfer(args.checkpoint, cfg.dataset, args.fraction, args.epochs, run=run,
                            out_dir=args.out_dir)
    print(ckpt)
    _print_report(report)
    return 0


def cmd_baseline(args) -> int:
    cfg = _config(args)
    _print_report(run_baseline(cfg.dataset, cfg.baseline, args.split, args.out_dir))
    return 0


def cmd_plot(args) -> int:
    labels = args.labels or [p.stem for p in args.logs]
    if len(labels) != len(args.logs):
        raise ConfigError(["--label must be given once per --log"])
    path = plot_curves({lab: read_log(p) for lab, p in zip(labels, args.logs)},
                       make_dirs(args.out_dir)["plots"] / f"curves_{args.metric}.png", args.metric)
    print(path)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "transfer": cmd_transfer,
            "baseline": cmd_baseline, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (DatasetError, FileNotFoundError, ValueError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
