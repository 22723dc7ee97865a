"""Command line entry point: ``mlb-boot {gen-data,train,ablate,dump-weights} <cfg>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from .harness import ConfigError, dump_weight_maps, load_config, load_splits, run_ablation, run_experiment

log = logging.getLogger("mlb_boot")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _latest_checkpoint(output_dir: str) -> Path:
    found = sorted(Path(output_dir, "checkpoints").glob("*.pkl"), key=lambda p: p.stat().st_mtime_ns)
    if not found:
        raise ConfigError(f"no checkpoints under {output_dir}/checkpoints to resume from")
    return found[-1]


def cmd_gen_data(cfg, args) -> int:
    target = Path(cfg.data_dir or Path(cfg.output_dir) / "data")
    splits = load_splits(cfg.replace(data_dir=""))
    path = D.write_manifest(splits, target)
    print(f"wrote {', '.join(f'{k} ({len(v)})' for k, v in splits.items())} -> {path}")
    return 0


def cmd_train(cfg, args) -> int:
    resume = None
    if args.resume is not None:
        resume = _latest_checkpoint(cfg.output_dir) if args.resume == "latest" else Path(args.resume)
    metrics = run_experiment(cfg, resume=resume)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()))
    return 0


def cmd_ablate(cfg, args) -> int:
    table = run_ablation(cfg, args.seeds, workers=args.workers)
    for row in table:
        print(f"{row['config']:<18} dice {row['dice_mean']:.4f} +- {row['dice_std']:.4f}")
    print(f"wrote {Path(cfg.output_dir) / 'ablation.csv'}")
    return 0


def cmd_dump_weights(cfg, args) -> int:
    records = dump_weight_maps(cfg, args.steps)
    print(f"dumped {len(records)} steps to {Path(cfg.output_dir) / 'weights'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlb-boot", description="Meta-learned label bootstrapping for 2D segmentation.")
    parser.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", nargs="?", help="flat 'key = value' config file (defaults if omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic splits and a manifest")
    p = add("train", cmd_train, "run baseline, label initialisation and bootstrapped training")
    p.add_argument("--resume", nargs="?", const="latest", default=None, metavar="CHECKPOINT",
                   help="continue from a checkpoint (the newest one in output_dir if no path given)")
    p = add("ablate", cmd_ablate, "run the five-configuration component ablation")
    p.add_argument("--seeds", type=_int_list, required=True, help="e.g. 0,1,2")
    p.add_argument("--workers", type=int, default=None, help="parallel runs (default MLB_BOOT_THREADS or 1)")
    p = add("dump-weights", cmd_dump_weights, "save weight maps at chosen bootstrapping steps")
    p.add_argument("--steps", type=_int_list, required=True, help="e.g. 0,50,100")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return args.fn(cfg, args)
    except (ConfigError, D.FormatError, ValueError, FileNotFoundError) as exc:
        print(f"mlb-boot: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
