"""Command-line entry point: ``sgdlines <command> [flags]``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
numeric or integrity failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import CapabilityError, FormatError, IntegrityError, NumericError, SpecificationError

COMMANDS = ("train", "scan", "fan", "analyze", "strategies", "batchsize", "report")
STAGE_DIR = {"train": "trajectory", "scan": "scans", "fan": "fan", "analyze": "analysis",
             "strategies": "strategies", "batchsize": "batchsize", "report": "report"}

# flag dest -> config key
FLAG_KEYS = {"seed": "seed", "threads": "threads", "stride": "stride", "grid_lo": "grid_lo",
             "grid_hi": "grid_hi", "grid_res": "grid_res", "window": "window", "lrs": "lrs",
             "mu": "mu", "kernel": "kernel", "per_sample": "per_sample",
             "granularity": "granularity"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("--seed", type=str)
    common.add_argument("--threads", type=str, help="worker threads (overrides $SGDLINES_THREADS)")
    common.add_argument("--stride", type=str)
    common.add_argument("--grid-lo", dest="grid_lo", type=str)
    common.add_argument("--grid-hi", dest="grid_hi", type=str)
    common.add_argument("--grid-res", dest="grid_res", type=str)
    common.add_argument("--window", type=str, help="lo,hi or auto")
    common.add_argument("--lrs", type=str, help="comma-separated learning rates")
    common.add_argument("--mu", type=str)
    common.add_argument("--kernel", type=str, help="smoothing kernel (odd, default 25)")
    common.add_argument("--per-sample", dest="per_sample", action="store_const", const="true",
                        help="keep per-sample loss matrices on every scanned step")
    common.add_argument("--granularity", choices=("full", "per_batch", "per_sample"))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    common.add_argument("--dry-run", action="store_true", help="print the resolved config only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sgdlines",
                                     description="Measure and analyse losses along SGD update lines.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and record a trajectory")
    p = sub.add_parser("scan", parents=[common], help="scan lines of a recorded trajectory")
    p.add_argument("--trajectory", type=Path, help="trajectory directory (default <out>/trajectory)")
    p = sub.add_parser("fan", parents=[common], help="scan several noisy directions at one step")
    p.add_argument("--trajectory", type=Path)
    for name, text in (("analyze", "distance matrix, fits and step proportionality"),
                       ("strategies", "compare step-size rules on the scanned lines"),
                       ("batchsize", "simulated batch-size studies from per-sample slopes")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--scans", type=Path, help="scan archive directory (default <out>/scans)")
        if name != "analyze":
            p.add_argument("--trajectory", type=Path)
    p = sub.add_parser("report", parents=[common], help="training figures and report index")
    p.add_argument("--compare", type=Path, help="second run directory for a side-by-side plot")
    return parser


def resolve(args) -> dict:
    file_values = {}
    if args.config is not None:
        if not args.config.exists():
            raise SpecificationError(f"config file {args.config} not found")
        file_values = pipeline.parse_config_text(args.config.read_text())
    overrides = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items()}
    if args.per_sample:
        overrides["per_sample_every"] = "1"
    for item in args.set:
        if "=" not in item:
            raise SpecificationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return pipeline.resolve_config(file_values, overrides)


def run(args) -> int:
    cfg = resolve(args)
    if args.dry_run:
        sys.stdout.write(pipeline.format_config(cfg))
        return 0
    out = args.out
    cmd = args.command
    if cmd == "train":
        pipeline.run_train(cfg, out)
    elif cmd == "scan":
        pipeline.run_scan(cfg, out, args.trajectory)
    elif cmd == "fan":
        pipeline.run_fan(cfg, out, args.trajectory)
    elif cmd == "analyze":
        pipeline.run_analyze(cfg, out, args.scans)
    elif cmd == "strategies":
        pipeline.run_strategies(cfg, out, args.scans, args.trajectory)
    elif cmd == "batchsize":
        pipeline.run_batchsize(cfg, out, args.scans, args.trajectory)
    else:
        pipeline.run_report(cfg, out, args.compare)
    stage = Path(out) / STAGE_DIR[cmd]
    stage.mkdir(parents=True, exist_ok=True)
    (stage / "stage.cfg").write_text(pipeline.format_config(cfg))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (NumericError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SpecificationError, FormatError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
