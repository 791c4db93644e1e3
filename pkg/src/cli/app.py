"""Command-line front end: argument parsing, dispatch, exit codes and run manifests."""

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from src.core.config import ModelConfig, RunConfig
from src.core.exceptions import (
    ConfigError,
    DataError,
    SamplingError,
    SelfTestFailure,
    SeqPlaceError,
    TrainingError,
)

from . import commands

logger = logging.getLogger(__name__)

VERSION = "0.3.0"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_SELFTEST = 3


class _Parser(argparse.ArgumentParser):
    """Parser that reports usage errors as exceptions instead of exiting."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqplace", description="Sequence-based LiDAR place recognition")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--preset", choices=["desk", "full"], default="desk",
                        help="configuration used when --config is not given")
    parser.add_argument("--workers", type=int, default=1, help="worker threads (1 is reproducible)")
    parser.add_argument("--seed", type=int, help="overrides train.seed and data.synthetic_seed")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")

    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    sub.add_parser("project", help="project every scan to a range image")
    sub.add_parser("label", help="build the overlap table")

    train = sub.add_parser("train", help="run a training phase")
    train.add_argument("--phase", type=int, choices=[1, 2], required=True)
    train.add_argument("--resume", action="store_true", help="continue from the phase checkpoint")
    train.add_argument("--epochs", type=int, help="override the configured epoch count")

    describe = sub.add_parser("describe", help="compute global descriptors")
    describe.add_argument("--stream", action="store_true", help="one single-scan forward per incoming scan")
    describe.add_argument("--weights", type=Path, help="checkpoint (default: phase2.sqwt, then phase1.sqwt)")

    sub.add_parser("index", help="build the database descriptor index")

    query = sub.add_parser("query", help="retrieve the nearest database places")
    query.add_argument("--top-k", type=int, default=20)
    query.add_argument("--scan", type=int, action="append", help="query scan id (repeatable)")

    evaluate = sub.add_parser("eval", help="recall and precision-recall report")
    evaluate.add_argument("--yaw-sweep", action="store_true", help="also report AR@1 under query yaw rotations")
    evaluate.add_argument("--seq-sweep", action="store_true", help="also report AR@1 per sequence length")

    bench = sub.add_parser("bench", help="latency and parameter count")
    bench.add_argument("--repeats", type=int, default=20)
    bench.add_argument("--index-size", type=int, default=10_000)

    sub.add_parser("selftest", help="run the invariance and gradient self-test suite")
    return parser


def load_config(args) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    elif args.preset == "full":
        cfg = RunConfig(model=ModelConfig.full()).validate()
    else:
        cfg = RunConfig.desk().validate()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.data.synthetic_seed = args.seed
    if args.workers < 1:
        raise ConfigError(f"--workers must be at least 1, got {args.workers}")
    return cfg


def write_run_manifest(ctx: 'commands.Context', argv: Sequence[str], elapsed: float):
    """Record everything needed to reproduce the command's outputs."""
    inputs: Dict[str, str] = {}
    for path in sorted(set(ctx.inputs)):
        if Path(path).is_file():
            inputs[str(path)] = commands.file_hash(Path(path))
    manifest = {
        'command': ctx.command,
        'argv': list(argv),
        'version': VERSION,
        'python': platform.python_version(),
        'config': ctx.cfg.to_dict(),
        'config_hash': ctx.cfg.config_hash(),
        'seed': ctx.cfg.train.seed,
        'workers': ctx.workers,
        'inputs': inputs,
        'outputs': sorted(str(p) for p in set(ctx.outputs)),
        'elapsed_s': round(elapsed, 3),
    }
    path = ctx.out / f"run_{ctx.command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')


def run(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
    except SystemExit as e:  # --help and --version
        return int(e.code or 0)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    ctx = commands.Context(command=args.command, cfg=cfg, out=args.out, workers=args.workers, args=args)
    started = time.perf_counter()
    try:
        ctx.out.mkdir(parents=True, exist_ok=True)
        commands.COMMANDS[args.command](ctx)
        write_run_manifest(ctx, argv, time.perf_counter() - started)
    except SelfTestFailure as e:
        print(f"selftest failed: {e}", file=sys.stderr)
        return EXIT_SELFTEST
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SamplingError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SeqPlaceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK
