"""Command-line entry point for the full pipeline.

Subcommands run against one output directory and a shared YAML config:

    mmkd gen-data          --out DIR [--config PATH] [--seed N] [--set k=v]
    mmkd pretrain-encoders --out DIR ...
    mmkd train-teacher     --out DIR ...
    mmkd distill-student   --out DIR ... [--alpha A]
    mmkd train-baseline    --out DIR --variant {plain,enhanced} ...
    mmkd evaluate          --out DIR ...
    mmkd sweep             --out DIR ...
    mmkd ablate-alpha      --out DIR [--alphas 1.0,0.7,0.4,0.1] ...
    mmkd ablate-theta      --out DIR [--thetas 4,8,16] ...
    mmkd ablate-dropout    --out DIR [--rates 0,0.25,0.5] ...
    mmkd report            --out DIR ...

Exit codes: 0 success, 2 usage error (argparse), 3 invalid configuration,
4 missing upstream artifact, 5 training divergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config
from .training import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DIVERGED = 5


def _common_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="YAML config path (built-in defaults when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", type=Path, required=True, help="run output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="config override, repeatable")


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip() != ""]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmkd",
        description="Multimodal distillation pipeline robust to missing modalities",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("gen-data", "pretrain-encoders", "train-teacher", "evaluate",
                 "sweep", "report"):
        _common_args(sub.add_parser(name))

    p = sub.add_parser("distill-student")
    _common_args(p)
    p.add_argument("--alpha", type=float, default=None, help="mixing weight override")

    p = sub.add_parser("train-baseline")
    _common_args(p)
    p.add_argument("--variant", choices=("plain", "enhanced"), required=True)

    p = sub.add_parser("ablate-alpha")
    _common_args(p)
    p.add_argument("--alphas", type=_float_list, default=[1.0, 0.7, 0.4, 0.1])

    p = sub.add_parser("ablate-theta")
    _common_args(p)
    p.add_argument("--thetas", type=_int_list, default=[4, 8, 16])

    p = sub.add_parser("ablate-dropout")
    _common_args(p)
    p.add_argument("--rates", type=_float_list, default=[0.0, 0.25, 0.5])

    return parser


def run_command(args: argparse.Namespace) -> None:
    config = load_config(args.config, args.overrides, args.seed)
    out = args.out
    command = args.command
    if command == "gen-data":
        pipeline.stage_gen_data(config, out)
    elif command == "pretrain-encoders":
        pipeline.stage_pretrain_encoders(config, out)
    elif command == "train-teacher":
        pipeline.stage_train_teacher(config, out)
    elif command == "distill-student":
        pipeline.stage_distill_student(config, out, alpha=args.alpha)
    elif command == "train-baseline":
        pipeline.stage_train_baseline(config, out, args.variant)
    elif command == "evaluate":
        pipeline.stage_evaluate(config, out)
    elif command == "sweep":
        pipeline.stage_sweep(config, out)
    elif command == "ablate-alpha":
        pipeline.stage_ablate_alpha(config, out, args.alphas)
    elif command == "ablate-theta":
        pipeline.stage_ablate_theta(config, out, args.thetas)
    elif command == "ablate-dropout":
        pipeline.stage_ablate_dropout(config, out, args.rates)
    elif command == "report":
        pipeline.stage_report(config, out)
    else:  # unreachable behind argparse
        raise ValueError(f"unknown command {command!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run_command(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
