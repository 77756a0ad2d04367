#!/usr/bin/env python3
"""
rmflow-lab Main Entry Point

Sets up logging and numerics, dispatches the subcommand and maps failures to exit
codes (0 success, 2 configuration error, 3 numerical failure).
"""

import argparse
import os
import sys

# Add src directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from loguru import logger

from src.config import configure_torch, print_config, setup_logging, validate_config
from src.errors import EXIT_OK, RMFlowError, exit_code_for
from src.tasks.registry import TASKS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmflow-lab",
        description="Train, sample and evaluate one-step MeanFlow / RMFlow models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a JSON run config")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out")

    for name, help_text in (("sample", "draw samples from a checkpoint"), ("eval", "evaluate a checkpoint")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--n", type=int, default=100_000)
        p.add_argument("--nfe", type=int, default=1)
        p.add_argument("--mode", choices=["meanflow", "rmflow"])
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
    sub.choices["eval"].add_argument("--nfe-sweep", type=int, nargs="*", default=[])

    ablate = sub.add_parser("ablate", help="λ₁ ablation: one RMFlow run per grid value")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--lambda1-grid", type=float, nargs="+")
    ablate.add_argument("--seed", type=int)
    ablate.add_argument("--out")

    defaults = sub.add_parser("print-default-config", help="print the full default config of a task")
    defaults.add_argument("task", choices=sorted(TASKS))
    return parser


def dispatch(args: argparse.Namespace):
    from src.cli import commands

    if args.command == "train":
        return commands.cmd_train(args.config, seed=args.seed, out=args.out)
    if args.command == "sample":
        return commands.cmd_sample(args.checkpoint, args.n, args.nfe, args.mode, args.out, args.seed)
    if args.command == "eval":
        return commands.cmd_eval(
            args.checkpoint, args.n, args.nfe, args.mode, args.out, args.seed, nfe_sweep=args.nfe_sweep
        )
    if args.command == "ablate":
        return commands.cmd_ablate(args.config, args.lambda1_grid, seed=args.seed, out=args.out)
    return commands.cmd_print_default_config(args.task)


def main(argv=None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)

    # print-default-config writes pure JSON to stdout
    setup_logging(level="WARNING" if args.command == "print-default-config" else None)
    try:
        validate_config()
        configure_torch()
        if args.command != "print-default-config":
            print_config()
        dispatch(args)
    except RMFlowError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return exit_code_for(e)
    except KeyboardInterrupt:
        logger.info("👋 Interrupted")
        return 130
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
