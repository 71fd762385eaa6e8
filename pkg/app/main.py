import argparse
import logging
import os
from typing import List, Optional

from dotenv import load_dotenv

from app import __version__
from app.commands import simulate_command, sweep_command, theory_command, verify_command
from app.config import LOG_LEVEL_ENV, load_run_config
from app.exceptions import LabError

logger = logging.getLogger(__name__)

COMMANDS = {
    "theory": "closed-form F_T / G_T predictions and coefficient tables",
    "simulate": "Monte Carlo estimates with standard errors next to the theory",
    "sweep": "Monte Carlo and theory along one axis, with CSV, SVG and gnuplot output",
    "verify": "numeric checks of the scalar lemmas, theorems and expectation identities",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rehearsal-lab",
        description="Rehearsal strategies for continual learning in overparameterized linear regression",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=None, help="key-value run file (SECTION__FIELD=value)")
        cmd.add_argument("--seed", type=int, default=None, help="master seed")
        cmd.add_argument("--trials", type=int, default=None, help="Monte Carlo trials per strategy / point")
        cmd.add_argument("--workers", type=int, default=None, help="worker processes")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--format", choices=["csv", "json"], default=None, help="result table format")
        cmd.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name == "verify":
            cmd.add_argument("--suite", choices=["lemmas", "theorems", "identities", "all"], default=None)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {"run": {
        "seed": args.seed,
        "trials": args.trials,
        "workers": args.workers,
        "out_dir": args.out,
        "format": args.format,
    }}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    level = "DEBUG" if args.verbose else os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )

    try:
        cfg = load_run_config(args.config, _overrides(args))
        logger.info(f"rehearsal-lab {__version__}: {args.command} (seed={cfg.run.seed})")
        if args.command == "theory":
            theory_command.run(cfg)
        elif args.command == "simulate":
            simulate_command.run(cfg)
        elif args.command == "sweep":
            sweep_command.run(cfg)
        else:
            verify_command.run(cfg, args.suite)
    except LabError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    return 0
