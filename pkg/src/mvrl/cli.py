import argparse
import logging
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from .config import ConfigError, ExperimentConfig
from .constants import SUCCESS_THRESHOLD
from .harness import analyze_model, compare_runs, run_experiment
from .utils import apply_thread_limit, configure_logging

EXPERIMENT_KINDS = ["train-mf", "train-mf-independent", "train-model", "mb-mpc", "mvpt"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvrl", description="Multi-view reinforcement learning experiments.")
    commands = parser.add_subparsers(dest="command", required=True)

    for kind in EXPERIMENT_KINDS:
        run = commands.add_parser(kind, help=f"Run a '{kind}' experiment.")
        run.add_argument("--config", type=Path, required=True, help="Experiment YAML file.")
        run.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
        run.add_argument("--out", type=Path, default=None, help="Run directory (default: runs/<name>/seed_<seed>).")

    compare = commands.add_parser("compare", help="Interactions-to-success summary over finished runs.")
    compare.add_argument("run_dirs", type=Path, nargs="+", help="Run directories or parents of seed_* runs.")
    compare.add_argument("--threshold", type=float, default=SUCCESS_THRESHOLD)
    compare.add_argument("--out", type=Path, default=Path("summary.csv"), help="Summary CSV path.")

    analyze = commands.add_parser("analyze", help="Key-element analysis of a trained model checkpoint.")
    analyze.add_argument("--checkpoint", type=Path, required=True)
    analyze.add_argument("--config", type=Path, required=True)
    analyze.add_argument("--seed", type=int, default=None)
    analyze.add_argument("--out", type=Path, default=None, help="Output directory (default: next to the checkpoint).")
    return parser


def _load_config(path: Path, kind: Optional[str] = None) -> ExperimentConfig:
    config = ExperimentConfig.from_yaml(path)
    if kind is not None and config.kind != kind:
        logging.warning(f"Config kind '{config.kind}' overridden by the '{kind}' command.")
        config = ExperimentConfig.model_validate({**config.model_dump(by_alias=True), "kind": kind})
    return config


def _print_summary(rows: List[dict], threshold: float) -> None:
    table = Table(title=f"Interactions to return >= {threshold:g}")
    for column in ("method", "runs", "reached", "entry"):
        table.add_column(column, justify="left" if column in ("method", "entry") else "right")
    for row in rows:
        table.add_row(str(row["method"]), str(row["runs"]), str(row["reached"]), str(row["entry"]))
    Console().print(table)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``mvrl`` command; returns the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging()
    apply_thread_limit()

    try:
        if args.command == "compare":
            rows = compare_runs(args.run_dirs, args.threshold, args.out)
            _print_summary(rows, args.threshold)
            return EXIT_OK

        if args.command == "analyze":
            config = _load_config(args.config)
            configure_logging(config.debug)
            report = analyze_model(args.checkpoint, config, args.out, args.seed)
            logging.info(f"Key elements: {sorted(report.key_set)}")
            return EXIT_OK

        config = _load_config(args.config, args.command)
        configure_logging(config.debug)
        if config.debug:
            logging.debug(">>> DEBUG MODE ENABLED <<<")
        run_experiment(config, args.out, args.seed)
        return EXIT_OK
    except (ConfigError, ValidationError) as e:
        logging.error("=" * 80)
        logging.error(f"Invalid configuration: {e}")
        logging.error("=" * 80)
        return EXIT_CONFIG
    except Exception as e:
        logging.critical(f"mvrl {args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE


def cli() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    cli()
