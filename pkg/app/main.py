"""Main entry point for the fundus transfer-learning experiments."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app import __version__
from app.config import Config
from app.errors import ConfigError, ExperimentError, IncompleteGridError, SweepCellError
from app.experiment import load_experiment_config
from app.handlers import cmd_all, cmd_gen_data, cmd_pretrain, cmd_report, cmd_sweep
from app.rundir import RunDirectory
from app.trainer import InitMode
from app.utils import TimezoneFormatter

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "pretrain", "sweep", "report", "all")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description="Pretrain, fine-tune and compare initializations on synthetic fundus tasks.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="experiment YAML (defaults when omitted)")
    parser.add_argument("--out", type=Path, default=None, help="run directory (overrides out_dir)")
    parser.add_argument("--seed-override", type=int, default=None, metavar="N", help="use seeds N, N+1, ...")
    parser.add_argument("--jobs", type=int, default=None, help=f"sweep workers (default XFER_JOBS={Config.JOBS})")
    parser.add_argument(
        "--mode",
        choices=[m.value for m in InitMode if m.is_pretrained],
        default=None,
        help="pretrain only this mode",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def setup_logging(log_path: Optional[Path]) -> None:
    """Log to stdout and, when a run directory is known, to its experiment.log."""
    formatter = TimezoneFormatter(Config.LOG_FORMAT, timezone=Config.TIMEZONE)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
    logging.basicConfig(level=Config.LOG_LEVEL, handlers=handlers, force=True)


def run(argv: Optional[List[str]] = None) -> int:
    """Run one command and return the process exit code."""
    args = build_parser().parse_args(argv)

    try:
        config = load_experiment_config(args.config)
        if args.out is not None:
            config = config.with_out_dir(args.out)
        if args.seed_override is not None:
            config = config.with_seed_override(args.seed_override)
        if args.jobs is not None and args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    except ConfigError as e:
        setup_logging(None)
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG

    setup_logging(RunDirectory(Path(config.out_dir)).log_path)
    logger.info(f"Running {args.command} in {config.out_dir}")

    try:
        if args.command == "gen-data":
            cmd_gen_data(config)
        elif args.command == "pretrain":
            cmd_pretrain(config, InitMode(args.mode) if args.mode else None)
        elif args.command == "sweep":
            cmd_sweep(config, args.jobs)
        elif args.command == "report":
            cmd_report(config.out_dir)
        else:
            cmd_all(config, args.jobs)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except SweepCellError as e:
        logger.error(f"Run failed at {e.coordinate}: {e.cause}", exc_info=True)
        return EXIT_RUNTIME
    except IncompleteGridError as e:
        logger.error(f"Refusing to report: {e}")
        return EXIT_RUNTIME
    except ExperimentError as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return EXIT_RUNTIME

    logger.info(f"{args.command} finished")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
