"""Main entry point: `python -m src.main <subcommand>`."""
import argparse
import logging
import sys
from typing import Optional

from src.config import Config
from src.errors import UttsError
from src.utils.logging_config import setup_logging
from src.handlers import (
    corpus_router,
    training_router,
    studies_router,
    figures_router,
)

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m src.main",
        description="Неконтролируемый TTS на игрушечном языке: корпус, ASR без пар, self-training, TTS, оценка",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Register routers
    for router in (corpus_router, training_router, studies_router, figures_router):
        router.mount(subparsers)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Parse arguments, run the subcommand, map errors to exit codes (0 ok, 2 config, 3 stage, 4 gate)."""
    args = build_parser().parse_args(argv)

    # Ensure directories exist
    Config.create_dirs()
    setup_logging(level="DEBUG" if args.verbose else None, console=True if args.verbose else None)
    logger.info("Command %s", args.command)

    try:
        return args.handler(args)
    except UttsError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Ошибка: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
