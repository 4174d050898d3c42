"""Logging configuration module."""
import logging
import sys
from pathlib import Path
from typing import Optional

from src.config import Config


def setup_logging(log_path: Optional[str] = None, level: Optional[str] = None, console: Optional[bool] = None):
    """
    Configure logging for the application.

    Sets up:
    - File handler for logs/app.log (or log_path, e.g. the run directory)
    - Console handler in dev mode or when console=True
    - Formatting with timestamp, level, and message
    - Log level from Config.LOG_LEVEL unless overridden
    """
    log_path = log_path or Config.LOG_PATH
    log_dir = Path(log_path).parent
    log_dir.mkdir(parents=True, exist_ok=True)

    log_level = getattr(logging, (level or Config.LOG_LEVEL).upper(), logging.INFO)

    formatter = logging.Formatter(
        fmt='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)

    # Remove existing handlers to avoid duplicates
    for handler in list(root_logger.handlers):
        handler.close()
    root_logger.handlers.clear()

    file_handler = logging.FileHandler(log_path, encoding='utf-8')
    file_handler.setLevel(log_level)
    file_handler.setFormatter(formatter)
    root_logger.addHandler(file_handler)

    if console if console is not None else Config.DEV_MODE:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(log_level)
        console_handler.setFormatter(formatter)
        root_logger.addHandler(console_handler)

    # SQL echo только в режиме разработки
    logging.getLogger('sqlalchemy.engine').setLevel(logging.INFO if Config.DEV_MODE else logging.WARNING)

    return root_logger
