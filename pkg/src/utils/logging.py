"""Logging configuration for the SoftPD simulator.

Module loggers are children of the ``softpd`` root logger, which owns the
handlers: stdout always, a file when ``settings.log_file`` is set, and the
per-run ``run.log`` attached by the command-line entry point.
"""

import logging
import sys
from pathlib import Path
from typing import Optional

from src.config.settings import settings

ROOT_LOGGER = "softpd"
RUN_LOG_NAME = "run.log"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def _formatter() -> logging.Formatter:
    return logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)


def _file_handler(path: str | Path, level: int) -> logging.FileHandler:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(_formatter())
    return handler


def setup_logging(level: Optional[int] = None, log_file: Optional[str] = None) -> logging.Logger:
    """(Re)configure the ``softpd`` root logger.

    Args:
        level: Logging level (default: DEBUG if settings.debug else INFO)
        log_file: Optional path to a log file (default: settings.log_file)

    Returns:
        logging.Logger: The root logger every module logger propagates to
    """
    if level is None:
        level = logging.DEBUG if settings.debug else logging.INFO
    log_file = log_file or settings.log_file

    root = logging.getLogger(ROOT_LOGGER)
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler(sys.stdout)
    console.setLevel(level)
    console.setFormatter(_formatter())
    root.addHandler(console)
    if log_file:
        root.addHandler(_file_handler(log_file, level))

    root.propagate = False
    return root


def get_logger(name: str) -> logging.Logger:
    """Logger for one module, configuring the root on first use.

    Example:
        >>> logger = get_logger(__name__)
        >>> logger.debug("Assembling global matrix...")
    """
    root = logging.getLogger(ROOT_LOGGER)
    if not root.handlers:
        setup_logging()
    return root.getChild(name)


def attach_run_log(out_dir: str | Path) -> logging.Handler:
    """Mirror every record into ``<out_dir>/run.log`` until detached."""
    root = logging.getLogger(ROOT_LOGGER)
    handler = _file_handler(Path(out_dir) / RUN_LOG_NAME, root.level)
    root.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger(ROOT_LOGGER).removeHandler(handler)
    handler.close()
