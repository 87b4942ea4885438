"""Process-wide logging plus a per-run log file beside the run's artifacts."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from logging.config import dictConfig
from pathlib import Path
from typing import Iterator

from pydantic import ValidationError

from app.config import get_settings

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
PROCESS_LOG_NAME = "gait.log"
RUN_LOG_NAME = "run.log"

_configured = False


def build_logging_config(log_dir: Path, level: str) -> dict:
    """``dictConfig`` document: stderr console plus ``<log_dir>/gait.log``."""
    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "standard": {"format": LOG_FORMAT, "datefmt": DATE_FORMAT},
        },
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "standard",
                "level": level,
            },
            "process_file": {
                "class": "logging.FileHandler",
                "filename": str(log_dir / PROCESS_LOG_NAME),
                "encoding": "utf-8",
                "formatter": "standard",
                "level": level,
            },
        },
        "root": {"level": level, "handlers": ["console", "process_file"]},
    }


def configure_logging(level: str | None = None) -> None:
    """Configure logging once per process; ``level`` overrides ``GAIT_LOG_LEVEL``."""

    global _configured
    if _configured:
        return

    try:
        settings = get_settings()
        log_dir = settings.log_dir
        configured_level = settings.log_level
    except ValidationError:
        # Bad GAIT_* values should not stop a command from reporting its own errors.
        log_dir = Path("logs")
        configured_level = "INFO"
    log_dir.mkdir(parents=True, exist_ok=True)

    dictConfig(build_logging_config(log_dir, (level or configured_level).upper()))
    _configured = True


@contextmanager
def run_log(output_dir: Path) -> Iterator[Path]:
    """Mirror every record into ``<output_dir>/run.log`` for the duration of one command.

    The file is appended to, so train, eval and dump-attention on the same run
    leave one history.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / RUN_LOG_NAME
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        handler.close()
