import logging
from typing import Optional

from .config import settings
from .exceptions import UsageError


def configure_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once for command-line runs."""
    name = (level or settings.LOG_LEVEL).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise UsageError(f"unknown log level {name!r}")
    logging.basicConfig(level=name, format=settings.LOG_FORMAT, force=True)
