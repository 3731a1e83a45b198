import logging
import sys
from typing import Optional

from moekit.core.config import settings

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """
    Attach a single stderr handler to the package logger.

    Reports are written to stdout, so log records must never share it.
    """
    logger = logging.getLogger("moekit")
    logger.setLevel((level or settings.LOG_LEVEL).upper())
    handler = next((h for h in logger.handlers if getattr(h, "_moekit", False)), None)
    if handler is None:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._moekit = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    else:
        handler.setStream(sys.stderr)
    return logger
