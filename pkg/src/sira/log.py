import logging
import os
from typing import Optional, Union

ROOT = "sira"
ENV_VAR = "SIRA_LOG"
FORMAT = "%(levelname)s %(name)s: %(message)s"


def get_logger(name: str) -> logging.Logger:
    """Logger below the package root, e.g. ``sira.analysis``"""
    if name == ROOT or name.startswith(ROOT + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT}.{name}")


def _parse_level(value: Union[str, int, None]) -> Optional[int]:
    if value is None or value == "":
        return None
    if isinstance(value, int):
        return value
    value = value.strip()
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value.upper())
    return level if isinstance(level, int) else None


def setup_logging(level: Union[str, int, None] = None, verbose: int = 0) -> int:
    """Configure the package logger from ``level`` or the SIRA_LOG environment variable.

    Args:
        level: Level name or number. ``None`` reads SIRA_LOG.
        verbose: Number of ``-v`` flags; each one lowers the level by ten.

    Returns:
        The effective level.
    """
    raw = level if level is not None else os.environ.get(ENV_VAR)
    parsed = _parse_level(raw)
    unknown = raw not in (None, "") and parsed is None
    if parsed is None:
        parsed = logging.WARNING
    parsed = max(logging.DEBUG, parsed - 10 * verbose)

    logger = logging.getLogger(ROOT)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(FORMAT))
    logger.addHandler(handler)
    logger.setLevel(parsed)
    logger.propagate = False

    if unknown:
        logger.warning("unknown log level %r, using WARNING", raw)
    return parsed
