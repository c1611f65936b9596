"""Structured JSON or human-readable logging for the simulator.

Usage:
    from lib.structured_log import get_logger
    log = get_logger("fedsr")
    log.info("Round done", extra={"round": 3, "val_hr10": 0.41})

FEDSR_STRUCTURED_LOGS=1 switches to one JSON object per line.
FEDSR_LOG_LEVEL sets the level (default INFO). Library modules log through
logging.getLogger(__name__), so configuring "fedsr" covers all of them.
"""

import json
import logging
import os
import sys
from datetime import datetime, timezone

_INTERNAL = {
    "name", "msg", "args", "created", "relativeCreated", "exc_info",
    "exc_text", "stack_info", "lineno", "funcName", "pathname",
    "filename", "module", "levelno", "levelname", "msecs",
    "processName", "process", "threadName", "thread", "taskName",
    "message",
}


def _structured():
    return os.environ.get("FEDSR_STRUCTURED_LOGS", "0") == "1"


def _level(default):
    name = os.environ.get("FEDSR_LOG_LEVEL")
    if not name:
        return default
    level = logging.getLevelName(name.upper())
    return level if isinstance(level, int) else default


class _JsonFormatter(logging.Formatter):
    """One JSON object per log line; caller extras go under "extra"."""

    def __init__(self, service):
        super().__init__()
        self.service = service

    def format(self, record):
        entry = {
            "ts": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "service": self.service,
            "logger": record.name,
            "msg": record.getMessage(),
        }
        extras = {k: v for k, v in record.__dict__.items() if k not in _INTERNAL}
        if extras:
            entry["extra"] = extras
        if record.exc_info and record.exc_info[0]:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)


class _HumanFormatter(logging.Formatter):
    def __init__(self, service):
        super().__init__(
            fmt=f"%(asctime)s [{service}] %(levelname)s %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )


def get_logger(service, level=logging.INFO, stream=None):
    """Return a logger configured for *service* with JSON or human output.

    Logs go to stderr so result files and stdout tables stay clean.
    """
    logger = logging.getLogger(service)
    if logger.handlers:          # already configured
        return logger
    logger.setLevel(_level(level))
    handler = logging.StreamHandler(stream or sys.stderr)
    if _structured():
        handler.setFormatter(_JsonFormatter(service))
    else:
        handler.setFormatter(_HumanFormatter(service))
    logger.addHandler(handler)
    logger.propagate = False
    return logger
