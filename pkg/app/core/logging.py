import json
import logging
import sys
from datetime import datetime, timezone
from typing import Any, TextIO

from app.core.config import settings

# Structured fields copied from `extra={...}` onto the JSON line when present
STRUCTURED_FIELDS: tuple[str, ...] = (
    "operation",
    "iteration",
    "beta",
    "seed",
    "attempt",
    "max_attempts",
    "duration_ms",
    "status",
    "request_id",
    "path",
    "count",
    "error",
)

SENSITIVE_KEYS: frozenset[str] = frozenset(
    {"token", "authorization", "bearer", "api_key", "secret", "password"}
)


class JSONFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        log_data: dict[str, Any] = {
            "timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "message": record.getMessage(),
            "logger": record.name,
        }

        for field in STRUCTURED_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)

        if hasattr(record, "headers") and isinstance(record.headers, dict):
            log_data["headers"] = record.headers

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        return json.dumps(redact_secrets(log_data), default=str)


def redact_secrets(data: dict[str, Any]) -> dict[str, Any]:
    """
    Return a copy of a log mapping with token-like values replaced.

    Keys containing any of SENSITIVE_KEYS (case-insensitive) are redacted; nested dicts
    and lists of dicts are processed recursively.
    """
    redacted: dict[str, Any] = {}
    for key, value in data.items():
        if any(sensitive in key.lower() for sensitive in SENSITIVE_KEYS):
            redacted[key] = "***REDACTED***"
        elif isinstance(value, dict):
            redacted[key] = redact_secrets(value)
        elif isinstance(value, list):
            redacted[key] = [
                redact_secrets(item) if isinstance(item, dict) else item for item in value
            ]
        else:
            redacted[key] = value
    return redacted


_installed_handler: logging.Handler | None = None


def setup_logging(level: str | None = None, stream: TextIO | None = None) -> None:
    """
    Configure the root logger to emit JSON lines.

    Uses `level` or settings.LOG_LEVEL, writes to `stream` (stdout by default) and routes the
    uvicorn loggers through the root handler. Calling it again replaces the handler it
    installed previously instead of stacking a second one.
    """
    global _installed_handler

    logger = logging.getLogger()
    logger.setLevel(getattr(logging, (level or settings.LOG_LEVEL).upper()))

    if _installed_handler is not None:
        logger.removeHandler(_installed_handler)

    handler = logging.StreamHandler(stream or sys.stdout)
    handler.setFormatter(JSONFormatter())
    logger.addHandler(handler)
    _installed_handler = handler

    for log_name in ["uvicorn", "uvicorn.access", "uvicorn.error"]:
        logging.getLogger(log_name).handlers = []
        logging.getLogger(log_name).propagate = True
