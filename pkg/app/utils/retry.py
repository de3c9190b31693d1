"""Retry utility with exponential backoff and jitter for remote backend calls"""

import logging
import random
import time
from collections.abc import Callable
from typing import TypeVar

from app.core.config import settings

logger = logging.getLogger(__name__)

T = TypeVar("T")


class RetryConfig:
    """Configuration for retry behavior"""

    def __init__(
        self,
        max_attempts: int = 3,
        base_delay: float = 0.1,
        max_delay: float = 2.0,
        backoff_factor: float = 2.0,
        jitter: bool = True,
        retryable_exceptions: tuple[type[Exception], ...] = (
            ConnectionError,
            TimeoutError,
            OSError,
        ),
    ):
        """
        Initialize a RetryConfig with parameters that control retry attempts and backoff behavior.

        Parameters:
            max_attempts (int): Maximum number of attempts (including the first one); this is
                the retry budget of a remote client.
            base_delay (float): Initial delay in seconds used as the starting backoff interval.
            max_delay (float): Upper bound in seconds for any computed backoff delay.
            backoff_factor (float): Multiplier applied to the delay after each failed attempt.
            jitter (bool): If True, apply ±25% randomized jitter to computed delays.
            retryable_exceptions (tuple[type[Exception], ...]): Exception types worth retrying.
        """
        if max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {max_attempts}")
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.backoff_factor = backoff_factor
        self.jitter = jitter
        self.retryable_exceptions = retryable_exceptions

    @classmethod
    def from_settings(cls, max_attempts: int | None = None) -> "RetryConfig":
        return cls(
            max_attempts=max_attempts or settings.REMOTE_RETRY_MAX_ATTEMPTS,
            base_delay=settings.REMOTE_RETRY_BASE_DELAY,
            max_delay=settings.REMOTE_RETRY_MAX_DELAY,
            backoff_factor=settings.REMOTE_RETRY_BACKOFF_FACTOR,
            jitter=settings.REMOTE_RETRY_JITTER,
        )

    def delay_before(self, attempt: int) -> float:
        """Backoff delay in seconds before zero-based `attempt` (attempt >= 1)."""
        delay = min(self.base_delay * (self.backoff_factor ** (attempt - 1)), self.max_delay)
        if self.jitter:
            delay *= 0.75 + (random.random() * 0.5)
        return delay


def retry_call(
    func: Callable[..., T],
    *args: object,
    config: RetryConfig,
    operation_name: str = "remote_call",
    **kwargs: object,
) -> T:
    """
    Call `func(*args, **kwargs)` up to `config.max_attempts` times with exponential backoff.

    Retryable exceptions (config.retryable_exceptions) are logged and retried until the budget
    is spent, after which the last one is re-raised. Any other exception is re-raised
    immediately.
    """
    last_exception: Exception | None = None

    for attempt in range(config.max_attempts):
        if attempt > 0:
            delay = config.delay_before(attempt)
            logger.debug(
                f"Retrying {operation_name} (attempt {attempt + 1}/{config.max_attempts}) "
                f"after {delay:.2f}s delay",
                extra={
                    "operation": operation_name,
                    "attempt": attempt + 1,
                    "max_attempts": config.max_attempts,
                },
            )
            time.sleep(delay)

        try:
            result = func(*args, **kwargs)
        except config.retryable_exceptions as e:
            last_exception = e
            logger.warning(
                f"{operation_name} failed on attempt {attempt + 1}: {e}",
                extra={
                    "operation": operation_name,
                    "attempt": attempt + 1,
                    "max_attempts": config.max_attempts,
                    "error": type(e).__name__,
                },
            )
            continue
        except Exception as e:
            logger.error(
                f"{operation_name} failed with non-retryable error: {e}",
                extra={
                    "operation": operation_name,
                    "attempt": attempt + 1,
                    "error": type(e).__name__,
                },
            )
            raise

        if attempt > 0:
            logger.info(
                f"{operation_name} succeeded on attempt {attempt + 1}",
                extra={"operation": operation_name, "attempt": attempt + 1},
            )
        return result

    logger.error(
        f"{operation_name} failed after {config.max_attempts} attempts",
        extra={
            "operation": operation_name,
            "max_attempts": config.max_attempts,
            "error": type(last_exception).__name__ if last_exception else "Unknown",
        },
    )
    assert last_exception is not None
    raise last_exception
