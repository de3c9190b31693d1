from typing import Any

from fastapi import Request, status
from fastapi.responses import JSONResponse


class IvrError(Exception):
    """Base class for every error raised by the engine."""


class UserError(IvrError):
    """Bad input or configuration; the caller can fix it."""


class ConfigError(UserError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class InvariantViolation(UserError):
    pass


class ExtendingTerminalState(UserError):
    pass


class EmptyCorpus(UserError):
    pass


class EmptyCompletion(UserError):
    pass


class AlreadyLabeled(UserError):
    pass


class UnlabeledTrajectory(UserError):
    pass


class SupportViolation(UserError):
    pass


class BudgetExceeded(UserError):
    def __init__(self, states: int, budget: int):
        self.states = states
        self.budget = budget
        super().__init__(f"enumeration needs {states} states, budget is {budget}")


class UnconvergedOracle(UserError):
    pass


class FormatMismatch(UserError):
    def __init__(self, found: str, expected: str):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint version {found!r} does not match expected {expected!r}")


class IoFailure(IvrError):
    pass


class DegenerateDistribution(IvrError):
    pass


class NonfiniteLoss(IvrError):
    def __init__(self, epoch: int, learning_rate: float):
        self.epoch = epoch
        self.learning_rate = learning_rate
        super().__init__(
            f"loss became non-finite in epoch {epoch} (learning_rate={learning_rate})"
        )


class BackendUnavailable(IvrError):
    pass


class ProtocolViolation(IvrError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


async def user_error_handler(request: Request, exc: Exception) -> JSONResponse:
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content={"detail": str(exc), "error": type(exc).__name__},
    )


async def internal_error_handler(request: Request, exc: Exception) -> JSONResponse:
    return JSONResponse(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        content={"detail": "Internal policy error", "error": type(exc).__name__},
    )


def register_exception_handlers(app: Any) -> None:
    app.add_exception_handler(UserError, user_error_handler)
    app.add_exception_handler(IvrError, internal_error_handler)
