import logging
import time
import uuid
from collections.abc import Awaitable, Callable

from fastapi import FastAPI, Request, Response

from app.core.constants import APP_NAME, APP_VERSION
from app.core.errors import register_exception_handlers
from app.core.logging import redact_secrets, setup_logging
from app.routers.health import router as health_router
from app.routers.remote_policy import router as remote_policy_router
from app.services.policy import PolicyBackend
from app.services.tasks import build_policy, toy_experiment

logger = logging.getLogger(__name__)


def create_app(policy: PolicyBackend) -> FastAPI:
    """FastAPI app serving `policy` over the next-token-distribution protocol."""
    app = FastAPI(
        title=APP_NAME,
        description="Remote logprob server for value-guided decoding experiments",
        version=APP_VERSION,
    )
    app.state.policy = policy

    @app.middleware("http")
    async def log_requests(
        request: Request, call_next: Callable[[Request], Awaitable[Response]]
    ) -> Response:
        request_id = str(uuid.uuid4())
        request.state.request_id = request_id
        start_time = time.time()

        response = await call_next(request)

        logger.info(
            f"{request.method} {request.url.path}",
            extra={
                "request_id": request_id,
                "path": request.url.path,
                "duration_ms": int((time.time() - start_time) * 1000),
                "status": response.status_code,
                "headers": redact_secrets(dict(request.headers)),
            },
        )
        return response

    register_exception_handlers(app)
    app.include_router(health_router, tags=["Health"])
    app.include_router(remote_policy_router, tags=["Policy"])

    @app.get("/")
    async def root() -> dict[str, str]:
        return {"message": APP_NAME, "version": APP_VERSION}

    logger.info(
        f"Serving policy with vocabulary size {policy.vocab.vocab_size}",
        extra={"operation": "create_app", "count": policy.vocab.vocab_size},
    )
    return app


def _toy_app() -> FastAPI:
    setup_logging()
    config = toy_experiment()
    return create_app(build_policy(config.policy, config.task.vocabulary))


# `uvicorn app.main:app` serves the toy task's base policy
app = _toy_app()
