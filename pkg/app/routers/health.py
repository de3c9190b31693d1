from typing import Any

from fastapi import APIRouter, Request

from app.core.constants import APP_VERSION

router = APIRouter()


@router.get("/health")
async def health_check(request: Request) -> dict[str, Any]:
    """Liveness plus the vocabulary size of the served policy."""
    policy = getattr(request.app.state, "policy", None)
    return {
        "status": "healthy" if policy is not None else "degraded",
        "version": APP_VERSION,
        "vocab_size": policy.vocab.vocab_size if policy is not None else None,
    }
