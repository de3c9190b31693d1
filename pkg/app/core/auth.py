import hmac
import logging

from fastapi import HTTPException, Request, status
from fastapi.security.utils import get_authorization_scheme_param

from app.core.config import settings

logger = logging.getLogger(__name__)


def _bearer_candidates(request: Request) -> list[str]:
    """Bearer credentials from every Authorization header, comma-separated values included."""
    auth_headers: list[str] = []
    # Prefer raw header order from ASGI scope to avoid comma-collapsing
    for name, value in request.scope.get("headers", []):
        if name.lower() == b"authorization" and value is not None:
            try:
                auth_headers.append(value.decode("latin-1"))
            except UnicodeDecodeError:
                continue

    credentials: list[str] = []
    for authorization in auth_headers:
        for segment in authorization.split(","):
            scheme, token = get_authorization_scheme_param(segment.strip())
            if scheme.lower() == "bearer" and token:
                credentials.append(token)
    return credentials


async def verify_token(request: Request) -> None:
    """
    Require a bearer token equal to STUB_ACCESS_TOKEN when one is configured.

    Raises:
        HTTPException: 401 with WWW-Authenticate: Bearer if no presented token matches.
    """
    expected = settings.STUB_ACCESS_TOKEN
    if not expected:
        return

    candidates = _bearer_candidates(request)
    if any(hmac.compare_digest(token, expected) for token in candidates):
        return

    # Log diagnostic information without exposing token values
    logger.warning(
        "Authentication failed: missing or invalid bearer token",
        extra={"path": request.url.path, "count": len(candidates)},
    )
    raise HTTPException(
        status_code=status.HTTP_401_UNAUTHORIZED,
        detail="Invalid or missing access token",
        headers={"WWW-Authenticate": "Bearer"},
    )
