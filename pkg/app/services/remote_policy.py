"""Client for external logprob servers speaking the next-token-distribution protocol."""

import logging
import math
import threading
from typing import Any, Protocol

import numpy as np
import requests
from pydantic import ValidationError

from app.core.config import settings
from app.core.constants import REMOTE_NORMALIZATION_TOL, REMOTE_ROUTES
from app.core.errors import BackendUnavailable, InvariantViolation, ProtocolViolation
from app.schemas.mdp import State, Vocabulary
from app.schemas.remote import NextTokenRequest, NextTokenResponse
from app.services.distribution import NextTokenDistribution
from app.services.policy import PolicyBackend
from app.utils.retry import RetryConfig, retry_call

logger = logging.getLogger(__name__)


class HttpResponse(Protocol):
    status_code: int

    def json(self) -> Any: ...


class HttpSession(Protocol):
    def post(self, url: str, **kwargs: Any) -> HttpResponse: ...


class RemotePolicyClient(PolicyBackend):
    """
    PolicyBackend backed by a remote server.

    Each call issues exactly one POST per attempt; transport failures (connection errors and
    timeouts) are retried within the retry budget, non-200 statuses are not.
    """

    supports_dense = False

    def __init__(
        self,
        vocab: Vocabulary,
        endpoint: str | None = None,
        timeout: float | None = None,
        retry_budget: int | None = None,
        max_in_flight: int | None = None,
        session: HttpSession | None = None,
        token: str | None = None,
    ):
        super().__init__(vocab)
        self.endpoint = (endpoint or settings.REMOTE_POLICY_URL).rstrip("/")
        if not self.endpoint:
            raise InvariantViolation("remote policy endpoint is not configured")
        self.timeout = timeout if timeout is not None else settings.REMOTE_TIMEOUT
        self.retry_config = RetryConfig.from_settings(max_attempts=retry_budget)
        self.retry_config.retryable_exceptions = (
            requests.ConnectionError,
            requests.Timeout,
            ConnectionError,
            TimeoutError,
        )
        self._session: HttpSession = session or requests.Session()
        self._in_flight = threading.BoundedSemaphore(max_in_flight or settings.REMOTE_MAX_IN_FLIGHT)
        self._token = token if token is not None else settings.REMOTE_POLICY_TOKEN

    @property
    def url(self) -> str:
        return self.endpoint + REMOTE_ROUTES["next_token_distribution"]

    def _post(self, payload: dict[str, Any]) -> HttpResponse:
        headers = {"Authorization": f"Bearer {self._token}"} if self._token else {}
        with self._in_flight:
            return self._session.post(self.url, json=payload, timeout=self.timeout, headers=headers)

    def remote_next_top_k(
        self, state: State, k: int, temperature: float = 1.0
    ) -> NextTokenDistribution:
        request = NextTokenRequest(context=list(state.tokens), k=k, temperature=temperature)
        try:
            response = retry_call(
                self._post,
                request.model_dump(),
                config=self.retry_config,
                operation_name="remote_next_top_k",
            )
        except self.retry_config.retryable_exceptions as exc:
            raise BackendUnavailable(
                f"{self.url} unreachable after {self.retry_config.max_attempts} attempts: {exc}"
            ) from exc

        if response.status_code != 200:
            raise BackendUnavailable(f"{self.url} returned HTTP {response.status_code}")

        try:
            body = NextTokenResponse.model_validate(response.json())
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                loc = exc.errors()[0]["loc"]
                field = str(loc[0]) if loc else "body"
            else:
                field = "body"
            raise ProtocolViolation(field, f"malformed payload: {exc}") from exc

        return self._to_distribution(body, k)

    def _to_distribution(self, body: NextTokenResponse, k: int) -> NextTokenDistribution:
        if len(body.token_ids) != len(body.logprobs):
            raise ProtocolViolation("logprobs", "token_ids and logprobs differ in length")
        if len(body.token_ids) > k:
            raise ProtocolViolation("token_ids", f"{len(body.token_ids)} tokens returned for k={k}")
        if len(set(body.token_ids)) != len(body.token_ids):
            raise ProtocolViolation("token_ids", "duplicate token ids")
        if any(not self.vocab.contains(t) for t in body.token_ids):
            raise ProtocolViolation("token_ids", "token id outside vocabulary")
        if any(math.isnan(lp) or lp > 0 for lp in body.logprobs):
            raise ProtocolViolation("logprobs", "log-probabilities must be finite and <= 0")
        if math.isnan(body.tail_logprob) or body.tail_logprob > 0:
            raise ProtocolViolation("tail_logprob", "tail log-probability must be <= 0")

        probs = np.exp(np.asarray(body.logprobs, dtype=np.float64))
        tail = math.exp(body.tail_logprob)
        total = float(probs.sum()) + tail
        if abs(total - 1.0) > REMOTE_NORMALIZATION_TOL:
            raise ProtocolViolation("logprobs", f"probabilities plus tail sum to {total!r}, not 1")

        if len(body.token_ids) == self.vocab.vocab_size:
            # every token is listed, so any tail is round-off
            dense = np.zeros(self.vocab.vocab_size)
            dense[body.token_ids] = probs / probs.sum()
            return NextTokenDistribution.from_dense(dense)
        probs = probs / total
        tail = tail / total
        return NextTokenDistribution.from_sparse(body.token_ids, probs, tail, self.vocab.vocab_size)

    def next_distribution(self, state: State, temperature: float = 1.0) -> NextTokenDistribution:
        return self.remote_next_top_k(state, self.vocab.vocab_size, temperature)

    def top_k(self, state: State, k: int, temperature: float = 1.0) -> NextTokenDistribution:
        return self.remote_next_top_k(state, k, temperature)
