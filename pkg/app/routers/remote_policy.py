import logging
import math

from fastapi import APIRouter, Depends, Request

from app.core.auth import verify_token
from app.core.constants import ZERO_TAIL_LOGPROB
from app.core.errors import InvariantViolation
from app.schemas.mdp import State
from app.schemas.remote import NextTokenRequest, NextTokenResponse
from app.services.policy import PolicyBackend

router = APIRouter()
logger = logging.getLogger(__name__)


def _log(p: float) -> float:
    return math.log(p) if p > 0 else ZERO_TAIL_LOGPROB


@router.post(
    "/v1/next_token_distribution",
    response_model=NextTokenResponse,
    dependencies=[Depends(verify_token)],
)
def next_token_distribution(body: NextTokenRequest, request: Request) -> NextTokenResponse:
    """
    Top-k next-token distribution of the served policy after `context`.

    The whole context is treated as the prompt; k is clamped to the vocabulary size.
    """
    policy: PolicyBackend = request.app.state.policy
    vocab = policy.vocab
    if any(not vocab.contains(t) for t in body.context):
        raise InvariantViolation(
            f"context has tokens outside vocabulary of size {vocab.vocab_size}"
        )

    k = min(body.k, vocab.vocab_size)
    dist = policy.top_k(State(prompt=tuple(body.context)), k, body.temperature)
    return NextTokenResponse(
        token_ids=[int(t) for t in dist.token_ids],
        logprobs=[_log(float(p)) for p in dist.probs],
        tail_logprob=_log(dist.tail_mass),
    )
