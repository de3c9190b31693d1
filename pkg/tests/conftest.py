"""
Pytest configuration and fixtures for ivr-decoding tests
"""

import asyncio
import os

import httpx
import pytest

# Set environment variables before importing app
os.environ.setdefault("LOG_LEVEL", "DEBUG")
os.environ.setdefault("IVR_WORKERS", "2")
os.environ["STUB_ACCESS_TOKEN"] = ""

from app.core.config import settings
from app.main import create_app
from app.schemas.mdp import Vocabulary
from app.services.policy import TabularPolicy, fit_ngram
from app.services.reward import SubsequenceReward
from app.services.tasks import TOY_CORPUS, TOY_MAX_LENGTH, TOY_PROMPTS, TOY_VOCAB


class SyncASGITestClient:
    """Synchronous facade over httpx.AsyncClient using ASGITransport."""

    def __init__(self, app):
        self._transport = httpx.ASGITransport(app=app)
        self._client = httpx.AsyncClient(
            transport=self._transport,
            base_url="http://testserver"
        )

    def _run(self, coro):
        return asyncio.run(coro)

    def request(self, method: str, url: str, **kwargs):
        return self._run(self._client.request(method, url, **kwargs))

    def get(self, url: str, **kwargs):
        return self.request("GET", url, **kwargs)

    def post(self, url: str, **kwargs):
        return self.request("POST", url, **kwargs)

    def close(self):
        self._run(self._client.aclose())


class AsgiSession:
    """
    requests.Session stand-in that routes RemotePolicyClient posts into an ASGI app.

    Only the path of the URL is used; every post is counted.
    """

    def __init__(self, app):
        self.client = SyncASGITestClient(app)
        self.calls = 0

    def post(self, url: str, **kwargs):
        self.calls += 1
        path = "/" + url.split("://", 1)[-1].split("/", 1)[-1]
        kwargs.pop("timeout", None)
        return self.client.post(path, **kwargs)


# Test token for authentication when a test enables it
TEST_TOKEN = "stub-token-123"


@pytest.fixture
def toy_vocab() -> Vocabulary:
    return TOY_VOCAB


@pytest.fixture
def toy_policy(toy_vocab):
    """Bigram policy fitted on the toy corpus."""
    return fit_ngram(TOY_CORPUS, 2, 0.5, toy_vocab)


@pytest.fixture
def toy_reward():
    return SubsequenceReward([4], 1.0, 0.0, 0.05, TOY_MAX_LENGTH)


@pytest.fixture
def toy_prompts() -> list[list[int]]:
    return [list(p) for p in TOY_PROMPTS]


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    """Three tokens, eos = 0: small enough for exhaustive enumeration."""
    return Vocabulary(vocab_size=3, eos=0)


@pytest.fixture
def tiny_policy(tiny_vocab):
    """Explicit table: after the prompt, eos is likely and token 2 (rewarded) is rare."""
    return TabularPolicy(
        tiny_vocab,
        {
            "1|": [0.5, 0.4, 0.1],
            "1|1": [0.6, 0.3, 0.1],
            "1|2": [0.7, 0.2, 0.1],
        },
    )


@pytest.fixture
def tiny_reward():
    return SubsequenceReward([2], 1.0, 0.0, 0.0, 3)


@pytest.fixture
def test_client(toy_policy):
    """HTTP client for the stub server serving the toy bigram policy."""
    client = SyncASGITestClient(create_app(toy_policy))
    try:
        yield client
    finally:
        client.close()


@pytest.fixture(autouse=True)
def setup_test_env(monkeypatch):
    """
    Deterministic settings for every test: auth disabled, fast retries, small oracle budget.
    """
    monkeypatch.setattr(settings, "STUB_ACCESS_TOKEN", "")
    monkeypatch.setattr(settings, "REMOTE_POLICY_TOKEN", "")
    monkeypatch.setattr(settings, "REMOTE_RETRY_BASE_DELAY", 0.0)
    monkeypatch.setattr(settings, "REMOTE_RETRY_MAX_DELAY", 0.0)
    monkeypatch.setattr(settings, "REMOTE_RETRY_JITTER", False)
    monkeypatch.setattr(settings, "ORACLE_STATE_BUDGET", 1_000_000)
