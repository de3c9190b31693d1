"""Base-policy backends producing next-token distributions."""

import json
import logging
from abc import ABC, abstractmethod
from collections import defaultdict
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np
import numpy.typing as npt

from app.core.errors import EmptyCorpus, InvariantViolation, IoFailure
from app.schemas.mdp import State, Vocabulary
from app.services.distribution import (
    FloatArray,
    NextTokenDistribution,
    restrict_top_k,
    temper_probs,
    tempered_softmax,
)

logger = logging.getLogger(__name__)


class PolicyBackend(ABC):
    """
    A frozen base policy π_base.

    Backends are pure: repeated queries on one state return the same distribution, and they
    are safe to share between threads once constructed.
    """

    supports_dense: bool = True
    supports_sampling: bool = True

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    @abstractmethod
    def next_distribution(self, state: State, temperature: float = 1.0) -> NextTokenDistribution:
        """Next-token distribution at `state`, tempered by `temperature`."""

    def top_k(self, state: State, k: int, temperature: float = 1.0) -> NextTokenDistribution:
        return restrict_top_k(self.next_distribution(state, temperature), k)


class TabularPolicy(PolicyBackend):
    """Explicit rows keyed by State.key; states without a row get the uniform distribution."""

    def __init__(self, vocab: Vocabulary, table: Mapping[str, Sequence[float]] | None = None):
        super().__init__(vocab)
        self.table: dict[str, FloatArray] = {}
        for key, row in (table or {}).items():
            arr = np.asarray(row, dtype=np.float64)
            if arr.shape != (vocab.vocab_size,):
                raise InvariantViolation(f"row {key!r} must have {vocab.vocab_size} entries")
            NextTokenDistribution.from_dense(arr).validate()
            self.table[key] = arr
        self._uniform = np.full(vocab.vocab_size, 1.0 / vocab.vocab_size)

    def next_distribution(self, state: State, temperature: float = 1.0) -> NextTokenDistribution:
        row = self.table.get(state.key, self._uniform)
        return NextTokenDistribution.from_dense(temper_probs(row, temperature))

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary) -> "TabularPolicy":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoFailure(f"cannot read tabular policy {path}: {exc}") from exc
        return cls(vocab, raw)


class NGramPolicy(PolicyBackend):
    """
    Additively smoothed n-gram model over the concatenated prompt and generated tokens.

    prob(a | context) = (count(context, a) + alpha) / (count(context) + alpha * vocab_size),
    where the context is the last n-1 tokens (fewer at the start of a sequence).
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        alpha: float,
        counts: Mapping[tuple[int, ...], npt.ArrayLike] | None = None,
    ):
        super().__init__(vocab)
        if order < 1:
            raise InvariantViolation(f"n-gram order must be >= 1, got {order}")
        if alpha <= 0:
            raise InvariantViolation(f"smoothing alpha must be > 0, got {alpha}")
        self.order = order
        self.alpha = alpha
        self.counts: dict[tuple[int, ...], FloatArray] = {
            ctx: np.asarray(row, dtype=np.float64) for ctx, row in (counts or {}).items()
        }

    def context_of(self, tokens: tuple[int, ...]) -> tuple[int, ...]:
        if self.order == 1:
            return ()
        return tokens[-(self.order - 1):]

    def conditional(self, context: tuple[int, ...]) -> FloatArray:
        counts = self.counts.get(context)
        if counts is None:
            return np.full(self.vocab.vocab_size, 1.0 / self.vocab.vocab_size)
        smoothed = counts + self.alpha
        return np.asarray(smoothed / smoothed.sum(), dtype=np.float64)

    def next_distribution(self, state: State, temperature: float = 1.0) -> NextTokenDistribution:
        row = self.conditional(self.context_of(state.tokens))
        return NextTokenDistribution.from_dense(temper_probs(row, temperature))


def fit_ngram(
    corpus: Sequence[Sequence[int]],
    n: int,
    alpha: float,
    vocab: Vocabulary,
) -> NGramPolicy:
    """Count (context, next token) pairs over every position of every corpus sequence."""
    if not corpus or all(len(seq) == 0 for seq in corpus):
        raise EmptyCorpus("n-gram corpus is empty")

    counts: dict[tuple[int, ...], FloatArray] = defaultdict(
        lambda: np.zeros(vocab.vocab_size, dtype=np.float64)
    )
    for seq in corpus:
        tokens = tuple(int(t) for t in seq)
        for i, token in enumerate(tokens):
            if not vocab.contains(token):
                raise InvariantViolation(f"corpus token {token} outside vocabulary")
            context = tokens[max(0, i - (n - 1)):i] if n > 1 else ()
            counts[context][token] += 1.0

    logger.info(
        f"Fitted {n}-gram policy on {len(corpus)} sequences",
        extra={"operation": "fit_ngram", "count": len(counts)},
    )
    return NGramPolicy(vocab, n, alpha, dict(counts))


class SoftmaxPolicy(PolicyBackend):
    """
    Tiny softmax network: logits = W[last token] + b.

    Row vocab_size of W is the "no previous token" input used for empty contexts.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        weights: npt.ArrayLike | None = None,
        bias: npt.ArrayLike | None = None,
    ):
        super().__init__(vocab)
        v = vocab.vocab_size
        self.weights = (
            np.zeros((v + 1, v)) if weights is None else np.asarray(weights, dtype=np.float64)
        )
        self.bias = np.zeros(v) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.weights.shape != (v + 1, v) or self.bias.shape != (v,):
            raise InvariantViolation("softmax policy parameters have the wrong shape")

    def input_index(self, tokens: tuple[int, ...]) -> int:
        return tokens[-1] if tokens else self.vocab.vocab_size

    def logits(self, state: State) -> FloatArray:
        return np.asarray(self.weights[self.input_index(state.tokens)] + self.bias)

    def next_distribution(self, state: State, temperature: float = 1.0) -> NextTokenDistribution:
        return NextTokenDistribution.from_dense(tempered_softmax(self.logits(state), temperature))


def fit_softmax_policy(
    corpus: Sequence[Sequence[int]],
    vocab: Vocabulary,
    learning_rate: float = 0.5,
    epochs: int = 50,
    seed: int = 0,
) -> SoftmaxPolicy:
    """
    Train a SoftmaxPolicy by full-batch gradient descent on next-token cross-entropy.

    For one example with input row i and target y the gradient w.r.t. the logits is
    softmax(logits) - onehot(y); it flows unchanged into W[i] and b.
    """
    pairs = [
        (seq[i - 1] if i > 0 else vocab.vocab_size, seq[i])
        for seq in corpus
        for i in range(len(seq))
    ]
    if not pairs:
        raise EmptyCorpus("softmax policy corpus is empty")

    rng = np.random.default_rng(seed)
    v = vocab.vocab_size
    weights = rng.uniform(-0.01, 0.01, size=(v + 1, v))
    bias = np.zeros(v)
    inputs = np.array([p[0] for p in pairs])
    targets = np.array([p[1] for p in pairs])
    onehot = np.eye(v)[targets]

    for _ in range(epochs):
        logits = weights[inputs] + bias
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        grad_logits = (probs - onehot) / len(pairs)
        grad_w = np.zeros_like(weights)
        np.add.at(grad_w, inputs, grad_logits)
        weights -= learning_rate * grad_w
        bias -= learning_rate * grad_logits.sum(axis=0)

    return SoftmaxPolicy(vocab, weights, bias)
