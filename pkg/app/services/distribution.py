"""Next-token distributions: dense or top-k sparse with tail mass."""

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from app.core.constants import NORMALIZATION_TOL
from app.core.errors import DegenerateDistribution, InvariantViolation

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]


@dataclass(frozen=True)
class NextTokenDistribution:
    """
    Dense: token_ids is arange(vocab_size) and tail_mass is 0.
    Sparse: token_ids lists the kept tokens in ranking order; tail_mass is the mass of
    every other token.
    """

    token_ids: IntArray
    probs: FloatArray
    tail_mass: float
    vocab_size: int
    dense: bool

    @classmethod
    def from_dense(cls, probs: npt.ArrayLike) -> "NextTokenDistribution":
        arr = np.asarray(probs, dtype=np.float64)
        return cls(
            token_ids=np.arange(arr.shape[0], dtype=np.int64),
            probs=arr,
            tail_mass=0.0,
            vocab_size=int(arr.shape[0]),
            dense=True,
        )

    @classmethod
    def from_sparse(
        cls,
        token_ids: npt.ArrayLike,
        probs: npt.ArrayLike,
        tail_mass: float,
        vocab_size: int,
    ) -> "NextTokenDistribution":
        return cls(
            token_ids=np.asarray(token_ids, dtype=np.int64),
            probs=np.asarray(probs, dtype=np.float64),
            tail_mass=float(tail_mass),
            vocab_size=vocab_size,
            dense=False,
        )

    def validate(self, tol: float = NORMALIZATION_TOL) -> "NextTokenDistribution":
        if self.token_ids.shape != self.probs.shape:
            raise InvariantViolation("token_ids and probs must have equal length")
        if np.any(self.probs < 0) or self.tail_mass < 0:
            raise InvariantViolation("probabilities must be non-negative")
        if len(np.unique(self.token_ids)) != len(self.token_ids):
            raise InvariantViolation("token ids must be distinct")
        if np.any(self.token_ids < 0) or np.any(self.token_ids >= self.vocab_size):
            raise InvariantViolation("token id outside vocabulary")
        total = float(self.probs.sum()) + self.tail_mass
        if abs(total - 1.0) > tol:
            raise InvariantViolation(f"distribution sums to {total!r}, not 1")
        return self

    def to_dense(self) -> FloatArray:
        """Full-vocabulary probabilities; only defined when no mass sits in the tail."""
        if self.dense:
            return self.probs
        if self.tail_mass > NORMALIZATION_TOL:
            raise InvariantViolation("cannot densify a sparse distribution with tail mass")
        out = np.zeros(self.vocab_size, dtype=np.float64)
        out[self.token_ids] = self.probs
        return out

    def support_dense(self) -> FloatArray:
        """The per-step distribution actually sampled: sparse mass renormalized within top-k."""
        if self.dense:
            return self.probs
        out = np.zeros(self.vocab_size, dtype=np.float64)
        out[self.token_ids] = self.probs / self.probs.sum()
        return out

    def prob_of(self, token: int) -> float:
        hits = np.nonzero(self.token_ids == token)[0]
        return float(self.probs[hits[0]]) if hits.size else 0.0


def tempered_softmax(logits: npt.ArrayLike, temperature: float = 1.0) -> FloatArray:
    """softmax(logits / temperature); -inf logits get probability 0."""
    if temperature <= 0:
        raise InvariantViolation(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z)
    w = np.exp(z)
    return np.asarray(w / w.sum(), dtype=np.float64)


def temper_probs(probs: npt.ArrayLike, temperature: float) -> FloatArray:
    """Apply a temperature to a probability row through its log-probabilities."""
    arr = np.asarray(probs, dtype=np.float64)
    if temperature == 1.0:
        return arr
    with np.errstate(divide="ignore"):
        return tempered_softmax(np.log(arr), temperature)


def restrict_top_k(dist: NextTokenDistribution, k: int) -> NextTokenDistribution:
    """
    Keep the k most probable tokens, ties broken by smaller token id.

    The result stores tokens in ranking order with tail_mass = 1 - sum(kept probs).
    """
    if not 1 <= k <= dist.vocab_size:
        raise InvariantViolation(f"k must be in [1, {dist.vocab_size}], got {k}")
    dense = dist.to_dense()
    ids = np.arange(dist.vocab_size, dtype=np.int64)
    # lexsort sorts by the last key first: descending prob, then ascending id
    order = np.lexsort((ids, -dense))[:k]
    kept = dense[order]
    tail = max(0.0, 1.0 - float(kept.sum()))
    return NextTokenDistribution.from_sparse(order, kept, tail, dist.vocab_size)


def sample_token(dist: NextTokenDistribution, rng: np.random.Generator) -> int:
    """
    Inverse-CDF draw over the stored token order.

    Sparse distributions are sampled within their support after renormalizing by
    1 - tail_mass; the tail is never sampled.
    """
    probs = dist.probs
    if probs.size == 0 or np.isnan(np.max(probs)):
        raise DegenerateDistribution("distribution has no support or contains NaN")
    total = float(probs.sum())
    if total <= 0.0:
        raise DegenerateDistribution("distribution support carries zero mass")

    cdf = np.cumsum(probs) / total
    u = rng.random()
    index = int(np.searchsorted(cdf, u, side="right"))
    # Round-off can leave cdf[-1] a hair below u; fall back to the last positive entry
    if index >= probs.size:
        index = int(np.nonzero(probs > 0)[0][-1])
    return int(dist.token_ids[index])


def kl_divergence(p: FloatArray, q: FloatArray) -> float:
    """KL(p || q) in nats over full-vocabulary rows; inf when p has mass where q has none."""
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
