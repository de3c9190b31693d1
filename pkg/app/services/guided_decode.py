"""Value-guided decoding: top-k reweighting, blockwise sampling and blockwise beam search."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from app.core.constants import BASE_POLICY_TAG, TOKENWISE_TAG, beam_tag, blockwise_tag
from app.schemas.config import BeamConfig, GuidanceConfig
from app.schemas.mdp import State, Trajectory, Vocabulary
from app.services.distribution import (
    FloatArray,
    NextTokenDistribution,
    restrict_top_k,
    sample_token,
    temper_probs,
)
from app.services.mdp import extend_state, is_terminal
from app.services.policy import PolicyBackend
from app.services.value import ValueFunction

logger = logging.getLogger(__name__)


class StepPolicy(Protocol):
    """Anything that yields the per-step distribution actually sampled at a state."""

    @property
    def vocab(self) -> Vocabulary: ...

    def step_distribution(self, state: State) -> NextTokenDistribution: ...


class TemperedBase:
    """The base policy at a fixed temperature, optionally restricted to its top-k tokens."""

    def __init__(self, base: PolicyBackend, temperature: float = 1.0, k: int | None = None):
        self.base = base
        self.temperature = temperature
        self.k = None if k is None else min(k, base.vocab.vocab_size)

    @property
    def vocab(self) -> Vocabulary:
        return self.base.vocab

    def step_distribution(self, state: State) -> NextTokenDistribution:
        if self.k is None and self.base.supports_dense:
            return self.base.next_distribution(state, self.temperature)
        return self.base.top_k(state, self.k or self.base.vocab.vocab_size, self.temperature)


def _normalize_log_weights(log_w: FloatArray) -> FloatArray:
    shifted = np.exp(log_w - np.max(log_w))
    return np.asarray(shifted / shifted.sum(), dtype=np.float64)


class GuidedPolicy:
    """
    π_V(a|s) ∝ π_base(a|s) * exp(beta * V(s ⊕ a)) over the base's top-k tokens.

    Tokens outside the top-k share the prefix value V(s). Guidance is applied only when
    len(generated) is a multiple of cfg.block_size; other steps use the tempered base.
    """

    def __init__(self, base: PolicyBackend, value: ValueFunction, cfg: GuidanceConfig):
        self.base = base
        self.value = value
        self.cfg = cfg
        self.k = min(cfg.k, base.vocab.vocab_size)
        self.dense = cfg.mode == "dense" and base.supports_dense

    @property
    def vocab(self) -> Vocabulary:
        return self.base.vocab

    def with_block_size(self, block_size: int) -> "GuidedPolicy":
        return GuidedPolicy(
            self.base, self.value, self.cfg.model_copy(update={"block_size": block_size})
        )

    def base_distribution(self, state: State) -> NextTokenDistribution:
        if self.dense:
            return self.base.next_distribution(state, self.cfg.temperature)
        return self.base.top_k(state, self.k, self.cfg.temperature)

    def guided_next_distribution(self, state: State) -> NextTokenDistribution:
        """Reweighted distribution at `state`; costs k + 1 value evaluations when beta > 0."""
        if self.cfg.beta == 0.0:
            return self.base_distribution(state)

        beta = self.cfg.beta
        if self.dense:
            full = self.base.next_distribution(state, self.cfg.temperature)
            top = restrict_top_k(full, self.k)
        else:
            top = self.base.top_k(state, self.k, self.cfg.temperature)

        children = [extend_state(state, int(a), self.vocab) for a in top.token_ids]
        child_values = self.value.evaluate_batch(children)
        prefix_value = self.value.evaluate(state)

        with np.errstate(divide="ignore"):
            if self.dense:
                log_w = np.log(full.probs) + beta * prefix_value
                log_w[top.token_ids] = np.log(top.probs) + beta * child_values
                return NextTokenDistribution.from_dense(_normalize_log_weights(log_w))

            log_w = np.append(
                np.log(top.probs) + beta * child_values,
                np.log(top.tail_mass) + beta * prefix_value,
            )
        probs = _normalize_log_weights(log_w)
        return NextTokenDistribution.from_sparse(
            top.token_ids, probs[:-1], float(probs[-1]), self.vocab.vocab_size
        )

    def is_guided_step(self, state: State) -> bool:
        return len(state.generated) % self.cfg.block_size == 0

    def step_distribution(self, state: State) -> NextTokenDistribution:
        if self.is_guided_step(state):
            return self.guided_next_distribution(state)
        return self.base_distribution(state)


class GuidedBackend(PolicyBackend):
    """Exposes a GuidedPolicy as a base policy so guidance can be stacked."""

    def __init__(self, guided: GuidedPolicy):
        super().__init__(guided.vocab)
        self.guided = guided
        self.supports_dense = guided.dense

    def next_distribution(self, state: State, temperature: float = 1.0) -> NextTokenDistribution:
        step = self.guided.step_distribution(state)
        return NextTokenDistribution.from_dense(temper_probs(step.support_dense(), temperature))


def compose_guidance(
    previous: GuidedPolicy, value: ValueFunction, cfg: GuidanceConfig
) -> GuidedPolicy:
    """Literal π_base <- π_V: guide the previous guided policy again (exponents add up)."""
    return GuidedPolicy(GuidedBackend(previous), value, cfg.model_copy(update={"temperature": 1.0}))


def rollout(
    policy: StepPolicy,
    prompt: Sequence[int],
    max_length: int,
    seed: int,
    policy_tag: str,
    iteration: int = 0,
) -> Trajectory:
    """Sample one episode step by step from a single seeded generator."""
    rng = np.random.default_rng(seed)
    vocab = policy.vocab
    state = State(prompt=tuple(prompt))
    while not is_terminal(state, vocab, max_length):
        token = sample_token(policy.step_distribution(state), rng)
        state = extend_state(state, token, vocab)
    return Trajectory(
        prompt=state.prompt,
        completion=state.generated,
        policy_tag=policy_tag,
        iteration=iteration,
        seed=seed,
    )


def sample_base(
    base: PolicyBackend,
    prompt: Sequence[int],
    max_length: int,
    seed: int,
    temperature: float = 0.7,
    iteration: int = 0,
) -> Trajectory:
    sampler = TemperedBase(base, temperature)
    return rollout(sampler, prompt, max_length, seed, BASE_POLICY_TAG, iteration)


def sample_guided_tokenwise(
    guided: GuidedPolicy, prompt: Sequence[int], max_length: int, seed: int, iteration: int = 0
) -> Trajectory:
    return rollout(guided.with_block_size(1), prompt, max_length, seed, TOKENWISE_TAG, iteration)


def sample_guided_blockwise(
    guided: GuidedPolicy, prompt: Sequence[int], max_length: int, seed: int, iteration: int = 0
) -> Trajectory:
    tag = blockwise_tag(guided.cfg.block_size)
    return rollout(guided, prompt, max_length, seed, tag, iteration)


@dataclass(frozen=True)
class BeamOutcome:
    trajectory: Trajectory
    value: float
    completed: list[tuple[tuple[int, ...], float]] = field(default_factory=list)


def _rank_key(item: tuple[State, float]) -> tuple[float, tuple[int, ...]]:
    return (-item[1], item[0].generated)


def run_beam_search(
    base: PolicyBackend, value: ValueFunction, prompt: Sequence[int], cfg: BeamConfig
) -> BeamOutcome:
    """
    Blockwise beam search.

    Each round every unfinished candidate gets B sampled continuation blocks of up to b
    tokens; finished candidates carry over unchanged. The distinct results are ranked by
    value (ties: lexicographic token order) and the top B survive. Search ends when every
    survivor is finished; the best-valued completion ever produced is returned.
    """
    vocab = base.vocab
    sampler = TemperedBase(base, cfg.temperature, cfg.top_k)
    rng = np.random.default_rng(cfg.seed)
    beams = [State(prompt=tuple(prompt))]
    completed: dict[tuple[int, ...], float] = {}

    while True:
        pool: list[State] = []
        for candidate in beams:
            if is_terminal(candidate, vocab, cfg.max_length):
                pool.append(candidate)
                continue
            for _ in range(cfg.beam_width):
                state = candidate
                for _ in range(cfg.block_size):
                    if is_terminal(state, vocab, cfg.max_length):
                        break
                    token = sample_token(sampler.step_distribution(state), rng)
                    state = extend_state(state, token, vocab)
                pool.append(state)

        unique = list(dict.fromkeys(pool))
        scores = value.evaluate_batch(unique)
        ranked = sorted(zip(unique, (float(s) for s in scores)), key=_rank_key)
        for state, score in ranked:
            if is_terminal(state, vocab, cfg.max_length):
                completed.setdefault(state.generated, score)

        beams = [state for state, _ in ranked[: cfg.beam_width]]
        if all(is_terminal(s, vocab, cfg.max_length) for s in beams):
            break

    best_tokens, best_value = min(completed.items(), key=lambda kv: (-kv[1], kv[0]))
    trajectory = Trajectory(
        prompt=tuple(prompt),
        completion=best_tokens,
        policy_tag=beam_tag(cfg.beam_width, cfg.block_size),
        seed=cfg.seed,
    )
    return BeamOutcome(trajectory, best_value, sorted(completed.items()))


def blockwise_beam_search(
    base: PolicyBackend, value: ValueFunction, prompt: Sequence[int], cfg: BeamConfig
) -> Trajectory:
    return run_beam_search(base, value, prompt, cfg).trajectory
