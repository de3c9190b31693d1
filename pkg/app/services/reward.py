"""Terminal reward models R(x, y) with declared bounds."""

import logging
from abc import ABC, abstractmethod
from collections.abc import Sequence

from app.core.errors import AlreadyLabeled, EmptyCompletion, InvariantViolation
from app.schemas.mdp import Trajectory

logger = logging.getLogger(__name__)


class RewardModel(ABC):
    """Pure scorer of a completed (prompt, completion) pair with score in [r_min, r_max]."""

    kind: str = "abstract"

    @property
    @abstractmethod
    def r_min(self) -> float: ...

    @property
    @abstractmethod
    def r_max(self) -> float: ...

    @property
    def reward_range(self) -> tuple[float, float]:
        return (self.r_min, self.r_max)

    @abstractmethod
    def _score(self, prompt: tuple[int, ...], completion: tuple[int, ...]) -> float: ...

    def score(self, prompt: Sequence[int], completion: Sequence[int]) -> float:
        if len(completion) == 0:
            raise EmptyCompletion("cannot score an empty completion")
        return self._score(tuple(prompt), tuple(completion))


def contains_run(sequence: tuple[int, ...], target: tuple[int, ...]) -> bool:
    """True when `target` occurs as a contiguous run inside `sequence`."""
    n = len(target)
    return any(sequence[i:i + n] == target for i in range(len(sequence) - n + 1))


class SubsequenceReward(RewardModel):
    """
    hit_value if the completion contains `target` contiguously, else miss_value, minus
    length_penalty per completion token.
    """

    kind = "subsequence"

    def __init__(
        self,
        target: Sequence[int],
        hit_value: float,
        miss_value: float,
        length_penalty: float,
        max_length: int,
    ):
        if len(target) == 0:
            raise InvariantViolation("subsequence reward target must be nonempty")
        if hit_value <= miss_value:
            raise InvariantViolation(
                f"hit_value ({hit_value}) must exceed miss_value ({miss_value})"
            )
        if max_length < 1:
            raise InvariantViolation(f"max_length must be >= 1, got {max_length}")
        self.target = tuple(int(t) for t in target)
        self.hit_value = float(hit_value)
        self.miss_value = float(miss_value)
        self.length_penalty = float(length_penalty)
        self.max_length = max_length

    @property
    def r_min(self) -> float:
        return self.miss_value - max(self.length_penalty, self.length_penalty * self.max_length)

    @property
    def r_max(self) -> float:
        return self.hit_value - min(self.length_penalty, self.length_penalty * self.max_length)

    def _score(self, prompt: tuple[int, ...], completion: tuple[int, ...]) -> float:
        base = self.hit_value if contains_run(completion, self.target) else self.miss_value
        return base - self.length_penalty * len(completion)


class FeatureLinearReward(RewardModel):
    """score = bias + sum of weights[y_t] over the completion."""

    kind = "feature_linear"

    def __init__(self, weights: Sequence[float], bias: float, max_length: int):
        if len(weights) == 0:
            raise InvariantViolation("feature weights must be nonempty")
        if max_length < 1:
            raise InvariantViolation(f"max_length must be >= 1, got {max_length}")
        self.weights = tuple(float(w) for w in weights)
        self.bias = float(bias)
        self.max_length = max_length

    @property
    def r_min(self) -> float:
        low = min(self.weights)
        return self.bias + min(low, low * self.max_length)

    @property
    def r_max(self) -> float:
        high = max(self.weights)
        return self.bias + max(high, high * self.max_length)

    def _score(self, prompt: tuple[int, ...], completion: tuple[int, ...]) -> float:
        total = self.bias
        for token in completion:
            if not 0 <= token < len(self.weights):
                raise InvariantViolation(f"token {token} has no reward weight")
            total += self.weights[token]
        return total


def label_trajectories(reward: RewardModel, trajectories: Sequence[Trajectory]) -> list[Trajectory]:
    """
    Return copies of `trajectories` with reward set, in input order.

    Raises:
        AlreadyLabeled: If any trajectory already carries a reward; nothing is relabeled.
    """
    for t in trajectories:
        if t.labeled:
            raise AlreadyLabeled(
                f"trajectory with seed {t.seed} (iteration {t.iteration}) is already labeled"
            )
    labeled = [
        t.model_copy(update={"reward": reward.score(t.prompt, t.completion)}) for t in trajectories
    ]
    if labeled:
        logger.debug(
            f"Labeled {len(labeled)} trajectories",
            extra={"operation": "label_trajectories", "count": len(labeled)},
        )
    return labeled
