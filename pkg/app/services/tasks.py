"""Builders turning experiment specs into policies, rewards and values, plus the toy task."""

import json
import logging
from pathlib import Path

from app.core.errors import ConfigError, IoFailure
from app.schemas.config import (
    ExperimentConfig,
    PolicySpec,
    RewardSpec,
    TaskSpec,
    ValueSpec,
)
from app.schemas.mdp import Vocabulary
from app.services.policy import PolicyBackend, TabularPolicy, fit_ngram, fit_softmax_policy
from app.services.remote_policy import RemotePolicyClient
from app.services.reward import FeatureLinearReward, RewardModel, SubsequenceReward
from app.services.value import MlpValue, TabularValue, ValueFunction

logger = logging.getLogger(__name__)

TOY_VOCAB = Vocabulary(vocab_size=6, eos=0, names=["<eos>", "a", "b", "c", "d", "e"])
TOY_MAX_LENGTH = 5
TOY_PROMPTS: list[list[int]] = [[1], [2], [3], [5], [1, 2], [2, 3], [3, 5], [5, 1]]

# Token 4 ("d") is rare, so unguided completions seldom hit the rewarded target.
TOY_CORPUS: list[list[int]] = [
    [1, 2, 3, 0],
    [2, 3, 5, 0],
    [3, 5, 1, 0],
    [5, 1, 2, 3, 0],
    [1, 2, 0],
    [2, 3, 0],
    [3, 1, 2, 0],
    [1, 3, 5, 0],
    [5, 2, 3, 0],
    [3, 5, 2, 1, 0],
    [1, 5, 3, 2, 0],
    [2, 4, 0],
]

# Second corpus over the same vocabulary for transfer experiments.
TOY_CORPUS_B: list[list[int]] = [
    [1, 1, 2, 0],
    [2, 5, 5, 0],
    [3, 2, 1, 0],
    [5, 3, 1, 2, 0],
    [1, 5, 0],
    [2, 1, 3, 0],
    [3, 3, 5, 0],
    [5, 5, 2, 1, 0],
    [3, 4, 0],
]


def toy_experiment() -> ExperimentConfig:
    """The canonical toy task: vocab 6, max_length 5, bigram base, reward for emitting "d"."""
    return ExperimentConfig.model_validate(
        {
            "task": {
                "name": "toy",
                "vocabulary": TOY_VOCAB.model_dump(),
                "max_length": TOY_MAX_LENGTH,
                "prompts": TOY_PROMPTS,
            },
            "policy": {"kind": "ngram", "corpus": TOY_CORPUS, "order": 2, "alpha": 0.5},
            "reward": {
                "kind": "subsequence",
                "target": [4],
                "hit_value": 1.0,
                "miss_value": 0.0,
                "length_penalty": 0.05,
            },
            "value": {"kind": "mlp"},
            "ivr": {
                "train": {"optimizer": "adamw", "learning_rate": 0.02, "epochs": 2},
            },
            "guidance": {"block_size": 2},
            "beam": {
                "beam_width": 4,
                "block_size": 2,
                "max_length": TOY_MAX_LENGTH,
                "samples_per_prompt": 8,
            },
            "transfer_policy": {"kind": "ngram", "corpus": TOY_CORPUS_B, "order": 2, "alpha": 0.5},
        }
    )


def _read_json(path: str, key: str) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {key} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(key, f"{path} is not valid JSON: {exc}") from exc


def load_prompts(task: TaskSpec) -> list[list[int]]:
    if task.prompts is not None:
        return task.prompts
    assert task.prompt_file is not None
    raw = _read_json(task.prompt_file, "prompt_file")
    if not isinstance(raw, list) or not all(isinstance(p, list) for p in raw):
        raise ConfigError("prompt_file", "expected a JSON list of token lists")
    prompts = [[int(t) for t in p] for p in raw]
    for prompt in prompts:
        if any(not task.vocabulary.contains(t) for t in prompt):
            raise ConfigError("prompt_file", f"prompt {prompt} has tokens outside the vocabulary")
    return prompts


def _corpus(spec: PolicySpec) -> list[list[int]]:
    if spec.corpus is not None:
        return spec.corpus
    if spec.corpus_file is None:
        raise ConfigError("policy.corpus", f"{spec.kind} policy needs corpus or corpus_file")
    raw = _read_json(spec.corpus_file, "corpus_file")
    if not isinstance(raw, list):
        raise ConfigError("corpus_file", "expected a JSON list of token lists")
    return [[int(t) for t in seq] for seq in raw]


def build_policy(spec: PolicySpec, vocab: Vocabulary) -> PolicyBackend:
    if spec.kind == "tabular":
        assert spec.table_file is not None
        return TabularPolicy.load(spec.table_file, vocab)
    if spec.kind == "ngram":
        return fit_ngram(_corpus(spec), spec.order, spec.alpha, vocab)
    if spec.kind == "softmax":
        return fit_softmax_policy(_corpus(spec), vocab, spec.learning_rate, spec.epochs)
    return RemotePolicyClient(
        vocab, endpoint=spec.endpoint, timeout=spec.timeout, retry_budget=spec.retry_budget
    )


def build_reward(spec: RewardSpec, max_length: int) -> RewardModel:
    if spec.kind == "subsequence":
        return SubsequenceReward(
            spec.target, spec.hit_value, spec.miss_value, spec.length_penalty, max_length
        )
    assert spec.weights is not None
    return FeatureLinearReward(spec.weights, spec.bias, max_length)


def build_value(
    spec: ValueSpec, vocab: Vocabulary, max_length: int, reward: RewardModel
) -> ValueFunction:
    if spec.kind == "tabular":
        return TabularValue(reward.reward_range)
    return MlpValue(
        vocab.vocab_size, max_length, reward.reward_range, spec.hidden_sizes, spec.init_seed
    )
