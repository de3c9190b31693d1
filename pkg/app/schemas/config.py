from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.mdp import Vocabulary


class GuidanceConfig(BaseModel):
    beta: float = Field(1.0, ge=0, description="Guidance strength trading reward against KL")
    k: int = Field(20, ge=1, description="Top-k width of value evaluations; clamped to vocab size")
    block_size: int = Field(
        4, ge=1, description="Guidance applies when generated length % block_size == 0"
    )
    temperature: float = Field(0.7, gt=0, description="Temperature applied to the base policy")
    mode: Literal["dense", "sparse"] = Field(
        "dense", description="dense normalizes over the vocabulary, sparse over top-k plus tail"
    )

    model_config = ConfigDict(extra="forbid")


class BeamConfig(BaseModel):
    beam_width: int = Field(4, ge=1, description="Number of kept candidates B")
    block_size: int = Field(2, ge=1, description="Tokens per sampled continuation block")
    max_length: int = Field(5, ge=1)
    temperature: float = Field(0.7, gt=0, description="Temperature of continuation sampling")
    seed: int = 0
    top_k: Optional[int] = Field(None, ge=1, description="Restrict continuation sampling to top-k")
    samples_per_prompt: int = Field(
        1, ge=1, description="Beam searches per prompt and seed when evaluating a value"
    )

    model_config = ConfigDict(extra="forbid")


class TrainConfig(BaseModel):
    learning_rate: float = Field(0.05, gt=0)
    epochs: int = Field(2, ge=1)
    batch_size: int = Field(16, ge=1)
    seed: int = 0
    optimizer: Literal["sgd", "adamw"] = "sgd"
    weight_decay: float = Field(0.0, ge=0, description="Decoupled weight decay (adamw only)")

    model_config = ConfigDict(extra="forbid")


class IvrConfig(BaseModel):
    K: int = Field(4, description="Trajectories sampled per prompt")
    iterations: int = Field(2, description="Fixed number of refinement iterations")
    beta_collect: float = Field(2.0, ge=0, description="beta of guided collection from iteration 2")
    temperature: float = Field(0.7, gt=0)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    seed: int = 0
    warm_start: bool = True
    data_mode: Literal["replace", "accumulate"] = "replace"
    compose_guidance: bool = Field(
        False, description="Wrap the previous guided policy again instead of the original base"
    )
    collect_block_size: Optional[int] = Field(
        None, ge=1, description="Block size of guided collection; defaults to guidance.block_size"
    )

    model_config = ConfigDict(extra="forbid")

    @field_validator("K")
    @classmethod
    def _check_k(cls, v: int) -> int:
        if v < 1:
            raise ValueError("K must be ≥ 1")
        return v

    @field_validator("iterations")
    @classmethod
    def _check_iterations(cls, v: int) -> int:
        if v < 1:
            raise ValueError("iterations must be ≥ 1")
        return v

    def collection_guidance(self) -> GuidanceConfig:
        return self.guidance.model_copy(
            update={
                "beta": self.beta_collect,
                "temperature": self.temperature,
                "block_size": self.collect_block_size or self.guidance.block_size,
            }
        )


class SweepSpec(BaseModel):
    beta_grid: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0, 4.0])
    samples_per_point: int = Field(
        16, ge=1, description="Samples per prompt and seed (monte_carlo)"
    )
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    mode: Literal["tokenwise", "blockwise"] = "tokenwise"
    metric_estimator: Literal["exact", "monte_carlo"] = "exact"

    model_config = ConfigDict(extra="forbid")

    @field_validator("beta_grid")
    @classmethod
    def _check_grid(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("beta_grid must be nonempty")
        if any(b < 0 for b in v):
            raise ValueError("beta_grid entries must be ≥ 0")
        if any(later <= earlier for earlier, later in zip(v, v[1:])):
            raise ValueError("beta_grid must be strictly increasing")
        return v

    @field_validator("seeds")
    @classmethod
    def _check_seeds(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("seeds must be nonempty")
        return v


class AblationSpec(BaseModel):
    axis: Literal["K", "iterations"] = "K"
    grid: list[int] = Field(default_factory=lambda: [1, 2, 4, 5])
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])

    model_config = ConfigDict(extra="forbid")

    @field_validator("grid")
    @classmethod
    def _check_grid(cls, v: list[int]) -> list[int]:
        if not v or any(g < 1 for g in v):
            raise ValueError("grid must be nonempty with entries ≥ 1")
        return v


class OracleSpec(BaseModel):
    beta: float = Field(1.0, ge=0)
    tol: float = Field(1e-10, gt=0)
    max_iters: int = Field(10_000, ge=1)

    model_config = ConfigDict(extra="forbid")


class SpeedSpec(BaseModel):
    block_sizes: list[int] = Field(default_factory=lambda: [1, 2, 4])
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])

    model_config = ConfigDict(extra="forbid")

    @field_validator("block_sizes")
    @classmethod
    def _check_sizes(cls, v: list[int]) -> list[int]:
        if not v or any(b < 1 for b in v):
            raise ValueError("block_sizes must be nonempty with entries ≥ 1")
        return v


def _require_file(value: Optional[str], key: str) -> None:
    if value is not None and not Path(value).is_file():
        raise ValueError(f"{key} does not exist: {value}")


class PolicySpec(BaseModel):
    kind: Literal["tabular", "ngram", "softmax", "remote"] = "ngram"
    table_file: Optional[str] = Field(None, description="JSON map of state key to dense row")
    corpus: Optional[list[list[int]]] = Field(None, description="Inline training corpus")
    corpus_file: Optional[str] = Field(None, description="JSON list of token sequences")
    order: int = Field(2, ge=1)
    alpha: float = Field(0.5, gt=0)
    learning_rate: float = Field(0.5, gt=0, description="softmax policy training rate")
    epochs: int = Field(200, ge=1, description="softmax policy training epochs")
    endpoint: Optional[str] = None
    timeout: Optional[float] = Field(None, gt=0)
    retry_budget: Optional[int] = Field(None, ge=1)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _check_sources(self) -> "PolicySpec":
        _require_file(self.table_file, "table_file")
        _require_file(self.corpus_file, "corpus_file")
        if self.kind == "tabular" and self.table_file is None:
            raise ValueError("tabular policy requires table_file")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote policy requires endpoint")
        return self


class RewardSpec(BaseModel):
    kind: Literal["subsequence", "feature_linear"] = "subsequence"
    target: list[int] = Field(default_factory=lambda: [4])
    hit_value: float = 1.0
    miss_value: float = 0.0
    length_penalty: float = 0.05
    weights: Optional[list[float]] = None
    bias: float = 0.0

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _check_kind(self) -> "RewardSpec":
        if self.kind == "feature_linear" and not self.weights:
            raise ValueError("feature_linear reward requires weights")
        return self


class ValueSpec(BaseModel):
    kind: Literal["tabular", "mlp"] = "tabular"
    hidden_sizes: list[int] = Field(default_factory=lambda: [16])
    init_seed: int = 0

    model_config = ConfigDict(extra="forbid")


class TaskSpec(BaseModel):
    name: str = "toy"
    vocabulary: Vocabulary
    max_length: int = Field(..., ge=1)
    prompts: Optional[list[list[int]]] = None
    prompt_file: Optional[str] = Field(None, description="JSON list of prompts")
    prompt_weights: Optional[list[float]] = Field(
        None, description="Initial distribution over prompts"
    )

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _check_prompts(self) -> "TaskSpec":
        _require_file(self.prompt_file, "prompt_file")
        if self.prompts is None and self.prompt_file is None:
            raise ValueError("task needs prompts or prompt_file")
        if self.prompts is not None:
            for prompt in self.prompts:
                if any(not self.vocabulary.contains(t) for t in prompt):
                    raise ValueError(f"prompt {prompt} has tokens outside the vocabulary")
            if self.prompt_weights is not None and len(self.prompt_weights) != len(self.prompts):
                raise ValueError("prompt_weights must match the number of prompts")
        return self


class ExperimentConfig(BaseModel):
    """Everything a CLI run needs; unknown keys are rejected at every level."""

    task: TaskSpec
    policy: PolicySpec = Field(default_factory=PolicySpec)
    reward: RewardSpec = Field(default_factory=RewardSpec)
    value: ValueSpec = Field(default_factory=ValueSpec)
    ivr: IvrConfig = Field(default_factory=IvrConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    beam: BeamConfig = Field(default_factory=BeamConfig)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    ablation: AblationSpec = Field(default_factory=AblationSpec)
    oracle: OracleSpec = Field(default_factory=OracleSpec)
    speed: SpeedSpec = Field(default_factory=SpeedSpec)
    transfer_policy: Optional[PolicySpec] = Field(
        None, description="Second base policy guided by a value trained against `policy`"
    )
    output_dir: Optional[str] = None
    seed: int = 0
    workers: Optional[int] = Field(None, ge=1)

    model_config = ConfigDict(extra="forbid")
