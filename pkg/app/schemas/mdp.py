from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Vocabulary(BaseModel):
    vocab_size: int = Field(..., gt=0, description="Number of token ids")
    eos: Optional[int] = Field(
        0, description="End-of-sequence token id; null for fixed-length episodes"
    )
    names: Optional[list[str]] = Field(None, description="Display string per token id")

    model_config = ConfigDict(
        frozen=True,
        extra="forbid",
        json_schema_extra={
            "example": {"vocab_size": 6, "eos": 0, "names": ["<eos>", "a", "b", "c", "d", "e"]}
        },
    )

    @model_validator(mode="after")
    def _check_ids(self) -> "Vocabulary":
        if self.eos is not None and not 0 <= self.eos < self.vocab_size:
            raise ValueError(f"eos must be in [0, {self.vocab_size}), got {self.eos}")
        if self.names is not None and len(self.names) != self.vocab_size:
            raise ValueError(
                f"names must have exactly vocab_size={self.vocab_size} entries, "
                f"got {len(self.names)}"
            )
        return self

    def contains(self, token: int) -> bool:
        return 0 <= token < self.vocab_size

    def render(self, tokens: tuple[int, ...]) -> str:
        if self.names is None:
            return " ".join(str(t) for t in tokens)
        return " ".join(self.names[t] for t in tokens)


class State(BaseModel):
    """A prompt x plus the generated prefix y_{<=t}."""

    prompt: tuple[int, ...]
    generated: tuple[int, ...] = ()

    model_config = ConfigDict(frozen=True)

    @property
    def key(self) -> str:
        """Canonical key: prompt ids, separator, generated ids."""
        return ",".join(map(str, self.prompt)) + "|" + ",".join(map(str, self.generated))

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.generated

    @classmethod
    def from_key(cls, key: str) -> "State":
        prompt_part, _, generated_part = key.partition("|")
        return cls(
            prompt=tuple(int(t) for t in prompt_part.split(",") if t),
            generated=tuple(int(t) for t in generated_part.split(",") if t),
        )


class Trajectory(BaseModel):
    """One sampled completion; field order is the JSONL record order."""

    prompt: tuple[int, ...]
    completion: tuple[int, ...] = Field(..., min_length=1)
    reward: Optional[float] = None
    policy_tag: str
    iteration: int = 0
    seed: int = 0

    model_config = ConfigDict(
        frozen=True,
        extra="forbid",
        json_schema_extra={
            "example": {
                "prompt": [2],
                "completion": [1, 4, 0],
                "reward": 0.85,
                "policy_tag": "guided-blockwise-b2",
                "iteration": 2,
                "seed": 17,
            }
        },
    )

    @property
    def labeled(self) -> bool:
        return self.reward is not None

    def final_state(self) -> State:
        return State(prompt=self.prompt, generated=self.completion)
