from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class IterationReport(BaseModel):
    index: int = Field(..., ge=1)
    policy_tag: str
    trajectories: int = Field(..., description="Trajectories collected: K x number of prompts")
    regression_samples: int
    mean_reward: float
    std_reward: float = Field(..., ge=0)
    final_loss: float = Field(..., description="Mean training loss of the final epoch")
    loss_trace: list[float]
    trajectory_file: str
    checkpoint: str


class RunManifest(BaseModel):
    config: dict[str, Any]
    iterations: list[IterationReport] = Field(default_factory=list)


class CommandManifest(BaseModel):
    """Everything needed to rerun one CLI invocation."""

    command: str
    argv: list[str]
    config: dict[str, Any]
    outputs: list[str] = Field(default_factory=list)
    status: Literal["ok", "error"] = "ok"
    error: Optional[str] = Field(None, description="Failure message when status is error")
    duration_ms: Optional[float] = None


class SweepRow(BaseModel):
    beta: float
    mean_reward: float
    std_reward: float = Field(..., ge=0)
    mean_token_kl: float
    wall_clock_per_token: float

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "beta": 1.0,
                "mean_reward": 0.512,
                "std_reward": 0.0,
                "mean_token_kl": 0.0871,
                "wall_clock_per_token": 2.1e-05,
            }
        }
    )


class ComparisonRow(BaseModel):
    variant: str
    mean_reward: float
    std_reward: float = Field(..., ge=0)
    samples: int


class AblationRow(BaseModel):
    axis: str
    value: int
    mean_reward: float
    std_reward: float = Field(..., ge=0)


class SpeedRow(BaseModel):
    block_size: int
    relative_time: float
    value_evals_per_token: float
    wall_clock_per_token: float


class TransferRow(BaseModel):
    variant: str
    mean_reward: float
    std_reward: float = Field(..., ge=0)
    samples: int
