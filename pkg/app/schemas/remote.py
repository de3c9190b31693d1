from pydantic import BaseModel, ConfigDict, Field


class NextTokenRequest(BaseModel):
    context: list[int] = Field(..., description="Prompt and generated token ids, concatenated")
    k: int = Field(..., ge=1, description="Maximum number of tokens to return")
    temperature: float = Field(1.0, gt=0, description="Sampling temperature applied server-side")

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={"example": {"context": [2, 1], "k": 3, "temperature": 0.7}},
    )


class NextTokenResponse(BaseModel):
    token_ids: list[int] = Field(..., description="Returned token ids, at most k")
    logprobs: list[float] = Field(..., description="Log-probability per returned token")
    tail_logprob: float = Field(
        ..., description="Log of the mass outside token_ids; -1e30 for zero"
    )

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "token_ids": [1, 4, 0],
                "logprobs": [-0.51, -1.2, -2.3],
                "tail_logprob": -2.05,
            }
        }
    )
