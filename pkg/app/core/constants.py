APP_NAME: str = "IVR Decoding Engine"
APP_VERSION: str = "0.1.0"

# Routes served by the bundled remote-policy stub server
REMOTE_ROUTES: dict[str, str] = {
    "next_token_distribution": "/v1/next_token_distribution",
    "health": "/health",
}

# Wire encoding of a zero tail mass (exp(-1e30) == 0.0)
ZERO_TAIL_LOGPROB: float = -1e30

CHECKPOINT_VERSION: str = "1"

# Stable policy tags consumed by reports
BASE_POLICY_TAG: str = "base"
TOKENWISE_TAG: str = "guided-tokenwise"


def blockwise_tag(block_size: int) -> str:
    return f"guided-blockwise-b{block_size}"


def beam_tag(beam_width: int, block_size: int) -> str:
    return f"beam-B{beam_width}-b{block_size}"


# Tolerances shared by distribution checks
NORMALIZATION_TOL: float = 1e-9
REMOTE_NORMALIZATION_TOL: float = 1e-6
