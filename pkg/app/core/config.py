import os
from pathlib import Path


def get_env_int(name: str, default: int) -> int:
    """Fetch an int environment variable with clear error reporting."""
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ValueError(f"Environment variable {name} must be an integer, got {raw!r}") from exc


def get_env_float(name: str, default: float) -> float:
    """Fetch a float environment variable with clear error reporting."""
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ValueError(f"Environment variable {name} must be a float, got {raw!r}") from exc


def read_token_from_file_or_env(env_var: str, file_env_var: str) -> str:
    """
    Read a token from a file path specified in file_env_var, or fall back to env_var.

    Args:
        env_var: Name of environment variable containing the token directly
        file_env_var: Name of environment variable containing path to file with token

    Returns:
        The token string, or empty string if neither is set

    Raises:
        ValueError: If file path is specified but file cannot be read
    """
    file_path = os.getenv(file_env_var, "")
    if file_path:
        try:
            token = Path(file_path).read_text(encoding="utf-8").strip()
        except FileNotFoundError as exc:
            raise ValueError(f"Token file not found: {file_path}") from exc
        except PermissionError as exc:
            raise ValueError(f"Permission denied reading token file: {file_path}") from exc
        except OSError as exc:
            raise ValueError(f"Error reading token file {file_path}: {exc}") from exc
        if not token:
            raise ValueError(f"Token file {file_path} is empty")
        return token

    return os.getenv(env_var, "").strip()


class Settings:
    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Run artefacts and parallelism
    IVR_OUTPUT_DIR: str = os.getenv("IVR_OUTPUT_DIR", "runs")
    IVR_WORKERS: int = get_env_int("IVR_WORKERS", os.cpu_count() or 1)

    # Exact oracle
    ORACLE_STATE_BUDGET: int = get_env_int("ORACLE_STATE_BUDGET", 10_000_000)

    # Remote logprob backend
    REMOTE_POLICY_URL: str = os.getenv("REMOTE_POLICY_URL", "")
    REMOTE_POLICY_TOKEN: str = read_token_from_file_or_env(
        "REMOTE_POLICY_TOKEN", "REMOTE_POLICY_TOKEN_FILE"
    )
    REMOTE_TIMEOUT: float = get_env_float("REMOTE_TIMEOUT", 10.0)  # seconds
    REMOTE_MAX_IN_FLIGHT: int = get_env_int("REMOTE_MAX_IN_FLIGHT", 8)

    # Retry configuration for remote calls
    REMOTE_RETRY_MAX_ATTEMPTS: int = get_env_int("REMOTE_RETRY_MAX_ATTEMPTS", 3)
    REMOTE_RETRY_BASE_DELAY: float = get_env_float("REMOTE_RETRY_BASE_DELAY", 0.1)
    REMOTE_RETRY_MAX_DELAY: float = get_env_float("REMOTE_RETRY_MAX_DELAY", 1.0)
    REMOTE_RETRY_BACKOFF_FACTOR: float = get_env_float("REMOTE_RETRY_BACKOFF_FACTOR", 2.0)
    REMOTE_RETRY_JITTER: bool = os.getenv("REMOTE_RETRY_JITTER", "true").lower() == "true"

    # Bundled stub server
    STUB_HOST: str = os.getenv("STUB_HOST", "127.0.0.1")
    STUB_PORT: int = get_env_int("STUB_PORT", 8000)
    # Empty disables bearer-token checks on the stub server
    STUB_ACCESS_TOKEN: str = read_token_from_file_or_env(
        "STUB_ACCESS_TOKEN", "STUB_ACCESS_TOKEN_FILE"
    )

    DEBUG: bool = LOG_LEVEL == "DEBUG"

    def validate(self) -> None:
        """
        Validate runtime-dependent configuration values.

        Raises:
            ValueError: If LOG_LEVEL is not a standard level name, or a count/budget/timeout
                setting is not positive.
        """
        allowed_levels: tuple[str, ...] = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
        if self.LOG_LEVEL.upper() not in allowed_levels:
            raise ValueError(f"LOG_LEVEL must be one of {allowed_levels}, got {self.LOG_LEVEL!r}")

        positive_ints = {
            "IVR_WORKERS": self.IVR_WORKERS,
            "ORACLE_STATE_BUDGET": self.ORACLE_STATE_BUDGET,
            "REMOTE_MAX_IN_FLIGHT": self.REMOTE_MAX_IN_FLIGHT,
            "REMOTE_RETRY_MAX_ATTEMPTS": self.REMOTE_RETRY_MAX_ATTEMPTS,
        }
        for name, value in positive_ints.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")

        if self.REMOTE_TIMEOUT <= 0:
            raise ValueError(f"REMOTE_TIMEOUT must be > 0, got {self.REMOTE_TIMEOUT}")


# Maintain a singleton Settings instance across reloads so references stay live.
_settings_instance: Settings | None = globals().get("_settings_instance")

if _settings_instance is None:
    new_settings = Settings()
    new_settings.validate()
    _settings_instance = new_settings
else:
    # Refresh existing instance in place so other modules retain the same object reference.
    refreshed_settings = Settings()
    refreshed_settings.validate()
    for attr in dir(refreshed_settings):
        if attr.isupper():
            setattr(_settings_instance, attr, getattr(refreshed_settings, attr))

settings = _settings_instance
globals()["_settings_instance"] = _settings_instance
