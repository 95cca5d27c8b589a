"""Configuration settings for the measure-mdp toolkit."""
import logging
import os
from typing import Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ToolConfig:
    """Runtime knobs shared by every command."""

    def __init__(
        self,
        threads: int = 1,
        policy_cap: int = 4096,
        log_level: str = "WARNING",
        output_dir: str = ".",
    ):
        self.threads = threads
        self.policy_cap = policy_cap
        self.log_level = log_level
        self.output_dir = output_dir

    def validate(self) -> None:
        """Validate the configuration settings."""
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}.")
        if self.policy_cap < 1:
            raise ValueError(f"policy_cap must be >= 1, got {self.policy_cap}.")
        if self.log_level.upper() not in _LOG_LEVELS:
            raise ValueError(
                f"log_level must be one of {', '.join(_LOG_LEVELS)}, got '{self.log_level}'."
            )
        if os.path.exists(self.output_dir) and not os.path.isdir(self.output_dir):
            raise ValueError(f"Output path '{self.output_dir}' is not a directory.")

    @property
    def logging_level(self) -> int:
        return getattr(logging, self.log_level.upper())

    @classmethod
    def from_env(cls) -> "ToolConfig":
        """Create configuration from environment variables."""
        return cls(
            threads=_int_env("MEASURE_MDP_THREADS", 1),
            policy_cap=_int_env("MEASURE_MDP_POLICY_CAP", 4096),
            log_level=os.getenv("MEASURE_MDP_LOG_LEVEL", "WARNING"),
            output_dir=os.getenv("MEASURE_MDP_OUTPUT_DIR", "."),
        )


def _int_env(name: str, default: int) -> int:
    raw: Optional[str] = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got '{raw}'.")
