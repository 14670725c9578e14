"""
Process-level configuration using Pydantic Settings

Settings are loaded from environment variables (or .env file).
Run documents (what to train, on which data) live in
takws.models.schemas; this module only covers how the process runs.
"""

from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Toolkit settings loaded from environment variables.

    Environment variables are matched case-insensitively with the
    TAKWS_ prefix. Example: TAKWS_LOG_FORMAT=console
    """

    # Logging
    log_level: str = "INFO"
    log_format: str = "json"  # json or console

    # Compute
    num_threads: int | None = None

    # Run document fallbacks
    default_seed: int = 0
    output_dir: str = "runs"

    # Scoring and progress
    eval_batch_size: int = 256  # utterances per scoring forward pass
    show_progress: bool = False

    model_config = SettingsConfigDict(
        env_prefix="TAKWS_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )


@lru_cache
def get_settings() -> Settings:
    """
    Settings for this process, read once.

    Tests that change TAKWS_* variables call get_settings.cache_clear().
    """
    return Settings()
