from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime settings, read from the environment and an optional .env file."""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    PROJECT_NAME: str = "Semantic-Style Fusion Engine"

    # Overrides the experiment config seed when set
    DSSI_SEED: Optional[int] = None

    # Execution Settings
    DEFAULT_THREADS: int = 0  # 0 = one worker per CPU
    DEFAULT_FORMAT: str = "both"
    OUTPUT_DIR: str = "results"

    # Logging Settings
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Verification Settings
    BOUND_TOLERANCE: float = 1e-12


settings = Settings()


def get_settings() -> Settings:
    """Re-read settings so environment changes made after import are honoured."""
    return Settings()
