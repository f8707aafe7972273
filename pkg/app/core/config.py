import os
from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Process-level settings.

    These settings can be configured using environment variables or a `.env` file.
    Experiment hyperparameters live in the experiment YAML, not here.
    """
    PROJECT_NAME: str = "adaptlab"
    PROJECT_DESCRIPTION: str = "Desk-scale lab for lightweight adaptation of text-to-text transformers"
    VERSION: str = "0.1.0"
    DEBUG: bool = False

    # Logging settings
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True
    PROGRESS_BARS: bool = False

    # Runner settings
    WORKERS: int = int(os.getenv("WORKERS", "1"))
    DEFAULT_SEED: int = 0
    OUTPUT_DIR: str = "runs"
    CONFIG_PATH: Optional[str] = None

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        """
        Accept lower-case level names.
        """
        return str(v).upper()

    @field_validator("WORKERS")
    @classmethod
    def validate_workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("WORKERS must be at least 1")
        return v

    class Config:
        case_sensitive = True
        env_file = ".env"
        extra = "ignore"


settings = Settings()
