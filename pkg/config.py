from pydantic_settings import BaseSettings
from functools import lru_cache


class Settings(BaseSettings):
    # Upper bound on worker threads for per-line evaluation.
    THREADS: int = 1
    LOG_LEVEL: str = "INFO"
    # Used when neither the run config nor --out names a directory.
    OUT_DIR: str = "runs"

    class Config:
        env_prefix = "MASKDIFF_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        extra = "ignore"


# Cache the settings instance for reuse
@lru_cache()
def get_settings() -> Settings:
    return Settings()
