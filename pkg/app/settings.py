from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="LISP_", env_file=".env", extra="ignore")

    threads: int = Field(default=1, ge=1)
    database_url: str = "sqlite:///runs/registry.db"
    log_level: str = "INFO"


@lru_cache
def get_settings() -> Settings:
    return Settings()
