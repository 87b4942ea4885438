"""Process settings and run-config loading."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path
from typing import Any

import yaml
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.models.schemas import RunConfig

CONFIG_DIR = Path(__file__).resolve().parent / "config"


class Settings(BaseSettings):
    """Centralised settings derived from ``GAIT_*`` environment variables."""

    log_level: str = Field(default="INFO")
    log_dir: Path = Field(default=Path("logs"))
    output_dir: Path = Field(default=Path("runs"), description="Root for run artifacts when a config omits one.")
    default_config: Path = Field(
        default=CONFIG_DIR / "default.json",
        description="Run config used when no --config is given.",
    )

    model_config = SettingsConfigDict(
        env_prefix="GAIT_",
        env_file=Path(__file__).resolve().parent.parent / ".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @field_validator("log_level")
    @classmethod
    def normalize_log_level(cls, value: str) -> str:
        valid = {"CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"}
        upper = value.upper()
        if upper not in valid:
            raise ValueError(f"GAIT_LOG_LEVEL must be one of {', '.join(sorted(valid))}")
        return upper


@lru_cache()
def get_settings() -> Settings:
    """Return cached settings instance so it can be reused across commands."""

    settings = Settings()
    settings.log_dir.mkdir(parents=True, exist_ok=True)
    return settings


def read_config_document(path: Path) -> dict[str, Any]:
    """Parse a JSON run-config document into a plain mapping."""

    with Path(path).open("r", encoding="utf-8") as fh:
        document = yaml.safe_load(fh)
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ValueError(f"{path}: top level of a run config must be an object")
    return document


def apply_overrides(document: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set dotted ``section.key`` overrides on a copy of ``document``; ``None`` values are skipped."""

    merged = yaml.safe_load(yaml.safe_dump(document))
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = merged
        *parents, leaf = dotted.split(".")
        for key in parents:
            target = target.setdefault(key, {})
        target[leaf] = value
    return merged


def load_run_config(path: Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read, override and validate a run config (``GAIT_DEFAULT_CONFIG`` when ``path`` is omitted)."""

    settings = get_settings()
    document = read_config_document(path or settings.default_config)
    document = apply_overrides(document, overrides or {})
    document.setdefault("output_dir", str(settings.output_dir / "default"))
    return RunConfig.model_validate(document)
