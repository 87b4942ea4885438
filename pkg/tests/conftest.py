"""Pytest configuration for global fixtures and logging setup."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

os.environ["GAIT_LOG_LEVEL"] = os.environ.get("GAIT_LOG_LEVEL") or "INFO"
os.environ["GAIT_LOG_DIR"] = os.environ.get("GAIT_LOG_DIR") or tempfile.mkdtemp(prefix="gait-logs-")

from app.config import CONFIG_DIR, read_config_document
from app.logging_config import configure_logging
from app.models.schemas import RunConfig
from app.services.data import DatasetIndex, synthesize

configure_logging()

TINY_CONFIG = CONFIG_DIR / "tiny.json"


@pytest.fixture
def rng() -> np.random.Generator:
    """Fresh, seeded generator per test."""

    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_document() -> dict:
    """Raw tiny run-config document."""

    return read_config_document(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_run(tiny_document: dict) -> RunConfig:
    """Validated tiny run config."""

    return RunConfig.model_validate(tiny_document)


@pytest.fixture(scope="session")
def tiny_index(tiny_run: RunConfig) -> DatasetIndex:
    """Synthetic dataset described by the tiny config."""

    assert tiny_run.data.generator is not None
    return synthesize(tiny_run.data.generator, tiny_run.data.train_ids)


@pytest.fixture
def tiny_config_file(tmp_path: Path, tiny_document: dict) -> Path:
    """Tiny run config written next to a per-test output directory."""

    document = dict(tiny_document)
    document["output_dir"] = str(tmp_path / "run")
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return path
