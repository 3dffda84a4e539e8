"""Experiment configuration: one JSON file, unknown keys rejected everywhere."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from .data import GenConfig
from .errors import ValidationError
from .losses import LossWeights
from .training import Schedule


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    source: Literal["synthetic", "files"] = "synthetic"
    synthetic: GenConfig = Field(default_factory=GenConfig)
    data_path: str | None = None
    meta_path: str | None = None
    train_fraction: float = Field(2.0 / 3.0, gt=0, lt=1)
    split_seed: int = 0
    normalize: bool = True
    fused_length: int | None = Field(None, ge=2)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "files" and not (self.data_path and self.meta_path):
            raise ValueError("source 'files' needs data_path and meta_path")
        return self


class ModelConfig(_Strict):
    widths: list[int] = Field(default_factory=lambda: [16, 32], min_length=1)
    kernel_size: int = Field(5, ge=1)
    d_sem: int = Field(64, ge=1)


class OutputConfig(_Strict):
    dir: str = "runs/default"
    save_checkpoints: bool = True
    # off by default: wall times would break byte-identical metrics across reruns
    record_wall_time: bool = False


class ExperimentConfig(_Strict):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    schedule: Schedule = Field(default_factory=Schedule)
    output: OutputConfig = Field(default_factory=OutputConfig)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)

    def resolved(self):
        """Every effective value, defaults included, as plain JSON data."""
        return self.model_dump(mode="json")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e
    return parse_config(raw)


def parse_config(raw) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except PydanticValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(x) for x in first["loc"])
        raise ValidationError(f"{first['msg']} ({e.error_count()} error(s))", field=loc or None) from e


def load_grid(path):
    """Grid file: ``{"alpha": [...], "beta": [...], "gamma": [...]}``; missing axes keep the config value."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read grid {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ValidationError("grid must be a JSON object")
    unknown = set(raw) - {"alpha", "beta", "gamma"}
    if unknown:
        raise ValidationError(f"unknown grid axes {sorted(unknown)}")
    for k, v in raw.items():
        if not isinstance(v, list) or not v or not all(isinstance(x, (int, float)) and x >= 0 for x in v):
            raise ValidationError("must be a non-empty list of non-negative numbers", field=k)
    return raw
