"""Declarative experiment configuration (JSON, versioned with ``"format": 1``)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .models import TrainingHyperparams

CONFIG_FORMAT = 1

ABLATIONS = {
    "no-prom": {"no_prom": True},
    "no-file": {"no_file": True},
    "ce-only": {"loss_variant": "ce_only"},
    "location-only": {"loss_variant": "location_only"},
    "ce-mse": {"loss_variant": "ce_mse"},
    "reinit-meta": {"reinit_meta": True},
}


class ConfigError(ValueError):
    """Raised for schema violations; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSource(_Strict):
    """``source`` is ``"digits"`` (scikit-learn 8x8 digits), ``"synthetic"``, or ``"path"``."""

    source: Literal["digits", "synthetic", "path"] = "digits"
    path: Optional[str] = None
    synthetic_size: int = Field(2000, ge=1)
    synthetic_classes: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _path_given(self):
        if self.source == "path" and not self.path:
            raise ValueError("dataset.path is required when source is 'path'")
        return self


class TierConfig(_Strict):
    name: str
    arch: Literal["large", "medium", "small"]
    devices: int = Field(ge=1)


class HyperparamConfig(_Strict):
    learning_rate: float = Field(1e-3, ge=0)
    momentum: float = Field(0.05, ge=0)
    batch_size: int = Field(32, ge=1)


class AblationConfig(_Strict):
    no_prom: bool = False
    loss_variant: Literal["full", "location_only", "ce_only", "ce_mse"] = "full"
    no_file: bool = False
    reinit_meta: bool = False
    fidelity_exponent: float = Field(1.0, gt=0)


class ConvergenceConfig(_Strict):
    window: int = Field(3, ge=1)
    epsilon: float = Field(0.005, ge=0)


def _default_tiers():
    return [TierConfig(name=n, arch=n, devices=3) for n in ("large", "medium", "small")]


class ExperimentConfig(_Strict):
    format: Literal[1] = 1
    name: str = "run"
    method: Literal["moss", "fedavg_homogeneous", "logit_distillation"] = "moss"
    dataset: DatasetSource = DatasetSource()
    public_dataset: Optional[DatasetSource] = None
    tiers: list[TierConfig] = Field(default_factory=_default_tiers, min_length=1)
    samples_per_device: int = Field(100, ge=1)
    alpha: float = Field(0.1, gt=0)
    public_size: int = Field(100, ge=1)
    test_size: Optional[int] = Field(None, ge=1)
    rounds: int = Field(50, ge=0)
    local_epochs: int = Field(5, ge=0)
    wire_epochs: int = Field(5, ge=0)
    hp: HyperparamConfig = HyperparamConfig()
    participation_fraction: float = Field(1.0, gt=0, le=1)
    seed: int = 0
    ablation: AblationConfig = AblationConfig()
    proxy_start: Literal["global", "own"] = "global"
    convergence: ConvergenceConfig = ConvergenceConfig()
    eval_per_device: bool = False
    threads: int = Field(1, ge=1)

    @field_validator("tiers")
    @classmethod
    def _unique_tier_names(cls, tiers):
        names = [t.name for t in tiers]
        if len(set(names)) != len(names):
            raise ValueError("tier names must be unique")
        return tiers

    @property
    def training(self) -> TrainingHyperparams:
        return TrainingHyperparams(self.hp.learning_rate, self.hp.momentum,
                                   self.hp.batch_size, self.local_epochs)

    @property
    def tag(self) -> str:
        parts = [self.method.replace("_", "-")]
        if self.method != "moss":
            return parts[0]
        a = self.ablation
        if a.no_prom:
            parts.append("no-prom")
        if a.loss_variant != "full":
            parts.append(a.loss_variant.replace("_", "-"))
        if a.no_file:
            parts.append("no-file")
        if a.reinit_meta:
            parts.append("reinit-meta")
        return "-".join(parts)

    def with_ablation(self, name: str) -> "ExperimentConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"ablation: unknown name {name!r}; choose from {sorted(ABLATIONS)}")
        return self.model_copy(update={"ablation": self.ablation.model_copy(update=ABLATIONS[name])})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


def _describe(err: ValidationError) -> str:
    first = err.errors()[0]
    loc = ".".join(str(p) for p in first["loc"]) or "<root>"
    return f"{loc}: {first['msg']}"


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(doc)


class PartitionConfig(_Strict):
    """Settings for ``mossfl partition``."""

    format: Literal[1] = 1
    n_devices: int = Field(ge=1)
    alpha: float = Field(0.1, gt=0)
    samples_per_device: int = Field(ge=1)
    public_size: int = Field(0, ge=0)
    seed: int = 0


def load_partition_config(path: str | Path) -> PartitionConfig:
    try:
        doc = json.loads(Path(path).read_text())
        return PartitionConfig.model_validate(doc)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from None
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
