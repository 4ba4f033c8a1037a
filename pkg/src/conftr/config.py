"""Run configuration: JSON schema, named presets and construction of runtime objects."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import data, evaluation, models, training
from .conformal import PredictorKind
from .errors import ConfTrError, ContractError


class ConfigError(ConfTrError, ValueError):
    """Invalid configuration; reported before any compute starts."""


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticBlock(_Block):
    num_classes: int = Field(10, ge=2)
    dim: int = Field(20, ge=2)
    separation: float = Field(3.0, ge=0)
    seed: int = 0


class DatasetBlock(_Block):
    source: Literal["synthetic", "csv", "idx", "features"] = "synthetic"
    # csv/feature file, or a directory of MNIST-style IDX files
    path: str | None = None
    label_column: str = "label"
    num_classes: int | None = Field(None, ge=2)
    preprocessing: Literal["none", "per_feature_whiten", "pixel_scale_pm1"] = "none"
    n_train: int | None = Field(None, ge=1)
    n_cal: int | None = Field(None, ge=1)
    n_test: int | None = Field(None, ge=1)
    label_map: dict[int, int] | None = None
    synthetic: SyntheticBlock = Field(default_factory=SyntheticBlock)

    @model_validator(mode="after")
    def _check_source(self):
        if self.source != "synthetic" and self.path is None:
            raise ValueError(f"dataset source {self.source!r} needs a path")
        if self.source in ("synthetic", "csv", "features") and None in (self.n_train, self.n_cal, self.n_test):
            raise ValueError(f"dataset source {self.source!r} needs n_train, n_cal and n_test")
        if self.source == "idx" and (self.n_train is not None or self.n_test is not None):
            raise ValueError("idx splits are fixed by the files; only n_cal may be set")
        return self


class ModelBlock(_Block):
    kind: Literal["linear", "mlp"] = "linear"
    hidden_sizes: list[int] = []


class TrainBlock(_Block):
    method: Literal["baseline", "conftr", "conftr_class", "covertr"] = "baseline"
    predictor_kind: PredictorKind = PredictorKind.THR_logprob
    alpha: float = Field(0.01, gt=0, lt=1)
    batch_size: int = Field(100, ge=1)
    epochs: int = Field(10, ge=0)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.0005, ge=0)
    nesterov: bool = True
    size_weight: float = Field(0.01, ge=0)
    kappa: Literal[0, 1] = 1
    temperature: float = Field(0.5, gt=0)
    dispersion: float = Field(0.1, gt=0)
    rank_dispersion: float = Field(0.1, gt=0)
    fixed_tau: float | None = None
    covertr_variant: Literal["class", "bellotti"] = "class"
    loss_matrix: list[list[float]] | None = None
    size_weights: list[float] | None = None
    weight_decay: float = Field(0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_method(self):
        if self.method in ("conftr", "conftr_class") and self.batch_size < 2:
            raise ValueError("conformal training splits each batch in half and needs batch_size >= 2")
        if self.method == "covertr" and self.fixed_tau is None:
            raise ValueError("covertr needs fixed_tau")
        return self


class EvalBlock(_Block):
    alpha: float = Field(0.01, gt=0, lt=1)
    n_test_trials: int = Field(10, ge=1)
    n_train_trials: int = Field(10, ge=1)
    kinds: list[PredictorKind] = list(PredictorKind)
    seed: int = 0
    groups: tuple[list[int], list[int]] | None = None
    keep_original_split: bool = False

    @field_validator("groups")
    @classmethod
    def _disjoint(cls, groups):
        if groups is not None and (not groups[0] or not groups[1] or set(groups[0]) & set(groups[1])):
            raise ValueError("groups must be two non-empty disjoint class lists")
        return groups


class RunConfig(_Block):
    dataset: DatasetBlock
    model: ModelBlock = Field(default_factory=ModelBlock)
    train: TrainBlock = Field(default_factory=TrainBlock)
    eval: EvalBlock = Field(default_factory=EvalBlock)
    output_dir: str = "runs/default"

    def train_config(self, seed: int | None = None) -> training.TrainConfig:
        fields = self.train.model_dump()
        if seed is not None:
            fields["seed"] = seed
        return training.TrainConfig(**fields)

    def eval_protocol(self) -> evaluation.EvalProtocol:
        fields = self.eval.model_dump()
        fields["kinds"] = tuple(fields["kinds"])
        if fields["groups"] is not None:
            fields["groups"] = tuple(tuple(g) for g in fields["groups"])
        return evaluation.EvalProtocol(**fields)

    def model_spec(self, dataset: data.Dataset) -> models.ModelSpec:
        return models.ModelSpec(self.model.kind, dataset.dim, dataset.num_classes, tuple(self.model.hidden_sizes))


def load_presets() -> dict[str, dict]:
    return json.loads(resources.files("conftr").joinpath("presets.json").read_text())


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(doc: dict, key: str, value) -> dict:
    """Copy of ``doc`` with ``a.b.c`` set to ``value``; every level must be a known block."""
    out = copy.deepcopy(doc)
    parts = key.split(".")
    node = out
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {part!r} is not a config block")
    node[parts[-1]] = value
    return out


def build(doc: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(doc)
        # cross-check against the runtime invariants as well
        cfg.train_config()
        cfg.eval_protocol()
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Named preset as defaults, then the config file on top, then explicit overrides."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if preset is not None:
        presets = load_presets()
        if preset not in presets:
            raise ConfigError(f"unknown preset {preset!r}; known: {', '.join(sorted(presets))}")
        doc = deep_merge(presets[preset], doc)
    for key, value in (overrides or {}).items():
        doc = set_dotted(doc, key, value)
    return build(doc)


def load_dataset(block: DatasetBlock) -> data.Dataset:
    """Load, split and preprocess the configured dataset (statistics from the train split only)."""
    if block.source == "synthetic":
        s = block.synthetic
        ds = data.synthetic_gaussian_mixture(
            s.num_classes, s.dim, block.n_train, block.n_cal, block.n_test, s.separation, s.seed
        )
    elif block.source == "idx":
        ds = data.load_mnist(block.path, n_cal=block.n_cal or 5000)
    elif block.source == "csv":
        ds = data.load_csv(block.path, block.label_column, block.num_classes)
    else:
        ds = data.load_features(block.path, block.num_classes)
    if block.label_map is not None:
        ds = data.remap_labels(ds, block.label_map)
    if block.source in ("csv", "features"):
        ds = data.with_splits(ds, block.n_train, block.n_cal, block.n_test)
    ds, _ = data.fit_apply_preprocessing(ds, block.preprocessing)
    return ds
