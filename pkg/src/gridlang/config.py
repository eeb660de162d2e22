"""Run configuration: one YAML file, strictly validated.

Unknown keys are hard errors (a silently ignored typo can corrupt an entire
ablation), and cross-field consistency is checked up front.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import ModelConfig
from .train import TrainParams


class ConfigError(ValueError):
    pass


@dataclass
class DataParams:
    count: int = 1000
    val_count: int = 200
    min_shapes: int = 1
    max_shapes: int = 6
    min_scale: float = 7.0
    max_scale: float = 14.0
    max_rotation: float = 6.283185307179586  # radians; 2*pi = unrestricted


@dataclass
class DecodeParams:
    beam: int = 1
    grid_k: int = 4
    grid_budget: int = 0        # 0 = all grid points
    length_normalize: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainParams = field(default_factory=TrainParams)
    data: DataParams = field(default_factory=DataParams)
    decode: DecodeParams = field(default_factory=DecodeParams)
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        if self.decode.beam < 1:
            raise ConfigError("decode.beam must be >= 1")
        if self.decode.grid_k < 1:
            raise ConfigError("decode.grid_k must be >= 1")
        m = self.decode.grid_k ** 2
        if not 0 <= self.decode.grid_budget <= m:
            raise ConfigError("decode.grid_budget outside [0, K^2]")
        if self.train.grid_budget > self.train.grid_k ** 2:
            raise ConfigError("train.grid_budget exceeds K^2")
        for t in self.train.tasks:
            if t not in ("detect", "instseg", "semseg", "refer",
                         "depth", "normals"):
                raise ConfigError(f"unknown training task {t!r}")


def _fill(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if key == "image_size" and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainParams,
    "data": DataParams,
    "decode": DecodeParams,
}


def parse_config(doc: dict) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _fill(_SECTIONS[key], value or {}, key)
        elif key == "seed":
            if not isinstance(value, int):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(doc)


def dump_config(cfg: RunConfig, path) -> None:
    doc = {
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "data": dataclasses.asdict(cfg.data),
        "decode": dataclasses.asdict(cfg.decode),
        "seed": cfg.seed,
    }
    doc["model"]["image_size"] = list(cfg.model.image_size)
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True),
                          encoding="utf-8")
