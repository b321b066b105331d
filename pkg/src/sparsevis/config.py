"""Sweep configuration: nested dataclasses loaded from YAML or JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .attribution import AttributionConfig
from .dataset import SHAPE_CLASSES, DatasetSpec, DistortionGrid
from .discovery import ODConfig
from .io import canonical_json, config_hash
from .models import ModelSpec
from .training import Schedule

TASKS = ("accuracy", "interp", "od", "ha")
# selection, location and presentation settings; they never change a value
UNHASHED = ("output_dir", "tasks", "verify_fraction", "sweet_spot_mode", "sweet_spot_strict")


@dataclass
class DataConfig:
    n_train: int = 2000
    n_test: int = 500
    image_size: int = 32
    shape_classes: tuple[str, ...] = SHAPE_CLASSES
    texture_background: bool = True
    seed: int = 0

    def __post_init__(self):
        self.shape_classes = tuple(self.shape_classes)

    def split(self, name: str) -> DatasetSpec:
        n, offset = (self.n_train, 0) if name == "train" else (self.n_test, 1)
        return DatasetSpec(n, self.image_size, self.shape_classes, self.texture_background, self.seed * 2 + offset)


@dataclass
class PruningConfig:
    k: float = 0.2
    T: float = 0.95


@dataclass
class SweepConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: Schedule = field(default_factory=Schedule)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    od: ODConfig = field(default_factory=ODConfig)
    distortions: dict[str, list[float]] = field(default_factory=dict)
    tasks: tuple[str, ...] = TASKS
    output_dir: str = "runs/sweep"
    seed: int = 0
    deterministic: bool = True
    sweet_spot_mode: str = "previous"  # or "dense"
    sweet_spot_strict: bool = True
    verify_fraction: float = 0.0  # share of cached cells recomputed as a spot check

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        for t in self.tasks:
            if t not in TASKS:
                raise ValueError(f"unknown task {t!r}")
        if self.model.n_classes != len(self.data.shape_classes):
            raise ValueError("model.n_classes must equal the number of shape classes")
        if self.model.image_size != self.data.image_size:
            raise ValueError("model.image_size must equal data.image_size")
        if self.sweet_spot_mode not in ("previous", "dense"):
            raise ValueError(f"unknown sweet_spot_mode {self.sweet_spot_mode!r}")
        DistortionGrid(self.distortions).normalized()

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Hash of every setting that can change a number in the report."""
        d = self.to_dict()
        for key in UNHASHED:
            d.pop(key)
        return config_hash(d)

    @property
    def grid(self) -> DistortionGrid:
        return DistortionGrid(self.distortions)


_NESTED = {
    "data": DataConfig,
    "model": ModelSpec,
    "schedule": Schedule,
    "pruning": PruningConfig,
    "attribution": AttributionConfig,
    "od": ODConfig,
}


def from_dict(d: dict) -> SweepConfig:
    known = {f.name for f in fields(SweepConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        if key in _NESTED:
            cls = _NESTED[key]
            allowed = {f.name for f in fields(cls)}
            bad = set(value or {}) - allowed
            if bad:
                raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
            kwargs[key] = cls(**(value or {}))
        else:
            kwargs[key] = value
    return SweepConfig(**kwargs)


def load_config(path: str | Path, **overrides) -> SweepConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(data)


def dump_config(cfg: SweepConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(json.loads(canonical_json(cfg.to_dict())), sort_keys=True))
