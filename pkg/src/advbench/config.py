"""Experiment configuration, JSON loading and seed derivation."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .attacks import METHODS, AttackConfig
from .data import DATASETS
from .errors import ConfigError
from .models import MODEL_IDS, ModelConfig
from .train import TrainConfig

DEFAULT_SWEEP = (8, 16, 32, 48, 64, 80, 96, 128)
SWEEP_MODELS = ("MLP_medium", "MLP_large", "KAN_medium", "KAN_large")


def parse_epsilon(value) -> float:
    """Accept 0.125, "0.125" or "32/255"."""
    try:
        eps = float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"cannot parse epsilon {value!r}") from None
    if not 0 <= eps <= 1:
        raise ConfigError(f"epsilon must lie in [0, 1], got {value!r}")
    return eps


def derive_seed(global_seed: int, *keys) -> int:
    """Counter-style child seed: a SeedSequence keyed by crc32 of each key."""
    spawn_key = tuple(zlib.crc32(str(k).encode()) for k in keys)
    return int(np.random.SeedSequence(global_seed, spawn_key=spawn_key).generate_state(1)[0])


@dataclass
class Paths:
    data_dir: str | None = None
    checkpoint_dir: str = "runs/checkpoints"
    out_dir: str = "runs/out"


@dataclass
class ExperimentConfig:
    datasets: list[str] = field(default_factory=lambda: list(DATASETS))
    models: list[str] = field(default_factory=lambda: list(MODEL_IDS))
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: dict[str, AttackConfig] = field(default_factory=lambda: {m: AttackConfig(m) for m in METHODS})
    sweep_epsilons: list[int] = field(default_factory=lambda: list(DEFAULT_SWEEP))
    sweep_models: list[str] = field(default_factory=lambda: list(SWEEP_MODELS))
    transfer_m: int = 5000
    transfer_models: list[str] | None = None
    transfer_pairs: list[str] | None = None
    attack_batch_size: int = 256
    max_samples: int | None = None
    seed: int = 0
    images_per_cell: int = 1
    paths: Paths = field(default_factory=Paths)

    def validate(self) -> "ExperimentConfig":
        for d in self.datasets:
            if d not in DATASETS:
                raise ConfigError(f"unknown dataset {d!r}; expected one of {DATASETS}")
        for m in [*self.models, *self.sweep_models, *(self.transfer_models or [])]:
            ModelConfig.from_id(m)
        for m in self.attacks:
            if m not in METHODS:
                raise ConfigError(f"unknown attack {m!r}; expected one of {METHODS}")
        if self.transfer_m < 1 or self.attack_batch_size < 1:
            raise ConfigError("transfer_m and attack_batch_size must be >= 1")
        if self.max_samples is not None and self.max_samples < 1:
            raise ConfigError("max_samples must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = {k: v.to_dict() for k, v in self.attacks.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        if "paths" in d:
            d["paths"] = Paths(**d["paths"])
        if "attacks" in d:
            attacks = {}
            for method, params in d["attacks"].items():
                params = dict(params or {})
                if "epsilon" in params:
                    params["epsilon"] = parse_epsilon(params["epsilon"])
                params["method"] = method
                attacks[method] = AttackConfig(**params)
            d["attacks"] = attacks
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def stage_seeds(self) -> dict[str, int]:
        return {stage: derive_seed(self.seed, stage) for stage in ("train", "attack", "sweep", "transfer")}
