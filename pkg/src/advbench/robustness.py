"""Robust accuracy over the correctly classified test subset, and FGSM epsilon sweeps."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attacks import ITERATIVE, AttackConfig, attack_batches, linf_violations, loss_trace, merge
from .data import Dataset, SampleIndexSet, correct_mask, select_from_masks
from .errors import EmptySelectionError


@dataclass(frozen=True)
class ThreatModelSpec:
    epsilon: float
    norm: str = "linf"
    mode: str = "untargeted"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


@dataclass
class RobustnessRecord:
    dataset: str
    model: str
    attack: str
    epsilon: float
    clean_acc: float
    robust_acc: float
    n_evaluated: int
    batch_size: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CellResult:
    record: RobustnessRecord
    subset: SampleIndexSet
    trace: tuple[np.ndarray, np.ndarray] | None
    constraints: dict
    x_adv: np.ndarray
    success: np.ndarray


def clean_subset(model, ds: Dataset, max_samples: int | None = None,
                 seed: int = 0) -> tuple[float, SampleIndexSet]:
    """Clean accuracy on the whole split, plus the (optionally capped) correctly classified indices."""
    mask = correct_mask(model, ds)
    clean = 100.0 * float(mask.mean())
    provenance = f"correct under {model.model_id} on {ds.name}/{ds.split}; cap={max_samples}; seed={seed}"
    try:
        subset = select_from_masks([mask], max_samples, seed, provenance)
    except EmptySelectionError:
        raise EmptySelectionError(f"{model.model_id} classifies no {ds.name} test sample correctly") from None
    return clean, subset


def evaluate_attack(model, ds: Dataset, cfg: AttackConfig, seed: int = 0, max_samples: int | None = None,
                    batch_size: int = 256, base: tuple[float, SampleIndexSet] | None = None) -> CellResult:
    clean, subset = base if base is not None else clean_subset(model, ds, max_samples, seed)
    x = ds.images[subset.indices]
    y = ds.labels[subset.indices]
    outcomes = attack_batches(model, x, y, cfg, batch_size)
    merged = merge(outcomes)
    robust = 100.0 * float(np.mean(~merged.success))
    record = RobustnessRecord(ds.name, model.model_id, cfg.method, cfg.epsilon, clean, robust, len(subset),
                              batch_size, seed)
    trace = loss_trace(outcomes) if cfg.method in ITERATIVE else None
    return CellResult(record, subset, trace, linf_violations(x, merged.x_adv, cfg.epsilon), merged.x_adv,
                      merged.success)


def robust_accuracy(model, ds: Dataset, cfg: AttackConfig, seed: int = 0, max_samples: int | None = None,
                    batch_size: int = 256) -> RobustnessRecord:
    return evaluate_attack(model, ds, cfg, seed, max_samples, batch_size).record


def epsilon_sweep(models, ds: Dataset, epsilons, seed: int = 0, attack: AttackConfig | None = None,
                  max_samples: int | None = None, batch_size: int = 256) -> list[CellResult]:
    """One cell per (model, epsilon); each model's clean subset is fixed across the grid."""
    epsilons = list(epsilons)
    if not epsilons:
        raise ValueError("epsilon grid is empty")
    attack = attack or AttackConfig("fgsm")
    cells = []
    for model in models:
        base = clean_subset(model, ds, max_samples, seed)
        for eps in epsilons:
            cells.append(evaluate_attack(model, ds, attack.with_epsilon(eps), seed, max_samples, batch_size, base))
    return cells
