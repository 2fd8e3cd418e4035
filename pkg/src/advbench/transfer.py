"""Cross-model transferability of adversarial examples.

For a (source, target) pair we take up to ``m`` test samples that both models
classify correctly, attack the source, and report the fraction of the
resulting adversarial examples that the target misclassifies.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attacks import METHODS, AttackConfig, attack_batches, linf_violations, merge
from .config import derive_seed
from .data import Dataset, SampleIndexSet, correct_mask, select_from_masks
from .errors import AdvbenchError, EmptySelectionError


@dataclass
class TransferRecord:
    dataset: str
    source: str
    target: str
    attack: str
    t: float
    m: int
    seed: int
    subset_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0 or self.m <= 0:
            raise ValueError(f"invalid transfer record t={self.t}, m={self.m}")


def pair_seed(seed: int, dataset: str, source: str, target: str) -> int:
    return derive_seed(seed, "transfer-subset", dataset, source, target)


def pair_subset(source_mask: np.ndarray, target_mask: np.ndarray, ds: Dataset, source_id: str, target_id: str,
                m: int, seed: int) -> SampleIndexSet:
    provenance = f"correct under {source_id}+{target_id} on {ds.name}/{ds.split}; cap={m}; seed={seed}"
    try:
        return select_from_masks([source_mask, target_mask], m, pair_seed(seed, ds.name, source_id, target_id),
                                 provenance)
    except EmptySelectionError:
        raise EmptySelectionError(f"no {ds.name} sample is classified correctly by both {source_id} and "
                                  f"{target_id}") from None


def transfer_rate(target, x_adv: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(target.predict(x_adv) != y))


def transfer_pair(source, target, ds: Dataset, cfg: AttackConfig, m: int = 5000, seed: int = 0,
                  batch_size: int = 256) -> TransferRecord:
    subset = pair_subset(correct_mask(source, ds), correct_mask(target, ds), ds, source.model_id, target.model_id,
                         m, seed)
    x, y = ds.images[subset.indices], ds.labels[subset.indices]
    adv = merge(attack_batches(source, x, y, cfg, batch_size)).x_adv
    return TransferRecord(ds.name, source.model_id, target.model_id, cfg.method, transfer_rate(target, adv, y),
                          len(subset), seed, subset.content_hash())


def t_total(records: Iterable[TransferRecord], attacks: Sequence[str] = METHODS) -> float:
    by_attack = {r.attack: r.t for r in records}
    missing = [a for a in attacks if a not in by_attack]
    if missing:
        raise AdvbenchError(f"t_total needs every attack; missing: {', '.join(missing)}")
    return max(by_attack[a] for a in attacks)


@dataclass
class TransferMatrix:
    dataset: str
    model_ids: list[str]
    per_attack: dict[str, np.ndarray]
    t_total: np.ndarray
    subset_hashes: dict[tuple[str, str], str] = field(default_factory=dict)
    constraints: list[dict] = field(default_factory=list)

    @property
    def average_all(self) -> np.ndarray:
        """Column means over every evaluated source row, diagonal included."""
        return _column_mean(self.t_total)

    @property
    def average_off_diagonal(self) -> np.ndarray:
        grid = self.t_total.copy()
        np.fill_diagonal(grid, np.nan)
        return _column_mean(grid)


def _column_mean(grid: np.ndarray) -> np.ndarray:
    """nan-aware column mean; all-nan columns (pairs mode) stay nan."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(grid, axis=0)


def build_matrix(ds: Dataset, models: Sequence, attacks: Sequence[AttackConfig], m: int = 5000, seed: int = 0,
                 batch_size: int = 256, pairs: Sequence[tuple[str, str]] | None = None
                 ) -> tuple[TransferMatrix, list[TransferRecord]]:
    """Rows are sources, columns are targets.

    Each source is attacked once per method on the union of its pair subsets;
    adversarial rows are then looked up per target, so all four attacks see
    the same subset for a given pair.
    """
    ids = [mdl.model_id for mdl in models]
    by_id = dict(zip(ids, models))
    if pairs is None:
        pairs = [(s, t) for s in ids for t in ids]
    for s, t in pairs:
        if s not in by_id or t not in by_id:
            raise AdvbenchError(f"pair {s}:{t} references a model that was not loaded")
    methods = [a.method for a in attacks]
    masks = {i: correct_mask(by_id[i], ds) for i in ids}
    n = len(ids)
    per_attack = {a: np.full((n, n), np.nan) for a in methods}
    hashes: dict[tuple[str, str], str] = {}
    records: list[TransferRecord] = []
    constraints: list[dict] = []

    for src in ids:
        targets = [t for s, t in pairs if s == src]
        if not targets:
            continue
        subsets = {}
        for tgt in targets:
            try:
                subsets[tgt] = pair_subset(masks[src], masks[tgt], ds, src, tgt, m, seed)
            except EmptySelectionError as exc:
                raise AdvbenchError(f"cell ({src}, {tgt}): {exc}") from None
            hashes[(src, tgt)] = subsets[tgt].content_hash()
        union = np.unique(np.concatenate([s.indices for s in subsets.values()]))
        position = {int(k): i for i, k in enumerate(union)}
        x, y = ds.images[union], ds.labels[union]
        for cfg in attacks:
            adv = merge(attack_batches(by_id[src], x, y, cfg, batch_size)).x_adv
            constraints.append({"dataset": ds.name, "model": src, "attack": cfg.method, "epsilon": cfg.epsilon,
                                **linf_violations(x, adv, cfg.epsilon)})
            for tgt in targets:
                sub = subsets[tgt]
                rows = np.array([position[int(k)] for k in sub.indices])
                t = transfer_rate(by_id[tgt], adv[rows], ds.labels[sub.indices])
                per_attack[cfg.method][ids.index(src), ids.index(tgt)] = t
                records.append(TransferRecord(ds.name, src, tgt, cfg.method, t, len(sub), seed, hashes[(src, tgt)]))

    stacked = np.stack([per_attack[a] for a in methods])
    total = np.full((n, n), np.nan)
    have = ~np.isnan(stacked).any(axis=0)
    total[have] = stacked[:, have].max(axis=0)
    return TransferMatrix(ds.name, ids, per_attack, total, hashes, constraints), records
