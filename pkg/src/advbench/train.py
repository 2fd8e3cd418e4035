"""Softmax cross-entropy training with decoupled-weight-decay Adam."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numba
import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Dataset, batches
from .errors import ConfigError, DivergenceError
from .models import Model
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy via max-shifted log-sum-exp.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (per-sample vector).
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    shift = Tensor(np.broadcast_to(-np.max(z, axis=1, keepdims=True), z.shape).astype(z.dtype))
    shifted = logits + shift
    lse = T.log(T.sum(T.exp(shifted), axis=1))
    per_sample = lse - T.pick(shifted, labels)
    if reduction == "none":
        return per_sample
    if reduction == "sum":
        return T.sum(per_sample)
    if reduction == "mean":
        return T.mean(per_sample)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive, weight_decay non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def default_decay(name: str) -> bool:
    """Decay weights and spline coefficients; skip MLP biases."""
    return not name.startswith("b") or name.startswith("base")


@numba.njit(cache=True)
def _adamw_kernel(theta, g, m, v, b1, b2, c1, c2, lr, eps, decay):
    out = np.empty_like(theta)
    th, gf, mf, vf, of = theta.ravel(), g.ravel(), m.ravel(), v.ravel(), out.ravel()
    for i in range(th.size):
        mi = b1 * mf[i] + (1 - b1) * gf[i]
        vi = b2 * vf[i] + (1 - b2) * gf[i] * gf[i]
        mf[i] = mi
        vf[i] = vi
        of[i] = th[i] - lr * ((mi / c1) / (np.sqrt(vi / c2) + eps)) - lr * decay * th[i]
    return out


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               config: TrainConfig, decays: Callable[[str], bool] = default_decay) -> dict[str, np.ndarray]:
    """One AdamW update.  Returns new parameter arrays; moment buffers in ``state`` update in place."""
    state.step += 1
    t = state.step
    f32 = np.float32
    b1, b2 = f32(config.beta1), f32(config.beta2)
    c1, c2 = f32(1.0 - config.beta1 ** t), f32(1.0 - config.beta2 ** t)
    lr, eps = f32(config.learning_rate), f32(config.adam_eps)
    out = {}
    for name, theta in params.items():
        if name not in state.m:
            state.m[name] = np.zeros(theta.shape, dtype=np.float32)
            state.v[name] = np.zeros(theta.shape, dtype=np.float32)
        wd = f32(config.weight_decay) if decays(name) else f32(0.0)
        g = np.ascontiguousarray(grads[name], dtype=np.float32)
        out[name] = _adamw_kernel(np.ascontiguousarray(theta, dtype=np.float32), g, state.m[name], state.v[name],
                                  b1, b2, c1, c2, lr, eps, wd)
    return out


@dataclass
class TrainReport:
    model_id: str
    dataset: str
    config: TrainConfig
    initial_loss: float
    train_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    @property
    def final_test_acc(self) -> float | None:
        return self.test_acc[-1] if self.test_acc else None

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "test_acc"])
            for i, (loss, acc) in enumerate(zip(self.train_loss, self.test_acc), start=1):
                w.writerow([i, f"{loss:.6f}", f"{acc:.2f}"])
        return path

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = asdict(self.config)
        return d


def accuracy(model: Model, ds: Dataset) -> float:
    return 100.0 * float(np.mean(model.predict(ds.images) == ds.labels))


def mean_loss(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 1000) -> float:
    total = 0.0
    for i in range(0, len(images), batch_size):
        logits = Tensor(model.logits(images[i:i + batch_size], batch_size))
        total += float(cross_entropy(logits, labels[i:i + batch_size], reduction="sum").item())
    return total / len(images)


def train(model: Model, train_ds: Dataset, test_ds: Dataset | None, config: TrainConfig,
          checkpoint_path=None, init_seed: int | None = None) -> TrainReport:
    """Train ``model`` in place.  Writes a checkpoint and ``<stem>_train.csv`` when a path is given."""
    if train_ds.split != "train":
        raise ConfigError(f"training requires the train split, got {train_ds.split!r}")
    start = time.perf_counter()
    probe = slice(0, min(5000, len(train_ds)))
    report = TrainReport(model.model_id, train_ds.name, config,
                         initial_loss=mean_loss(model, train_ds.images[probe], train_ds.labels[probe]))
    state = AdamWState()
    for epoch in range(config.epochs):
        total, seen = 0.0, 0
        for b, (xb, yb) in enumerate(batches(train_ds, config.batch_size, shuffle_seed=config.seed, epoch=epoch)):
            leaves = model.leaves(requires_grad=True)
            with Tape() as tape:
                loss = cross_entropy(model.forward(Tensor(xb), leaves), yb)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            grads = backward(tape, loss, wrt=leaves.values())
            model.params = adamw_step(model.params, {k: grads[t] for k, t in leaves.items()}, state, config)
            total += value * len(yb)
            seen += len(yb)
        report.train_loss.append(total / seen)
        acc = accuracy(model, test_ds) if test_ds is not None else float("nan")
        report.test_acc.append(acc)
        log.info("%s/%s epoch %d: loss %.4f, test acc %.2f", train_ds.name, model.model_id, epoch + 1,
                 report.train_loss[-1], acc)
    report.wall_time = time.perf_counter() - start
    if checkpoint_path is not None:
        path = save_checkpoint(model, checkpoint_path, seed=config.seed if init_seed is None else init_seed,
                               epochs_trained=config.epochs, clean_accuracy=report.final_test_acc,
                               extra={"train": asdict(config)})
        report.checkpoint = str(path)
        report.write_csv(path.with_name(path.stem + "_train.csv"))
    return report
