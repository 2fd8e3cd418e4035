"""White-box l-infinity attacks: FGSM, PGD, C&W (projected margin form) and MIM.

Every attack starts from the clean input, never mutates the model, and records
the per-sample cross-entropy at each iterate so loss curves can be compared
across methods.  Iterative attacks record iterations 0..steps (iterate 0 is
the clean input); FGSM records only the loss at the clean input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tape, Tensor, backward
from .train import cross_entropy

METHODS = ("fgsm", "pgd", "cw", "mim")
ITERATIVE = ("pgd", "cw", "mim")


@dataclass(frozen=True)
class AttackConfig:
    method: str
    epsilon: float = 32 / 255
    steps: int = 30
    alpha: float = 0.01
    c: float = 10.0
    mu: float = 1.0
    kappa: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack {self.method!r}; expected one of {METHODS}")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.method in ITERATIVE and self.steps < 1:
            raise ConfigError("iterative attacks need steps >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), "epsilon": float(epsilon)})

    def to_dict(self) -> dict:
        return asdict(self)


def default_attack(method: str) -> AttackConfig:
    return AttackConfig(method)


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    success: np.ndarray  # prediction != label after the attack
    losses: np.ndarray  # (iterations, batch) cross-entropy per iterate
    final_loss: np.ndarray
    signs: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def mean_loss(self) -> np.ndarray:
        return self.losses.mean(axis=1)

    @property
    def std_loss(self) -> np.ndarray:
        return self.losses.std(axis=1)


def _param_leaves(model) -> dict[str, Tensor] | None:
    return model.leaves() if hasattr(model, "leaves") else None


def _forward(model, x: Tensor, params) -> Tensor:
    return model.forward(x, params) if params is not None else model.forward(x)


def input_gradient(model, x: np.ndarray, y: np.ndarray, objective: str = "ce", kappa: float = 0.0,
                   params=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of the summed per-sample objective w.r.t. the input.

    Returns ``(grad, per-sample cross-entropy, logits)``.  Summing keeps each
    sample's gradient exactly its own, independent of the batch size.
    """
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        logits = _forward(model, xt, params)
        ce = cross_entropy(logits, y, reduction="none")
        if objective == "ce":
            total = T.sum(ce)
        elif objective == "cw":
            total = T.sum(margin_loss(logits, y, kappa))
        else:
            raise ValueError(f"unknown objective {objective!r}")
    grad = backward(tape, total, wrt=[xt])[xt]
    return grad, ce.data.astype(np.float64), logits.data


def margin_loss(logits: Tensor, y: np.ndarray, kappa: float = 0.0) -> Tensor:
    """max(Z_y - max_{i != y} Z_i, -kappa) per sample."""
    z = logits.data
    rows = np.arange(z.shape[0])
    mask = np.zeros(z.shape, dtype=z.dtype)
    mask[rows, y] = np.finfo(z.dtype).min / 2
    other = T.max(logits + Tensor(mask), axis=1)
    margin = T.pick(logits, y) - other
    k = np.float32(kappa)
    return T.relu(margin + k) - k


def _predict_loss(model, x, y, params):
    logits = _forward(model, Tensor(x), params)
    ce = cross_entropy(logits, y, reduction="none").data.astype(np.float64)
    return np.argmax(logits.data, axis=1), ce


def _project(x_new, x0, eps):
    x_new = np.clip(x_new, 0.0, 1.0)
    return np.clip(x_new, x0 - eps, x0 + eps)


def fgsm(model, x, y, cfg: AttackConfig) -> AttackOutcome:
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    params = _param_leaves(model)
    eps = np.float32(cfg.epsilon)
    grad, ce0, _ = input_gradient(model, x0, y, params=params)
    s = np.sign(grad).astype(np.float32)
    x_adv = np.clip(x0 + eps * s, 0.0, 1.0)
    pred, ce = _predict_loss(model, x_adv, y, params)
    return AttackOutcome(x_adv, pred != y, ce0[None, :], ce, [s])


def _iterate(model, x, y, cfg: AttackConfig, objective: str, momentum: float | None,
             keep_signs: bool) -> AttackOutcome:
    x0 = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    params = _param_leaves(model)
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.alpha)
    lo, hi = x0 - eps, x0 + eps
    x_adv = x0.copy()
    buf = np.zeros(x0.shape, dtype=np.float64) if momentum is not None else None
    losses, signs = [], []
    for _ in range(cfg.steps):
        grad, ce, _ = input_gradient(model, x_adv, y, objective, cfg.kappa, params)
        losses.append(ce)
        if objective == "cw":
            # descend on c * f; c > 0 leaves the sign unchanged
            direction = -np.float32(cfg.c) * grad
        else:
            direction = grad
        if buf is not None:
            g64 = direction.astype(np.float64)
            l1 = np.sum(np.abs(g64), axis=1, keepdims=True)
            nz = l1[:, 0] > 0
            buf[~nz] *= momentum
            buf[nz] = momentum * buf[nz] + g64[nz] / l1[nz]
            direction = buf
        s = np.sign(direction).astype(np.float32)
        if keep_signs:
            signs.append(s)
        x_adv = np.clip(np.clip(x_adv + alpha * s, 0.0, 1.0), lo, hi)
    pred, ce = _predict_loss(model, x_adv, y, params)
    losses.append(ce)
    return AttackOutcome(x_adv, pred != y, np.stack(losses), ce, signs)


def pgd(model, x, y, cfg: AttackConfig, keep_signs: bool = False) -> AttackOutcome:
    return _iterate(model, x, y, cfg, "ce", None, keep_signs)


def cw_linf(model, x, y, cfg: AttackConfig, keep_signs: bool = False) -> AttackOutcome:
    return _iterate(model, x, y, cfg, "cw", None, keep_signs)


def mim(model, x, y, cfg: AttackConfig, keep_signs: bool = False) -> AttackOutcome:
    return _iterate(model, x, y, cfg, "ce", float(cfg.mu), keep_signs)


_DISPATCH = {"fgsm": fgsm, "pgd": pgd, "cw": cw_linf, "mim": mim}


def run_attack(model, x, y, cfg: AttackConfig) -> AttackOutcome:
    return _DISPATCH[cfg.method](model, x, y, cfg)


def attack_batches(model, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
                   batch_size: int = 256) -> list[AttackOutcome]:
    """Attack ``images`` in fixed consecutive batches; order of outcomes follows the input order."""
    return [run_attack(model, images[i:i + batch_size], labels[i:i + batch_size], cfg)
            for i in range(0, len(images), batch_size)]


def merge(outcomes: list[AttackOutcome]) -> AttackOutcome:
    return AttackOutcome(
        np.concatenate([o.x_adv for o in outcomes]),
        np.concatenate([o.success for o in outcomes]),
        np.concatenate([o.losses for o in outcomes], axis=1),
        np.concatenate([o.final_loss for o in outcomes]),
    )


def loss_trace(outcomes: list[AttackOutcome]) -> tuple[np.ndarray, np.ndarray]:
    """Per-iteration mean and standard deviation of the batch-mean losses across batches."""
    if not outcomes:
        raise ValueError("loss_trace needs at least one outcome")
    lengths = {o.losses.shape[0] for o in outcomes}
    if len(lengths) != 1:
        raise ValueError(f"outcomes disagree on iteration count: {sorted(lengths)}")
    per_batch = np.stack([o.mean_loss for o in outcomes])  # (batches, iterations)
    return per_batch.mean(axis=0), per_batch.std(axis=0)


def linf_violations(x: np.ndarray, x_adv: np.ndarray, epsilon: float, tol: float = 1e-6) -> dict:
    """Count samples breaking the epsilon-ball or the [0, 1] box."""
    dist = np.max(np.abs(x_adv.astype(np.float64) - x.astype(np.float64)), axis=1)
    out_of_box = np.any((x_adv < 0) | (x_adv > 1), axis=1)
    return {
        "n": int(len(x)),
        "max_linf": float(dist.max()) if len(dist) else 0.0,
        "ball_violations": int(np.sum(dist > epsilon + tol)),
        "box_violations": int(np.sum(out_of_box)),
    }
