"""MLP and KAN classifiers with the six named size configurations."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .splines import bspline_basis, uniform_knots
from .tensor import Tensor

SIZE_TAGS = ("small", "medium", "large")
KINDS = ("mlp", "kan")

HIDDEN_LAYERS = {
    ("kan", "small"): (64,),
    ("mlp", "small"): (640,),
    ("kan", "medium"): (256, 1024),
    ("mlp", "medium"): (1024, 4096),
    ("kan", "large"): (128, 128, 256, 256, 256, 512, 512, 512, 1024, 1024, 1024),
    ("mlp", "large"): (128, 256, 256, 512, 512, 1024, 1024, 2048, 2048, 4096, 4096),
}

MODEL_IDS = tuple(f"{k.upper()}_{s}" for s in SIZE_TAGS for k in KINDS)


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    size_tag: str
    hidden_layers: tuple[int, ...]
    input_dim: int = 784
    output_dim: int = 10
    num_knots: int = 5
    spline_order: int = 3
    grid_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if any(w <= 0 for w in self.hidden_layers) or self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigError("layer widths must be positive")
        if self.kind == "kan":
            lo, hi = self.grid_range
            if self.num_knots < 1 or self.spline_order < 1 or not lo < hi:
                raise ConfigError("kan needs num_knots >= 1, spline_order >= 1 and lo < hi")
        named = HIDDEN_LAYERS.get((self.kind, self.size_tag))
        if named is not None and tuple(self.hidden_layers) != named:
            raise ConfigError(f"{self.model_id} must have hidden layers {list(named)}")

    @classmethod
    def named(cls, kind: str, size_tag: str, **overrides) -> "ModelConfig":
        kind = kind.lower()
        if size_tag not in SIZE_TAGS:
            raise ConfigError(f"invalid size tag {size_tag!r}; expected one of {{{', '.join(SIZE_TAGS)}}}")
        if kind not in KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        return cls(kind, size_tag, HIDDEN_LAYERS[(kind, size_tag)], **overrides)

    @classmethod
    def from_id(cls, model_id: str) -> "ModelConfig":
        kind, sep, size = model_id.partition("_")
        if not sep:
            raise ConfigError(f"model id {model_id!r} should look like KAN_small or MLP_large")
        return cls.named(kind, size)

    @property
    def model_id(self) -> str:
        return f"{self.kind.upper()}_{self.size_tag}"

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, self.output_dim]

    @property
    def n_basis(self) -> int:
        return self.num_knots + self.spline_order

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        d["grid_range"] = list(self.grid_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden_layers"] = tuple(d["hidden_layers"])
        d["grid_range"] = tuple(d["grid_range"])
        return cls(**d)


def param_count(config: ModelConfig) -> int:
    w = config.widths
    if config.kind == "mlp":
        return sum(n * m + n for m, n in zip(w[:-1], w[1:]))
    per_edge = config.num_knots + config.spline_order + 2
    return sum(n * m * per_edge for m, n in zip(w[:-1], w[1:]))


INIT_SCHEME = {
    "mlp": "weight ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)); bias = 0",
    "kan": ("base_weight ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); spline_scaler = 1; "
            "spline_coeffs ~ U(-0.1/num_knots, 0.1/num_knots)"),
}


@dataclass
class Model:
    """Parameters live in ``params`` (name -> float32 array) in a fixed declared order."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    knots: np.ndarray | None = field(default=None, repr=False)

    @property
    def model_id(self) -> str:
        return self.config.model_id

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(f"{self.model_id} expects inputs of shape (b, {self.config.input_dim}), got {x.shape}")
        p = params if params is not None else self.leaves()
        if self.config.kind == "mlp":
            return _mlp_forward(x, p, len(self.config.widths) - 1)
        return _kan_forward(x, p, len(self.config.widths) - 1, self.knots, self.config.spline_order)

    def logits(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        p = self.leaves()
        out = [self.forward(Tensor(images[i:i + batch_size]), p).data for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)

    def predict(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        return np.argmax(self.logits(images, batch_size), axis=1)


def _dense(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = T.matmul_nt(x, w)
    if b is not None:
        y = y + T.broadcast_to(T.reshape(b, (1, b.shape[0])), y.shape)
    return y


def _mlp_forward(x: Tensor, p: dict[str, Tensor], n_layers: int) -> Tensor:
    h = x
    for i in range(n_layers):
        h = _dense(h, p[f"w{i}"], p[f"b{i}"])
        if i < n_layers - 1:
            h = T.relu(h)
    return h


@numba.njit(cache=True)
def _scaler_grad(g, coeffs):
    out_dim, in_dim, nb = g.shape
    out = np.empty((out_dim, in_dim), dtype=g.dtype)
    for o in range(out_dim):
        for i in range(in_dim):
            acc = 0.0
            for k in range(nb):
                acc += np.float64(g[o, i, k]) * np.float64(coeffs[o, i, k])
            out[o, i] = acc
    return out


def scale_coefficients(scaler: Tensor, coeffs: Tensor) -> Tensor:
    """Per-edge ``scaler[o, i] * coeffs[o, i, :]`` as one fused op."""
    s3 = scaler.data[:, :, None]
    cd = coeffs.data

    def bw(g):
        gs = _scaler_grad(np.ascontiguousarray(g), np.ascontiguousarray(cd)) if scaler.requires_grad else None
        return (gs, g * s3 if coeffs.requires_grad else None)

    return T.apply_op(cd * s3, (scaler, coeffs), bw)


def kan_layer_forward(x: Tensor, base_weight: Tensor, spline_scaler: Tensor, spline_coeffs: Tensor,
                      knots: np.ndarray, order: int) -> Tensor:
    """Sum over inputs of base_weight * silu(x) + spline_scaler * sum_k coeff_k * B_k(x)."""
    out_dim, in_dim, n_basis = spline_coeffs.shape
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"kan layer expects (b, {in_dim}) inputs, got {x.shape}")
    if base_weight.shape != (out_dim, in_dim) or spline_scaler.shape != (out_dim, in_dim):
        raise ShapeError("kan layer parameter shapes disagree")
    basis = bspline_basis(x, knots, order)
    flat_basis = T.reshape(basis, (x.shape[0], in_dim * n_basis))
    weights = T.reshape(scale_coefficients(spline_scaler, spline_coeffs), (out_dim, in_dim * n_basis))
    base = T.matmul_nt(T.silu(x), base_weight)
    return base + T.matmul_nt(flat_basis, weights)


def _kan_forward(x: Tensor, p: dict[str, Tensor], n_layers: int, knots, order: int) -> Tensor:
    h = x
    for i in range(n_layers):
        h = kan_layer_forward(h, p[f"base{i}"], p[f"scaler{i}"], p[f"coeff{i}"], knots, order)
    return h


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    w = config.widths
    params: dict[str, np.ndarray] = {}
    if config.kind == "mlp":
        for i, (fan_in, fan_out) in enumerate(zip(w[:-1], w[1:])):
            bound = math.sqrt(6.0 / fan_in)
            params[f"w{i}"] = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32)
            params[f"b{i}"] = np.zeros(fan_out, dtype=np.float32)
        return Model(config, params)

    c = 0.1 / config.num_knots
    for i, (fan_in, fan_out) in enumerate(zip(w[:-1], w[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        params[f"base{i}"] = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32)
        params[f"scaler{i}"] = np.ones((fan_out, fan_in), dtype=np.float32)
        params[f"coeff{i}"] = rng.uniform(-c, c, (fan_out, fan_in, config.n_basis)).astype(np.float32)
    return Model(config, params, knots=kan_knots(config))


def kan_knots(config: ModelConfig) -> np.ndarray:
    lo, hi = config.grid_range
    return uniform_knots(config.num_knots, config.spline_order, lo, hi)


def model_from_params(config: ModelConfig, params: dict[str, np.ndarray]) -> Model:
    return Model(config, params, knots=kan_knots(config) if config.kind == "kan" else None)


def forward(model, x: Tensor) -> Tensor:
    return model.forward(x)
