import os
from pathlib import Path

import numpy as np
import pytest

from advbench.data import Dataset, load_dataset
from advbench.models import Model, ModelConfig

REPO = Path(__file__).resolve().parents[1]

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def cardinal_cubic(u):
    """Closed-form uniform cubic B-spline on [0, 4)."""
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros_like(u)
    m = (u >= 0) & (u < 1)
    out[m] = u[m] ** 3 / 6
    m = (u >= 1) & (u < 2)
    out[m] = (-3 * u[m] ** 3 + 12 * u[m] ** 2 - 12 * u[m] + 4) / 6
    m = (u >= 2) & (u < 3)
    out[m] = (3 * u[m] ** 3 - 24 * u[m] ** 2 + 60 * u[m] - 44) / 6
    m = (u >= 3) & (u < 4)
    out[m] = (4 - u[m]) ** 3 / 6
    return out


def ref_basis(x, lo=-1.0, hi=1.0, num_knots=5):
    """Uniform cubic bases on the extended grid: shape x.shape + (num_knots + 3,)."""
    h = (hi - lo) / num_knots
    starts = lo + h * np.arange(-3, num_knots)
    return cardinal_cubic((np.asarray(x, np.float64)[..., None] - starts) / h)


def ref_logits(cfg: ModelConfig, params: dict, x, patterns=None):
    """Float64 numpy forward pass written independently of the tape engine.

    ``patterns``, if a list, collects the ReLU on/off masks of an MLP.
    """
    h = np.asarray(x, dtype=np.float64)
    n = len(cfg.widths) - 1
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    for i in range(n):
        if cfg.kind == "mlp":
            h = h @ p[f"w{i}"].T + p[f"b{i}"]
            if i < n - 1:
                if patterns is not None:
                    patterns.append(h > 0)
                h = np.maximum(h, 0.0)
        else:
            lo, hi = cfg.grid_range
            silu = h / (1 + np.exp(-h))
            basis = ref_basis(h, lo, hi, cfg.num_knots)
            w = p[f"scaler{i}"][:, :, None] * p[f"coeff{i}"]
            h = silu @ p[f"base{i}"].T + np.einsum("bik,oik->bo", basis, w)
    return h


def ref_ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


class StubModel:
    """Predicts from a fixed lookup: row i of the input (matched by its first pixel) gets label table[i]."""

    def __init__(self, model_id, table):
        self.model_id = model_id
        self.table = np.asarray(table)

    def predict(self, images, batch_size=1000):
        keys = np.rint(images[:, 0] * 1000).astype(int)
        return self.table[keys]


def synthetic_dataset(n=40, d=784, seed=0, name="mnist", split="test"):
    rng = np.random.default_rng(seed)
    images = rng.random((n, d), dtype=np.float32)
    labels = rng.integers(0, 10, n)
    return Dataset(name, images, labels, split)


def tiny_config(kind, hidden=(6,), input_dim=12, output_dim=4):
    return ModelConfig(kind, "tiny", hidden, input_dim=input_dim, output_dim=output_dim)


def data_dir():
    for cand in (os.environ.get("ADVBENCH_DATA_DIR"), "/root/data", REPO / "data"):
        if cand and (Path(cand) / "mnist").is_dir():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    d = data_dir()
    if d is None:
        pytest.skip("MNIST IDX files not available (set ADVBENCH_DATA_DIR)")
    return d


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_dataset(mnist_dir, "mnist", "test")


def randomized_model(model_id, seed):
    """Freshly built model with every parameter group perturbed away from its init constants."""
    from advbench.models import build_model

    cfg = model_id if isinstance(model_id, ModelConfig) else ModelConfig.from_id(model_id)
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        if name.startswith("b") and not name.startswith("base"):
            model.params[name] = rng.normal(0, 0.1, p.shape).astype(np.float32)
        elif name.startswith("scaler"):
            model.params[name] = rng.uniform(0.5, 1.5, p.shape).astype(np.float32)
        elif name.startswith("coeff"):
            model.params[name] = rng.normal(0, 0.3, p.shape).astype(np.float32)
    return model


def _inf_rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def gradient_errors(model, seed, n_inputs=16, coords=64, directions=3, h=1e-6):
    """Max relative error of tape gradients against float64 central differences.

    Input gradients are checked on ``coords`` random pixels of each of the
    ``n_inputs`` random inputs; parameter gradients on random directions per
    parameter tensor.  Errors are inf-norm normalised: max|a - b| / max|b|.
    """
    from advbench.tensor import Tape, Tensor, backward
    from advbench.train import cross_entropy

    rng = np.random.default_rng(seed)
    cfg = model.config
    x = rng.random((n_inputs, cfg.input_dim), dtype=np.float32)
    y = rng.integers(0, cfg.output_dim, n_inputs)

    xt = Tensor(x, requires_grad=True)
    leaves = model.leaves(requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(model.forward(xt, leaves), y, reduction="sum")
    grads = backward(tape, loss, wrt=[xt, *leaves.values()])

    p64 = {k: v.astype(np.float64) for k, v in model.params.items()}

    def total(params, inputs, patterns=None):
        return ref_ce(ref_logits(cfg, params, inputs, patterns), y)

    def same_pattern(a, b):
        return all(np.array_equal(p, q) for p, q in zip(a, b))

    # input gradient: each perturbed copy only changes its own sample's loss
    rows, cols = np.repeat(np.arange(n_inputs), coords), np.concatenate(
        [rng.choice(cfg.input_dim, coords, replace=False) for _ in range(n_inputs)])
    xp = np.repeat(x.astype(np.float64), coords, axis=0)
    xm = xp.copy()
    xp[np.arange(len(rows)), cols] += h
    xm[np.arange(len(rows)), cols] -= h
    pat_p, pat_m = [], []
    lp = ref_ce(ref_logits(cfg, p64, xp, pat_p), np.repeat(y, coords))
    lm = ref_ce(ref_logits(cfg, p64, xm, pat_m), np.repeat(y, coords))
    fd_x = (lp - lm) / (2 * h)
    # a central difference straddling a ReLU kink is not a derivative estimate
    smooth = np.ones(len(rows), bool)
    for p, q in zip(pat_p, pat_m):
        smooth &= np.all(p == q, axis=1)
    errors = {"input": _inf_rel(grads[xt][rows, cols].astype(np.float64)[smooth], fd_x[smooth])}

    for name, leaf in leaves.items():
        an, fd = [], []
        while len(fd) < directions:
            v = rng.normal(size=leaf.shape)
            plus = dict(p64, **{name: p64[name] + h * v})
            minus = dict(p64, **{name: p64[name] - h * v})
            pat_p, pat_m = [], []
            f_plus, f_minus = total(plus, x, pat_p).sum(), total(minus, x, pat_m).sum()
            if not same_pattern(pat_p, pat_m):
                continue
            fd.append((f_plus - f_minus) / (2 * h))
            an.append(float(np.sum(grads[leaf].astype(np.float64) * v)))
        errors[name] = _inf_rel(np.array(an), np.array(fd))
    return errors


class LookupSource:
    """A differentiable tiny model whose clean predictions come from a label lookup (always correct)."""

    def __init__(self, model, clean_images, labels, model_id="KAN_small"):
        self.inner = model
        self.model_id = model_id
        self.clean = clean_images
        self.labels = labels

    def leaves(self, requires_grad=False):
        return self.inner.leaves(requires_grad)

    def forward(self, x, params=None):
        return self.inner.forward(x, params)

    def nearest(self, images):
        d = np.abs(images[:, None, :] - self.clean[None, :, :]).max(axis=2)
        return d.argmin(axis=1), d.min(axis=1)

    def predict(self, images, batch_size=1000):
        idx, _ = self.nearest(images)
        return self.labels[idx]


class PlantedTarget(LookupSource):
    """Correct on clean inputs; wrong on any perturbed copy of a planted sample index."""

    def __init__(self, clean_images, labels, planted, model_id="MLP_small"):
        super().__init__(None, clean_images, labels, model_id)
        self.planted = set(int(i) for i in planted)

    def predict(self, images, batch_size=1000):
        idx, dist = self.nearest(images)
        out = self.labels[idx].copy()
        for row, (i, d) in enumerate(zip(idx, dist)):
            if d > 0 and int(i) in self.planted:
                out[row] = (out[row] + 1) % 10
        return out
