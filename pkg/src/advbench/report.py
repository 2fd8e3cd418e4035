"""On-disk outputs: CSV tables, P5 graymaps and the per-command run manifest.

All CSVs are UTF-8 with LF line endings and a stable row order (dataset,
model, attack, then numeric keys ascending).
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import METHODS
from .data import DATASETS
from .errors import AdvbenchError
from .models import MODEL_IDS


def _rank(value, order: Sequence[str]) -> tuple:
    return (order.index(value), value) if value in order else (len(order), value)


def _write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise AdvbenchError(f"cannot write {path}: {exc}") from exc
    return path


def pct(value: float) -> str:
    """Percent with one decimal, e.g. 6.9."""
    return f"{value:.1f}"


def fmt_eps(eps: float) -> str:
    return f"{eps:.6f}"


def eps_numerator(eps: float) -> str:
    num = eps * 255
    r = round(num)
    return str(r) if abs(num - r) < 1e-6 else f"{num:.4f}"


def eps_fraction(eps: float) -> str:
    num = eps * 255
    r = round(num)
    if abs(num - r) < 1e-6:
        return f"{r}/255"
    return str(Fraction(eps).limit_denominator(1 << 20))


def _require(records, what: str):
    records = list(records)
    if not records:
        raise AdvbenchError(f"refusing to write an empty {what} table")
    return records


def emit_robustness_table(records, path) -> Path:
    records = _require(records, "robustness")
    records.sort(key=lambda r: (_rank(r.dataset, DATASETS), _rank(r.model, MODEL_IDS), _rank(r.attack, METHODS),
                                r.epsilon))
    rows = [[r.dataset, r.model, r.attack, fmt_eps(r.epsilon), pct(r.clean_acc), pct(r.robust_acc),
             r.n_evaluated, r.seed] for r in records]
    return _write_csv(path, ["dataset", "model", "attack", "epsilon", "clean_acc", "robust_acc", "n", "seed"], rows)


@dataclass
class LossTrace:
    dataset: str
    model: str
    attack: str
    mean: np.ndarray
    std: np.ndarray


def emit_loss_trace(traces: Iterable[LossTrace], path) -> Path:
    traces = _require(traces, "loss trace")
    traces.sort(key=lambda t: (_rank(t.dataset, DATASETS), _rank(t.model, MODEL_IDS), _rank(t.attack, METHODS)))
    rows = []
    for t in traces:
        for i, (m, s) in enumerate(zip(t.mean, t.std)):
            rows.append([t.dataset, t.model, t.attack, i, f"{m:.6f}", f"{s:.6f}"])
    return _write_csv(path, ["dataset", "model", "attack", "iteration", "mean_loss", "std_loss"], rows)


def emit_epsilon_sweep(records, path) -> Path:
    records = _require(records, "epsilon sweep")
    records.sort(key=lambda r: (_rank(r.dataset, DATASETS), _rank(r.model, MODEL_IDS), r.epsilon))
    rows = [[r.dataset, r.model, eps_numerator(r.epsilon), eps_fraction(r.epsilon), pct(r.robust_acc)]
            for r in records]
    return _write_csv(path, ["dataset", "model", "epsilon_numerator_over_255", "epsilon_fraction", "robust_acc"],
                      rows)


def emit_constraint_table(rows_in: Iterable[dict], path) -> Path:
    rows_in = _require(rows_in, "attack constraint")
    rows_in.sort(key=lambda r: (_rank(r["dataset"], DATASETS), _rank(r["model"], MODEL_IDS),
                                _rank(r["attack"], METHODS), r["epsilon"]))
    rows = [[r["dataset"], r["model"], r["attack"], fmt_eps(r["epsilon"]), r["n"], f"{r['max_linf']:.8f}",
             r["ball_violations"], r["box_violations"]] for r in rows_in]
    return _write_csv(path, ["dataset", "model", "attack", "epsilon", "n", "max_linf", "ball_violations",
                             "box_violations"], rows)


def emit_transfer_records(records, path) -> Path:
    records = _require(records, "transfer")
    records.sort(key=lambda r: (_rank(r.dataset, DATASETS), _rank(r.source, MODEL_IDS), _rank(r.target, MODEL_IDS),
                                _rank(r.attack, METHODS)))
    rows = [[r.dataset, r.source, r.target, r.attack, f"{r.t:.6f}", r.m, r.seed, r.subset_hash] for r in records]
    return _write_csv(path, ["dataset", "source", "target", "attack", "t", "m", "seed", "subset_sha256"], rows)


def emit_transfer_total(matrices, path) -> Path:
    """t_total grids in percent (rows = source, columns = target) plus both column-average variants."""
    matrices = _require(matrices, "transfer total")
    ids0 = matrices[0].model_ids
    header = ["dataset", "source", *ids0]
    rows = []
    for mat in sorted(matrices, key=lambda m: _rank(m.dataset, DATASETS)):
        if mat.model_ids != ids0:
            raise AdvbenchError("all transfer matrices in one file must share the model list")
        for i, src in enumerate(mat.model_ids):
            rows.append([mat.dataset, src, *[pct(100 * v) if v == v else "" for v in mat.t_total[i]]])
        for label, avg in (("average_all_rows", mat.average_all), ("average_off_diagonal", mat.average_off_diagonal)):
            rows.append([mat.dataset, label, *[f"{100 * v:.2f}" if v == v else "" for v in avg]])
    return _write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# images


def to_bytes(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes with round-half-to-even."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> Path:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {pixels.shape}")
    h, w = pixels.shape
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    except OSError as exc:
        raise AdvbenchError(f"cannot write {path}: {exc}") from exc
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def perturbation_image(x: np.ndarray, x_adv: np.ndarray, epsilon: float) -> np.ndarray:
    """0.5 + delta / (2 eps), so -eps is black, 0 is mid-gray and +eps is white."""
    delta = x_adv.astype(np.float64) - x.astype(np.float64)
    if epsilon <= 0:
        return to_bytes(np.full(delta.shape, 0.5))
    return to_bytes(0.5 + delta / (2.0 * epsilon))


def emit_adversarial_images(x: np.ndarray, x_adv: np.ndarray, directory, model: str, attack: str,
                            epsilon: float, indices: Sequence[int]) -> list[Path]:
    """Write ``<model>_<attack>_<idx>_adv.pgm`` and ``..._pert.pgm`` per sample into ``directory``."""
    written = []
    for row, idx in zip(range(len(x)), indices):
        side = int(round(np.sqrt(x.shape[1])))
        if side * side != x.shape[1]:
            raise ValueError("images must be square")
        stem = Path(directory) / f"{model}_{attack}_{int(idx)}"
        written.append(write_pgm(f"{stem}_adv.pgm", to_bytes(x_adv[row]).reshape(side, side)))
        written.append(write_pgm(f"{stem}_pert.pgm", perturbation_image(x[row], x_adv[row], epsilon)
                                 .reshape(side, side)))
    return written


# ---------------------------------------------------------------------------
# manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    stage_seeds: dict
    run_id: str = ""
    timestamp: str = ""
    checkpoints: dict[str, str] = field(default_factory=dict)
    datasets: dict[str, str] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)
    status: str = "incomplete"
    errors: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.run_id:
            blob = json.dumps({"command": self.command, "config": self.config}, sort_keys=True).encode()
            self.run_id = hashlib.sha256(blob).hexdigest()[:16]
        if not self.timestamp:
            self.timestamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def add_file(self, path, root) -> None:
        path, root = Path(path), Path(root)
        self.files[str(path.resolve().relative_to(root.resolve()))] = sha256_file(path)

    def path(self, out_dir) -> Path:
        return Path(out_dir) / "manifests" / f"{self.command}.json"

    def write(self, out_dir) -> Path:
        path = self.path(out_dir)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def verify(self, out_dir) -> list[str]:
        """Problems found when re-hashing listed files; empty means everything matches."""
        problems = []
        for rel, digest in sorted(self.files.items()):
            p = Path(out_dir) / rel
            if not p.exists():
                problems.append(f"missing {rel}")
            elif sha256_file(p) != digest:
                problems.append(f"hash mismatch {rel}")
        for path, digest in sorted(self.checkpoints.items()):
            if not Path(path).exists():
                problems.append(f"missing checkpoint {path}")
            elif sha256_file(path) != digest:
                problems.append(f"checkpoint hash mismatch {path}")
        return problems
