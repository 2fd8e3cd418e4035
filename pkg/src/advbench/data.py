"""MNIST-family IDX ingestion, batching and evaluation-subset selection."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import EmptySelectionError, FormatError

DATASETS = ("mnist", "fashion_mnist", "kmnist")
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray  # (n, 784) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64 in 0..9
    split: str
    raw_images: bytes = field(default=b"", repr=False, compare=False)
    raw_labels: bytes = field(default=b"", repr=False, compare=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.name, self.images[idx], self.labels[idx], self.split)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        if self.raw_images:
            h.update(self.raw_images)
            h.update(self.raw_labels)
        else:
            h.update(np.ascontiguousarray(self.images).tobytes())
            h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SampleIndexSet:
    indices: np.ndarray
    provenance: str

    def __len__(self) -> int:
        return len(self.indices)

    def content_hash(self) -> str:
        return hashlib.sha256(np.asarray(self.indices, dtype="<i8").tobytes()).hexdigest()


def _read_maybe_gzip(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, path=None) -> tuple[tuple[int, ...], np.ndarray]:
    """Return (dims, uint8 payload) of one IDX buffer."""
    if len(raw) < 4:
        raise FormatError("file too short for an IDX magic number", 0, path)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX header", len(raw), path)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + size:
        raise FormatError(f"truncated payload: need {size} bytes after header", len(raw), path)
    if len(raw) > header + size:
        raise FormatError("trailing bytes after payload", header + size, path)
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "test") -> Dataset:
    raw_images = _read_maybe_gzip(images_path)
    raw_labels = _read_maybe_gzip(labels_path)
    img_dims, pixels = parse_idx(raw_images, IMAGES_MAGIC, images_path)
    lab_dims, labels = parse_idx(raw_labels, LABELS_MAGIC, labels_path)
    if img_dims[0] != lab_dims[0]:
        raise FormatError(f"{img_dims[0]} images but {lab_dims[0]} labels", 4, labels_path)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} outside 0..9", 8 + bad, labels_path)
    n = img_dims[0]
    images = (pixels.reshape(n, -1).astype(np.float32) / np.float32(255.0))
    return Dataset(name, images, labels.astype(np.int64), split, raw_images, raw_labels)


def data_paths(data_dir, name: str, split: str) -> tuple[Path, Path]:
    """Locate the IDX pair for ``name``/``split`` under ``data_dir/name``, preferring uncompressed files."""
    base = Path(data_dir) / name
    found = []
    for stem in SPLIT_FILES[split]:
        candidates = [base / stem, base / f"{stem}.gz"]
        hit = next((c for c in candidates if c.exists()), None)
        if hit is None:
            raise FileNotFoundError(f"missing {name} {split} file; expected one of: {', '.join(map(str, candidates))}")
        found.append(hit)
    return found[0], found[1]


def load_dataset(data_dir, name: str, split: str) -> Dataset:
    images, labels = data_paths(data_dir, name, split)
    return load_idx(images, labels, name=name, split=split)


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir:
        return Path(data_dir)
    env = os.environ.get("ADVBENCH_DATA_DIR")
    if env:
        return Path(env)
    return Path("data")


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int | None = None,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.arange(n) if shuffle_seed is None else epoch_permutation(n, shuffle_seed, epoch)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def seeded_prefix(n: int, k: int, seed: int) -> np.ndarray:
    """First ``k`` slots of a seeded Fisher-Yates shuffle of ``range(n)``."""
    rng = np.random.default_rng(seed)
    perm = np.arange(n)
    for i in range(min(k, n)):
        j = int(rng.integers(i, n))
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:k]


def correct_mask(model, ds: Dataset, batch_size: int = 1000) -> np.ndarray:
    return model.predict(ds.images, batch_size=batch_size) == ds.labels


def select_from_masks(masks: Sequence[np.ndarray], cap: int | None, seed: int,
                      provenance: str) -> SampleIndexSet:
    joint = np.logical_and.reduce(list(masks))
    qualifying = np.flatnonzero(joint)
    if qualifying.size == 0:
        raise EmptySelectionError(f"no samples qualify: {provenance}")
    if cap is not None and qualifying.size > cap:
        qualifying = np.sort(qualifying[seeded_prefix(qualifying.size, cap, seed)])
    return SampleIndexSet(qualifying.astype(np.int64), provenance)


def select_correct(ds: Dataset, models: Sequence, cap: int | None = None, seed: int = 0) -> SampleIndexSet:
    """Indices every model in ``models`` classifies correctly, optionally subsampled down to ``cap``."""
    ids = [getattr(m, "model_id", type(m).__name__) for m in models]
    provenance = f"correct under {'+'.join(ids)} on {ds.name}/{ds.split}; cap={cap}; seed={seed}"
    return select_from_masks([correct_mask(m, ds) for m in models], cap, seed, provenance)
