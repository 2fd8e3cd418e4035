"""Checkpoint files: one JSON header line, then raw little-endian float32 blobs.

Layout::

    ADVBENCH-CKPT <header byte length>\\n
    <header JSON, UTF-8>
    <blob 0><blob 1>...

The header carries ``format_version``, the model config, seed, epochs trained,
clean accuracy, the init scheme and a manifest of ``{name, shape, offset,
nbytes, sha256}`` entries in declared order.  Offsets are relative to the first
blob byte.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import INIT_SCHEME, Model, ModelConfig, model_from_params

FORMAT_VERSION = 1
MAGIC = b"ADVBENCH-CKPT"


def encode_checkpoint(model: Model, seed: int, epochs_trained: int, clean_accuracy: float | None = None,
                      extra: dict | None = None) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, arr in model.params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob),
                         "sha256": hashlib.sha256(blob).hexdigest()})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": seed,
        "epochs_trained": epochs_trained,
        "clean_accuracy": clean_accuracy,
        "init": INIT_SCHEME[model.config.kind],
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + b" " + str(len(head)).encode() + b"\n" + head + b"".join(blobs)


def save_checkpoint(model: Model, path, seed: int = 0, epochs_trained: int = 0,
                    clean_accuracy: float | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, seed, epochs_trained, clean_accuracy, extra))
    tmp.replace(path)
    return path


def read_header(raw: bytes) -> tuple[dict, int]:
    """Parse the header; returns (header, offset of the first blob byte)."""
    nl = raw.find(b"\n")
    first = raw[:nl] if nl >= 0 else b""
    parts = first.split(b" ")
    if len(parts) != 2 or parts[0] != MAGIC or not parts[1].isdigit():
        raise CheckpointError("not an advbench checkpoint (bad magic line)")
    hlen = int(parts[1])
    start = nl + 1
    if len(raw) < start + hlen:
        raise CheckpointError("length mismatch: header truncated")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header manifest: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    return header, start + hlen


def decode_checkpoint(raw: bytes, verify_hashes: bool = True) -> tuple[Model, dict]:
    header, body = read_header(raw)
    try:
        config = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt header manifest: missing {exc}") from None
    total = sum(e["nbytes"] for e in entries)
    if len(raw) - body != total:
        raise CheckpointError(f"length mismatch: manifest declares {total} blob bytes, file has {len(raw) - body}")
    params = {}
    for e in entries:
        shape = tuple(e["shape"])
        if int(np.prod(shape)) * 4 != e["nbytes"]:
            raise CheckpointError(f"length mismatch for {e['name']}: shape {shape} vs {e['nbytes']} bytes")
        blob = raw[body + e["offset"]: body + e["offset"] + e["nbytes"]]
        if verify_hashes and hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise CheckpointError(f"hash mismatch for tensor {e['name']}")
        params[e["name"]] = np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape)
    return model_from_params(config, params), header


def load_checkpoint(path) -> Model:
    model, _ = decode_checkpoint(Path(path).read_bytes())
    return model


def load_checkpoint_with_header(path) -> tuple[Model, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_checkpoint(path, config: ModelConfig | None = None) -> bool:
    """True when the file decodes cleanly (and matches ``config`` if given)."""
    try:
        model, _ = decode_checkpoint(Path(path).read_bytes())
    except (CheckpointError, OSError):
        return False
    return config is None or model.config == config
