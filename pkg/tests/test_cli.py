import csv
import hashlib
import json
import struct

import numpy as np
import pytest

from advbench.cli import main
from advbench.data import IMAGES_MAGIC, LABELS_MAGIC, SPLIT_FILES

DATASETS = ["mnist", "fashion_mnist"]
MODELS = ["KAN_small", "MLP_small"]


def write_split(base, split, n, rng):
    labels = rng.integers(0, 10, n)
    # class-dependent blobs so a one-epoch model learns something
    pixels = rng.integers(0, 60, (n, 28, 28))
    for i, y in enumerate(labels):
        pixels[i, 2 * y:2 * y + 6, 4:24] = 230
    img, lab = SPLIT_FILES[split]
    (base / img).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, 28, 28) + pixels.astype(np.uint8).tobytes())
    (base / lab).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + labels.astype(np.uint8).tobytes())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    for name in DATASETS:
        base = root / "data" / name
        base.mkdir(parents=True)
        write_split(base, "train", 256, rng)
        write_split(base, "test", 120, rng)
    cfg = {"datasets": DATASETS, "models": MODELS, "train": {"epochs": 2, "learning_rate": 0.003},
           "sweep_models": MODELS, "sweep_epsilons": [0, 8, 32], "transfer_m": 40,
           "attacks": {"fgsm": {}, "pgd": {"steps": 3}, "cw": {"steps": 3}, "mim": {"steps": 3}},
           "paths": {"data_dir": str(root / "data"), "checkpoint_dir": str(root / "ckpt"),
                     "out_dir": str(root / "out")}}
    (root / "config.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "config.json")]) == 0
    return root


def run(ws, *args, out="out"):
    return main([args[0], "--config", str(ws / "config.json"), "--out", str(ws / out), *args[1:]])


def read(path):
    return list(csv.DictReader(open(path, newline="")))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_writes_one_checkpoint_per_pair(workspace):
    ckpts = sorted(p.relative_to(workspace / "ckpt").as_posix() for p in (workspace / "ckpt").rglob("*.ckpt"))
    assert ckpts == sorted(f"{d}/{m}.ckpt" for d in DATASETS for m in MODELS)
    summary = read(workspace / "out" / "train_summary.csv")
    assert len(summary) == 4 and all(float(r["clean_acc"]) > 10 for r in summary)


def test_rerun_skips_verified_checkpoints(workspace, capsys):
    before = digest(workspace / "ckpt" / "mnist" / "KAN_small.ckpt")
    assert run(workspace, "train", out="retrain") == 0
    assert "trained 0, skipped 4" in capsys.readouterr().out
    assert digest(workspace / "ckpt" / "mnist" / "KAN_small.ckpt") == before
    # identical summary CSV whether trained or skipped
    assert digest(workspace / "retrain" / "train_summary.csv") == digest(workspace / "out" / "train_summary.csv")


def test_force_retrains_deterministically(workspace, capsys):
    before = digest(workspace / "ckpt" / "mnist" / "MLP_small.ckpt")
    assert run(workspace, "train", "--force", "--models", "MLP_small", "--datasets", "mnist", out="force") == 0
    assert "trained 1, skipped 0" in capsys.readouterr().out
    assert digest(workspace / "ckpt" / "mnist" / "MLP_small.ckpt") == before


def test_invalid_size_tag_is_a_usage_error(workspace, capsys):
    with pytest.raises(SystemExit) as info:
        run(workspace, "attack", "--models", "KAN_tiny")
    assert info.value.code == 2
    assert "{small, medium, large}" in capsys.readouterr().err


def test_missing_data_names_expected_paths(workspace, tmp_path, capsys):
    code = main(["train", "--config", str(workspace / "config.json"), "--data-dir", str(tmp_path),
                 "--checkpoint-dir", str(tmp_path / "ck"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "train-images-idx3-ubyte" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "o" / "manifests" / "train.json").read_text())
    assert manifest["status"] == "incomplete" and manifest["errors"]


def test_missing_checkpoint_is_named(workspace, tmp_path, capsys):
    code = main(["attack", "--config", str(workspace / "config.json"), "--checkpoint-dir", str(tmp_path),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert "KAN_small.ckpt" in capsys.readouterr().err


def test_attack_grid_and_filters(workspace):
    assert run(workspace, "attack") == 0
    rows = read(workspace / "out" / "robust_accuracy.csv")
    assert len(rows) == len(DATASETS) * len(MODELS) * 4
    trace = read(workspace / "out" / "loss_trace.csv")
    assert len(trace) == len(DATASETS) * len(MODELS) * 3 * 4  # pgd, cw, mim at iterations 0..3
    assert all(r["ball_violations"] == "0" and r["box_violations"] == "0"
               for r in read(workspace / "out" / "attack_constraints.csv"))
    assert list((workspace / "out" / "images" / "mnist").glob("*_pert.pgm"))
    assert run(workspace, "attack", "--attacks", "fgsm", out="fgsm_only") == 0
    assert len(read(workspace / "fgsm_only" / "robust_accuracy.csv")) == len(DATASETS) * len(MODELS)


def test_zero_epsilon_gives_full_robust_accuracy(workspace):
    assert run(workspace, "attack", "--epsilon", "0", out="eps0") == 0
    assert {r["robust_acc"] for r in read(workspace / "eps0" / "robust_accuracy.csv")} == {"100.0"}


def test_sweep_rows(workspace):
    assert run(workspace, "sweep", out="sweep") == 0
    rows = read(workspace / "sweep" / "fgsm_sweep.csv")
    assert len(rows) == len(DATASETS) * len(MODELS) * 3
    assert {r["robust_acc"] for r in rows if r["epsilon_numerator_over_255"] == "0"} == {"100.0"}
    assert run(workspace, "sweep", "--models", "MLP_small", "--epsilon", "16/255", out="sweep1") == 0
    rows = read(workspace / "sweep1" / "fgsm_sweep.csv")
    assert [(r["model"], r["epsilon_fraction"]) for r in rows] == [("MLP_small", "16/255")] * len(DATASETS)


def test_transfer_full_and_pairs(workspace):
    assert run(workspace, "transfer", out="tr") == 0
    assert len(read(workspace / "tr" / "transfer.csv")) == len(DATASETS) * len(MODELS) ** 2 * 4
    total = read(workspace / "tr" / "transfer_total.csv")
    assert len(total) == len(DATASETS) * (len(MODELS) + 2)
    assert run(workspace, "transfer", "--pairs", "KAN_small:MLP_small", "--datasets", "mnist", out="tr1") == 0
    rows = read(workspace / "tr1" / "transfer.csv")
    assert len(rows) == 4 and {(r["source"], r["target"]) for r in rows} == {("KAN_small", "MLP_small")}
    assert len({r["subset_sha256"] for r in rows}) == 1


def test_repeat_runs_are_byte_identical(workspace):
    for out in ("rep_a", "rep_b"):
        assert run(workspace, "attack", "--attacks", "fgsm", "pgd", "--max-samples", "30", out=out) == 0
        assert run(workspace, "transfer", "--datasets", "mnist", out=out) == 0
    for name in ("robust_accuracy.csv", "loss_trace.csv", "attack_constraints.csv", "transfer.csv"):
        assert digest(workspace / "rep_a" / name) == digest(workspace / "rep_b" / name)


def test_report_verifies_manifests(workspace, capsys):
    out = "reported"
    assert run(workspace, "attack", "--attacks", "fgsm", out=out) == 0
    assert run(workspace, "report", out=out) == 0
    assert "verified" in capsys.readouterr().out
    assert (workspace / out / "report.md").exists()
    with open(workspace / out / "robust_accuracy.csv", "a") as fh:
        fh.write("tampered\n")
    assert run(workspace, "report", out=out) == 1
