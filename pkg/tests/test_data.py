import gzip
import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advbench.data import (
    IMAGES_MAGIC,
    LABELS_MAGIC,
    batches,
    data_paths,
    load_idx,
    parse_idx,
    resolve_data_dir,
    seeded_prefix,
    select_correct,
    select_from_masks,
)
from advbench.errors import EmptySelectionError, FormatError

from conftest import StubModel, synthetic_dataset


def idx_images(pixels):
    n, h, w = pixels.shape
    return struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pixels.astype(np.uint8).tobytes()


def idx_labels(labels):
    return struct.pack(">II", LABELS_MAGIC, len(labels)) + np.asarray(labels, np.uint8).tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(1)
    pixels = rng.integers(0, 256, (7, 28, 28))
    labels = rng.integers(0, 10, 7)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(idx_images(pixels))
    lp.write_bytes(idx_labels(labels))
    return ip, lp, pixels, labels


def test_round_trip_scales_by_255(idx_pair):
    ip, lp, pixels, labels = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (7, 784) and ds.images.dtype == np.float32
    assert np.array_equal(ds.images, pixels.reshape(7, -1).astype(np.float32) / np.float32(255))
    assert ds.labels.tolist() == labels.tolist()
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_gzip_detected_by_magic_bytes(idx_pair, tmp_path):
    ip, lp, pixels, _ = idx_pair
    gz = tmp_path / "img_no_suffix"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    assert np.array_equal(load_idx(gz, lp).images, load_idx(ip, lp).images)


def test_bad_magic_reports_offset_zero():
    raw = struct.pack(">II", 0x00000999, 1) + b"\x00"
    with pytest.raises(FormatError) as info:
        parse_idx(raw, LABELS_MAGIC)
    assert info.value.offset == 0


def test_truncated_and_trailing_payloads():
    good = idx_labels([1, 2, 3])
    with pytest.raises(FormatError, match="truncated"):
        parse_idx(good[:-1], LABELS_MAGIC)
    with pytest.raises(FormatError, match="trailing"):
        parse_idx(good + b"\x00", LABELS_MAGIC)
    with pytest.raises(FormatError, match="header"):
        parse_idx(good[:6], LABELS_MAGIC)


def test_count_mismatch_and_bad_label(tmp_path, idx_pair):
    ip, _, _, _ = idx_pair
    lp = tmp_path / "short"
    lp.write_bytes(idx_labels([1, 2]))
    with pytest.raises(FormatError, match="labels"):
        load_idx(ip, lp)
    lp.write_bytes(idx_labels([1, 2, 3, 4, 5, 6, 12]))
    with pytest.raises(FormatError, match="outside"):
        load_idx(ip, lp)


def test_missing_files_name_expected_paths(tmp_path):
    with pytest.raises(FileNotFoundError, match="t10k-images-idx3-ubyte"):
        data_paths(tmp_path, "kmnist", "test")


def test_data_dir_env_fallback(monkeypatch, tmp_path):
    monkeypatch.setenv("ADVBENCH_DATA_DIR", str(tmp_path))
    assert resolve_data_dir(None) == tmp_path
    assert resolve_data_dir("elsewhere").name == "elsewhere"


def test_batches_cover_every_sample_once():
    ds = synthetic_dataset(n=23)
    seen = np.concatenate([y for _, y in batches(ds, 5, shuffle_seed=3, epoch=1)])
    assert sorted(seen.tolist()) == sorted(ds.labels.tolist())
    sizes = [len(y) for _, y in batches(ds, 5)]
    assert sizes == [5, 5, 5, 5, 3]
    a = [x for x, _ in batches(ds, 5, shuffle_seed=3, epoch=1)]
    b = [x for x, _ in batches(ds, 5, shuffle_seed=3, epoch=2)]
    assert not all(np.array_equal(p, q) for p, q in zip(a, b))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 250), st.integers(0, 2**32 - 1))
def test_seeded_prefix_is_distinct_and_deterministic(n, k, seed):
    p = seeded_prefix(n, k, seed)
    assert len(p) == min(n, k)
    assert len(set(p.tolist())) == len(p)
    assert np.array_equal(p, seeded_prefix(n, k, seed))
    # a shorter prefix is a prefix of a longer one
    if k:
        assert np.array_equal(seeded_prefix(n, k - 1, seed), p[: min(n, k - 1)])


def test_select_correct_intersects_and_caps():
    n = 30
    ds = synthetic_dataset(n=n)
    ds.images[:, 0] = np.arange(n) / 1000
    good = ds.labels.copy()
    wrong = (ds.labels + 1) % 10
    a = StubModel("A", np.where(np.arange(n) % 2 == 0, good, wrong))
    b = StubModel("B", np.where(np.arange(n) % 3 == 0, good, wrong))
    full = select_correct(ds, [a, b])
    assert full.indices.tolist() == [i for i in range(n) if i % 6 == 0]
    capped = select_correct(ds, [a], cap=4, seed=9)
    assert len(capped) == 4 and np.all(np.diff(capped.indices) > 0)
    assert all(i % 2 == 0 for i in capped.indices)
    assert capped.content_hash() == select_correct(ds, [a], cap=4, seed=9).content_hash()
    assert "A" in capped.provenance


def test_empty_selection_raises():
    with pytest.raises(EmptySelectionError):
        select_from_masks([np.zeros(5, bool)], None, 0, "none")


def test_real_mnist_test_split(mnist_test, mnist_dir):
    assert mnist_test.images.shape == (10000, 784)
    assert np.bincount(mnist_test.labels).sum() == 10000
    digest = hashlib.md5(mnist_test.raw_labels).hexdigest()
    assert len(digest) == 32
    tr = load_idx(*data_paths(mnist_dir, "mnist", "train"))
    assert tr.images.shape == (60000, 784)
    assert hashlib.md5(tr.raw_images).hexdigest() == "6bbc9ace898e44ae57da46a324031adb"
