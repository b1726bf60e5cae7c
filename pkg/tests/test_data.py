import gzip
import os
from pathlib import Path

import numpy as np
import pytest

from sharpcl.data import (
    DataFormatError,
    LabeledDataset,
    load_cifar_binary,
    load_dataset,
    load_idx,
    merge_emnist_case,
    read_idx_images,
    subset_per_class,
)

DATA_ROOT = Path(os.environ.get("SHARP_DATA_ROOT", "/root/data"))
HAVE_MNIST = (DATA_ROOT / "mnist" / "train-images-idx3-ubyte").exists()


def idx_images(images: np.ndarray) -> bytes:
    n, h, w = images.shape
    header = b"".join(int(v).to_bytes(4, "big") for v in (0x803, n, h, w))
    return header + images.astype(np.uint8).tobytes()


def idx_labels(labels) -> bytes:
    return (0x801).to_bytes(4, "big") + len(labels).to_bytes(4, "big") + bytes(labels)


@pytest.fixture
def tiny_idx(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(6, 4, 3), dtype=np.uint8)
    labels = [0, 1, 2, 0, 1, 2]
    (tmp_path / "img").write_bytes(idx_images(imgs))
    (tmp_path / "lab").write_bytes(idx_labels(labels))
    return tmp_path, imgs, labels


def test_load_idx_scales_to_unit_interval(tiny_idx):
    d, imgs, labels = tiny_idx
    ds = load_idx(d / "img", d / "lab")
    assert ds.images.shape == (6, 1, 4, 3) and ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.images[:, 0], imgs / np.float32(255))
    assert ds.labels.tolist() == labels


def test_gzip_and_transpose(tiny_idx):
    d, imgs, _ = tiny_idx
    (d / "img.gz").write_bytes(gzip.compress((d / "img").read_bytes()))
    ds = load_idx(d / "img.gz", d / "lab", transpose=True)
    assert ds.images.shape == (6, 1, 3, 4)
    np.testing.assert_array_equal(ds.images[0, 0], imgs[0].T / np.float32(255))


def test_truncated_file_names_offset(tiny_idx):
    d, _, _ = tiny_idx
    raw = (d / "img").read_bytes()
    (d / "bad").write_bytes(raw[:-5])
    with pytest.raises(DataFormatError) as err:
        read_idx_images(d / "bad")
    assert err.value.offset == len(raw) - 5 and "byte" in str(err.value)
    (d / "hdr").write_bytes(raw[:6])
    with pytest.raises(DataFormatError):
        read_idx_images(d / "hdr")


def test_wrong_magic_rejected(tiny_idx):
    d, _, _ = tiny_idx
    with pytest.raises(DataFormatError) as err:
        load_idx(d / "lab", d / "lab")
    assert err.value.offset == 0
    with pytest.raises(DataFormatError):
        load_idx(d / "img", d / "img")


def test_count_mismatch(tiny_idx):
    d, _, _ = tiny_idx
    (d / "lab5").write_bytes(idx_labels([0, 1, 2, 0, 1]))
    with pytest.raises(DataFormatError):
        load_idx(d / "img", d / "lab5")


def test_emnist_case_merge():
    ds = LabeledDataset(np.zeros((4, 1, 2, 2), np.float32), np.array([10, 36, 35, 61]))
    out = merge_emnist_case(ds, "byclass")
    assert out.labels.tolist() == [0, 0, 25, 25]
    letters = merge_emnist_case(LabeledDataset(np.zeros((26, 1, 1, 1)), np.arange(1, 27)))
    assert len(np.unique(letters.labels)) == 26 and len(letters) == 26
    assert letters.class_names[0] == "A"
    with pytest.raises(ValueError):
        merge_emnist_case(LabeledDataset(np.zeros((1, 1, 1, 1)), np.array([3])), "byclass")
    with pytest.raises(ValueError):
        merge_emnist_case(LabeledDataset(np.zeros((1, 1, 1, 1)), np.array([0])))


def cifar_records(labels, label_bytes):
    rng = np.random.default_rng(1)
    out = b""
    for lab in labels:
        out += bytes(lab) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
    return out


def test_cifar10_and_cifar100(tmp_path):
    (tmp_path / "c10").write_bytes(cifar_records([[3], [7]], 1))
    ds = load_cifar_binary(tmp_path / "c10")
    assert ds.images.shape == (2, 3, 32, 32) and ds.labels.tolist() == [3, 7]
    (tmp_path / "c100").write_bytes(cifar_records([[1, 42], [19, 99]], 2))
    fine = load_cifar_binary(tmp_path / "c100", label_bytes=2)
    assert fine.labels.tolist() == [42, 99]
    assert load_cifar_binary(tmp_path / "c100", label_bytes=2, fine=False).labels.tolist() == [1, 19]


def test_cifar_short_record(tmp_path):
    (tmp_path / "c").write_bytes(cifar_records([[1], [2]], 1)[:-10])
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "c", label_bytes=1)


def test_subset_per_class_is_seeded():
    ds = LabeledDataset(np.zeros((100, 1, 1, 1)), np.repeat(np.arange(4), 25))
    a = subset_per_class(ds, 40, np.random.default_rng(3))
    b = subset_per_class(ds, 40, np.random.default_rng(3))
    assert np.bincount(a.labels).tolist() == [10] * 4
    np.testing.assert_array_equal(a.labels, b.labels)


def test_missing_root(monkeypatch):
    monkeypatch.delenv("SHARP_DATA_ROOT", raising=False)
    with pytest.raises(FileNotFoundError):
        load_dataset("mnist", "train")


@pytest.mark.skipif(not HAVE_MNIST, reason="MNIST files not available")
def test_official_mnist_counts():
    train = load_dataset("mnist", "train", DATA_ROOT)
    test = load_dataset("mnist", "test", DATA_ROOT)
    assert train.images.shape == (60000, 1, 28, 28) and len(test) == 10000
    assert train.images.min() == 0 and train.images.max() == 1
    assert sorted(np.unique(train.labels)) == list(range(10))
