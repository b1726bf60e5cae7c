"""Dataset readers: IDX (MNIST family) and CIFAR binary batches.

Pixels are scaled to [0, 1] by dividing by 255; no mean/std normalisation.
Nothing is downloaded: every loader takes file paths.
"""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
DATA_ROOT_ENV = "SHARP_DATA_ROOT"


class DataFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path, self.offset = path, offset


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_names: dict[int, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def select(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_names)

    def of_classes(self, classes) -> "LabeledDataset":
        return self.select(np.isin(self.labels, list(classes)))


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _u32(buf: bytes, offset: int, path) -> int:
    if len(buf) < offset + 4:
        raise DataFormatError(path, len(buf), "file truncated inside header")
    return int.from_bytes(buf[offset : offset + 4], "big")


def read_idx_images(path) -> np.ndarray:
    buf = _read(path)
    magic = _u32(buf, 0, path)
    if magic != IDX_IMAGES:
        raise DataFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x}")
    n, h, w = (_u32(buf, o, path) for o in (4, 8, 12))
    need = 16 + n * h * w
    if len(buf) < need:
        raise DataFormatError(path, len(buf), f"truncated: {n} images of {h}x{w} need {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n * h * w, offset=16).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    buf = _read(path)
    magic = _u32(buf, 0, path)
    if magic != IDX_LABELS:
        raise DataFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{IDX_LABELS:08x}")
    n = _u32(buf, 4, path)
    if len(buf) < 8 + n:
        raise DataFormatError(path, len(buf), f"truncated: {n} labels need {8 + n} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, transpose: bool = False) -> LabeledDataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataFormatError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    if transpose:  # EMNIST stores images column-major
        images = images.transpose(0, 2, 1)
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return LabeledDataset(np.ascontiguousarray(x), labels)


def merge_emnist_case(ds: LabeledDataset, split: str = "letters") -> LabeledDataset:
    """Map upper- and lower-case letters onto 26 classes (A/a -> 0 ... Z/z -> 25).

    ``letters`` labels are 1..26; ``byclass`` labels 10..35 are upper case
    and 36..61 lower case (digits 0..9 are rejected).
    """
    if split == "letters":
        table = {i: i - 1 for i in range(1, 27)}
    elif split == "byclass":
        table = {i: i - 10 for i in range(10, 36)} | {i: i - 36 for i in range(36, 62)}
    else:
        raise ValueError(f"unknown EMNIST split {split!r}")
    lut = np.full(max(table) + 1, -1, dtype=np.int64)
    for k, v in table.items():
        lut[k] = v
    bad = (ds.labels < 0) | (ds.labels >= len(lut))
    mapped = np.where(bad, -1, lut[np.clip(ds.labels, 0, len(lut) - 1)])
    if (mapped < 0).any():
        raise ValueError(f"unknown EMNIST label id {int(ds.labels[mapped < 0][0])}")
    names = {i: chr(ord("A") + i) for i in range(26)}
    return LabeledDataset(ds.images, mapped, names)


def load_cifar_binary(path, label_bytes: int | None = None, fine: bool = True) -> LabeledDataset:
    """CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine label bytes) records.

    ``label_bytes`` is inferred from the file size when omitted. CIFAR-100
    yields fine labels unless ``fine`` is False.
    """
    buf = _read(path)
    pixels = 3 * 32 * 32
    if label_bytes is None:
        label_bytes = 2 if len(buf) % (1 + pixels) and not len(buf) % (2 + pixels) else 1
    rec = label_bytes + pixels
    if len(buf) == 0 or len(buf) % rec:
        raise DataFormatError(path, (len(buf) // rec) * rec, f"partial record (record size {rec})")
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1 if fine else 0].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledDataset(images, labels)


# ---------------------------------------------------------------------------
# dataset registry


_IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_EMNIST_FILES = {
    "train": ("emnist-letters-train-images-idx3-ubyte", "emnist-letters-train-labels-idx1-ubyte"),
    "test": ("emnist-letters-test-images-idx3-ubyte", "emnist-letters-test-labels-idx1-ubyte"),
}


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root given (use --data-root or ${DATA_ROOT_ENV})")
    return Path(root)


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(directory / name)


def load_dataset(name: str, split: str, root=None) -> LabeledDataset:
    """Load ``train`` or ``test`` split of mnist / fmnist / emnist / cifar10 / cifar100."""
    base = data_root(root)
    if name in ("mnist", "fmnist"):
        d = base / name
        img, lab = _IDX_FILES[split]
        return load_idx(_find(d, img), _find(d, lab))
    if name == "emnist":
        d = base / "emnist"
        img, lab = _EMNIST_FILES[split]
        return merge_emnist_case(load_idx(_find(d, img), _find(d, lab), transpose=True))
    if name == "cifar10":
        d = base / "cifar10"
        files = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        parts = [load_cifar_binary(_find(d, f)) for f in files]
        return LabeledDataset(np.concatenate([p.images for p in parts]),
                              np.concatenate([p.labels for p in parts]))
    if name == "cifar100":
        return load_cifar_binary(_find(base / "cifar100", f"{split}.bin"), label_bytes=2)
    raise ValueError(f"unknown dataset {name!r}")


def subset_per_class(ds: LabeledDataset, total: int, rng: np.random.Generator) -> LabeledDataset:
    """Keep ``total // n_classes`` random samples of every class (order preserved)."""
    classes = np.unique(ds.labels)
    per = max(1, total // len(classes))
    keep = []
    for c in classes:
        idx = np.flatnonzero(ds.labels == c)
        keep.append(rng.choice(idx, size=min(per, len(idx)), replace=False))
    return ds.select(np.sort(np.concatenate(keep)))
