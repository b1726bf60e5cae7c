"""Unpack MNIST / Fashion-MNIST from npm tarballs into IDX files.

The sandbox has no direct dataset download, but the npm registry mirrors two
packages that carry the data:

* ``mnist-data`` ships the four official IDX files unchanged.
* ``fashion-mnist`` ships per-class JSON arrays of 28x28 bytes (70k images,
  no official split; a couple of empty rows are skipped). We take the first 6000 images of each class for
  training and the last 1000 for testing, then shuffle with a fixed seed.

Usage::

    npm pack mnist-data fashion-mnist
    python scripts/prepare_data.py --mnist mnist-data-1.2.6.tgz \
        --fmnist fashion-mnist-1.1.0.tgz --out /root/data
"""
import argparse
import json
import struct
import tarfile
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def unpack_mnist(tgz, out):
    out.mkdir(parents=True, exist_ok=True)
    with tarfile.open(tgz) as tar:
        for member in tar.getmembers():
            if member.name.startswith("package/data/") and "ubyte" in member.name:
                data = tar.extractfile(member).read()
                (out / Path(member.name).name).write_bytes(data)


def unpack_fmnist(tgz, out, n_test=1000, n_train=6000, seed=0):
    out.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    with tarfile.open(tgz) as tar:
        for c in range(10):
            member = tar.getmember(f"package/src/clothes/{c}.json")
            rows = [r for r in json.load(tar.extractfile(member))["data"] if len(r) == 784]
            arr = np.asarray(rows, dtype=np.uint8)
            arr = arr.reshape(-1, 28, 28)
            train_x.append(arr[:n_train])
            test_x.append(arr[-n_test:])
            train_y.append(np.full(n_train, c))
            test_y.append(np.full(n_test, c))
    rng = np.random.default_rng(seed)
    for prefix, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        write_idx_images(out / f"{prefix}-images-idx3-ubyte", x[order])
        write_idx_labels(out / f"{prefix}-labels-idx1-ubyte", y[order])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--mnist", type=Path)
    parser.add_argument("--fmnist", type=Path)
    parser.add_argument("--out", type=Path, required=True)
    args = parser.parse_args()
    if args.mnist:
        unpack_mnist(args.mnist, args.out / "mnist")
    if args.fmnist:
        unpack_fmnist(args.fmnist, args.out / "fmnist")


if __name__ == "__main__":
    main()
