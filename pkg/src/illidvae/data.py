"""Toy two-Gaussian data and IDX image files."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

TOY_MEANS = np.array([[0.0, 0.0], [10.0, 10.0]])


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ToyDataset:
    xs: np.ndarray
    labels: np.ndarray
    sigma: float
    seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def train(self):
        return self.xs[self.train_idx], self.labels[self.train_idx]

    @property
    def test(self):
        return self.xs[self.test_idx], self.labels[self.test_idx]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "label"])
            for (a, b), lab in zip(self.xs, self.labels):
                w.writerow([repr(float(a)), repr(float(b)), int(lab)])
        return path


def generate_toy(sigma: float, n_per_class: int = 10000, seed: int = 0,
                 test_fraction: float = 0.1) -> ToyDataset:
    """Two isotropic Gaussians at (0,0) and (10,10) with std ``sigma``.

    Rows are shuffled; the train/test split is stratified per class.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    xs = np.concatenate([TOY_MEANS[k] + sigma * rng.standard_normal((n_per_class, 2))
                         for k in range(2)])
    labels = np.repeat(np.arange(2), n_per_class)
    perm = rng.permutation(len(xs))
    xs, labels = xs[perm], labels[perm]
    n_test = int(round(test_fraction * n_per_class))
    test = np.concatenate([np.flatnonzero(labels == k)[:n_test] for k in range(2)])
    test = np.sort(test)
    train = np.setdiff1d(np.arange(len(xs)), test)
    return ToyDataset(xs, labels, float(sigma), seed, train, test)


def _read_header(raw: bytes, path, expected_magic: int):
    if len(raw) < 4:
        raise IdxFormatError(path, 0, "file too short for a magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    return dims, 4 + 4 * ndim


def load_idx(path, kind: str = "images") -> np.ndarray:
    """Read an unsigned-byte IDX file.

    ``kind="images"`` returns an ``(n, h*w)`` float array scaled to [0, 1];
    ``kind="labels"`` returns an int array.
    """
    raw = Path(path).read_bytes()
    expected = IDX_IMAGES if kind == "images" else IDX_LABELS
    dims, offset = _read_header(raw, path, expected)
    count = int(np.prod(dims))
    if len(raw) < offset + count:
        raise IdxFormatError(path, len(raw), f"truncated payload: need {count} bytes")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)
    if kind == "labels":
        return data.astype(np.int64)
    return data.reshape(dims[0], -1).astype(np.float64) / 255.0


def load_idx_pair(images_path, labels_path):
    images = load_idx(images_path, "images")
    labels = load_idx(labels_path, "labels")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def write_idx(path, array: np.ndarray, kind: str = "images") -> Path:
    """Write uint8 data as IDX (images ``(n, h, w)``, labels ``(n,)``)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES if kind == "images" else IDX_LABELS
    if (magic & 0xFF) != arr.ndim:
        raise ValueError(f"{kind} must have {magic & 0xFF} dims, got {arr.ndim}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.tobytes())
    return path
