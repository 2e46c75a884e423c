"""MNIST (IDX) and CIFAR-10 (binary batch) readers, normalization and augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.247, 0.243, 0.261], dtype=np.float32)
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PAD = 4


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    split: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        return Dataset(self.images[idx], self.labels[idx], self.split)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx_images(path) -> np.ndarray:
    """uint8 array (N, rows, cols) from an IDX3 image file."""
    raw = _read_bytes(Path(path))
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated, expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(Path(path))
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) < 8 + n:
        raise DataFormatError(f"{path}: truncated, expected {8 + n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8)


def _find(directory: Path, stems: list[str]) -> Path:
    for stem in stems:
        for name in (stem, stem + ".gz"):
            p = directory / name
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {stems} found in {directory}")


def _mnist_split(directory: Path, prefix: str, split: str) -> Dataset:
    img_path = _find(directory, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"])
    lbl_path = _find(directory, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"])
    images = read_idx_images(img_path)
    labels = read_idx_labels(lbl_path)
    if len(images) != len(labels):
        raise DataFormatError(f"{img_path.name} has {len(images)} images but {lbl_path.name} has {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), split)


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Train and test splits with pixels scaled to [0, 1]."""
    d = Path(directory)
    return _mnist_split(d, "train", "train"), _mnist_split(d, "t10k", "test")


def read_cifar_batch(path, expected_records: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """uint8 images (N, 3, 32, 32) and labels from one binary batch file."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    n = len(raw) // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise DataFormatError(f"{path}: {n} records, expected {expected_records}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{path}: label {labels.max()} out of range")
    return rec[:, 1:].reshape(n, 3, 32, 32), labels


def normalize_cifar(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float32) / 255.0
    return (x - CIFAR_MEAN[None, :, None, None]) / CIFAR_STD[None, :, None, None]


def load_cifar10(directory, records_per_batch: int | None = 10_000) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    xs, ys = [], []
    for i in range(1, 6):
        x, y = read_cifar_batch(d / f"data_batch_{i}.bin", records_per_batch)
        xs.append(x)
        ys.append(y)
    xt, yt = read_cifar_batch(d / "test_batch.bin", records_per_batch)
    train = Dataset(normalize_cifar(np.concatenate(xs)), np.concatenate(ys), "train")
    return train, Dataset(normalize_cifar(xt), yt, "test")


def augment_cifar(batch: np.ndarray, rng: np.random.Generator, offsets=None, flips=None) -> np.ndarray:
    """Zero-pad by 4, take a random 32x32 crop and mirror horizontally with probability 1/2.

    ``offsets`` (N, 2) and ``flips`` (N,) override the random draws.
    """
    n, c, h, w = batch.shape
    if offsets is None:
        offsets = rng.integers(0, 2 * CIFAR_PAD + 1, size=(n, 2))
    if flips is None:
        flips = rng.random(n) < 0.5
    padded = np.pad(batch, ((0, 0), (0, 0), (CIFAR_PAD, CIFAR_PAD), (CIFAR_PAD, CIFAR_PAD)))
    out = np.empty_like(batch)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def gaussian_blobs(n: int, dim: int = 8, classes: int = 4, seed: int = 0, split: str = "train",
                   center_seed: int = 1234, spread: float = 1.0) -> Dataset:
    """Isotropic unit-variance clusters around fixed random centers.

    Centers depend only on ``center_seed``, so train and test sets drawn
    with different ``seed`` values describe the same task.
    """
    centers = np.random.default_rng(center_seed).normal(scale=spread, size=(classes, dim))
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n)
    x = centers[y] + rng.normal(size=(n, dim))
    return Dataset(x.astype(np.float32), y.astype(np.int64), split)
