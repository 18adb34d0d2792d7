"""Dataset handling: MNIST IDX parsing, a synthetic generator, deterministic
batching, and training-time augmentation."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "AAP_DATA_DIR"


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: {msg} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def _read_file(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path) -> Dataset:
    raw = _read_file(images_path)
    if len(raw) < 16:
        raise IdxFormatError(images_path, len(raw), "truncated header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(images_path, 0, f"bad images magic 0x{magic:08x}")
    if len(raw) != 16 + n * h * w:
        raise IdxFormatError(images_path, len(raw),
                             f"expected {16 + n * h * w} bytes, got {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    raw = _read_file(labels_path)
    if len(raw) < 8:
        raise IdxFormatError(labels_path, len(raw), "truncated header")
    magic, nl = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(labels_path, 0, f"bad labels magic 0x{magic:08x}")
    if len(raw) != 8 + nl:
        raise IdxFormatError(labels_path, len(raw), f"expected {8 + nl} bytes, got {len(raw)}")
    if nl != n:
        raise IdxFormatError(labels_path, 8, f"label count {nl} != image count {n}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images.astype(np.float32) / 255.0, labels)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def resolve_data_dir(explicit=None):
    return Path(explicit or os.environ.get(DATA_DIR_ENV, "data"))


def mnist_available(data_dir=None) -> bool:
    d = resolve_data_dir(data_dir)
    return all(
        (d / f).exists() or (d / (f + ".gz")).exists()
        for pair in _MNIST_FILES.values() for f in pair
    )


def load_mnist(data_dir=None) -> tuple[Dataset, Dataset]:
    d = resolve_data_dir(data_dir)

    def find(name):
        for cand in (d / name, d / (name + ".gz")):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"MNIST file {name} not found under {d}")

    train = load_idx(find(_MNIST_FILES["train"][0]), find(_MNIST_FILES["train"][1]))
    test = load_idx(find(_MNIST_FILES["test"][0]), find(_MNIST_FILES["test"][1]))
    return train, test


def synthetic_blobs(num_classes=10, n_train=2048, n_test=512,
                    image_size=16, noise=0.15, seed=0) -> tuple[Dataset, Dataset]:
    """Gaussian bumps at class-specific positions, rendered as images.

    Cheap to learn for a small conv net, which keeps CI runs fast.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float32)
    centers = rng.uniform(image_size * 0.25, image_size * 0.75, size=(num_classes, 2))
    widths = rng.uniform(image_size * 0.08, image_size * 0.18, size=num_classes)

    def make(n, rng):
        labels = rng.integers(0, num_classes, size=n)
        cy = centers[labels, 0] + rng.normal(0, 0.5, n)
        cx = centers[labels, 1] + rng.normal(0, 0.5, n)
        s = widths[labels]
        img = np.exp(-((yy[None] - cy[:, None, None]) ** 2 +
                       (xx[None] - cx[:, None, None]) ** 2) / (2 * s[:, None, None] ** 2))
        img += rng.normal(0, noise, img.shape)
        img = np.clip(img, 0, 1).astype(np.float32)
        return Dataset(img[:, None], labels.astype(np.int64))

    return make(n_train, np.random.default_rng((seed, 1))), \
        make(n_test, np.random.default_rng((seed, 2)))


def batch_indices(n: int, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng((seed, epoch))
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def augment(images: np.ndarray, policy: str, rng: np.random.Generator) -> np.ndarray:
    """Random 4-pixel-pad crop and optional per-image horizontal flip."""
    if policy == "none":
        return images
    if policy not in ("crop", "crop+flip"):
        raise ValueError(f"unknown augmentation policy {policy!r}")
    n, c, h, w = images.shape
    pad = 4
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i in range(n):
        oy, ox = offs[i]
        out[i] = padded[i, :, oy:oy + h, ox:ox + w]
    if policy == "crop+flip":
        flips = rng.random(n) < 0.5
        out[flips] = out[flips, :, :, ::-1]
    return out
