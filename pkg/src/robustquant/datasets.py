"""Built-in synthetic datasets and an IDX-format loader.

Everything here is deterministic in the seed, so experiment runs are
reproducible end to end without touching the filesystem.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Rng


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    classes: int

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]


def _split(x, y, val_fraction: float, rng: Rng) -> Dataset:
    n = x.shape[0]
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    n_val = max(1, int(round(n * val_fraction)))
    classes = int(y.max()) + 1
    return Dataset(x[n_val:], y[n_val:], x[:n_val], y[:n_val], classes)


def make_blobs(n: int = 4000, classes: int = 4, dim: int = 16, separation: float = 3.0,
               noise: float = 1.0, val_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Gaussian blobs with class means placed `separation` apart in random
    directions; linearly separable for separation well above the noise."""
    rng = Rng(seed, "philox").spawn("blobs")
    dirs = rng.normal((classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * separation
    y = np.arange(n) % classes
    x = means[y] + rng.normal((n, dim), scale=noise)
    return _split(x, np.asarray(y), val_fraction, rng.spawn("split"))


def make_patterns(n: int = 2000, size: int = 12, noise: float = 0.3,
                  val_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Procedural single-channel pattern images in four classes: horizontal
    stripes, vertical stripes, diagonal stripes, and spots.  Random phase
    and period force the classifier to learn orientation, not pixel values."""
    rng = Rng(seed, "philox").spawn("patterns")
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    y = np.arange(n) % 4
    x = np.empty((n, 1, size, size))
    periods = rng.uniform(3.0, 6.0, n)
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    for i in range(n):
        f = 2.0 * np.pi / periods[i]
        ph = phases[i]
        if y[i] == 0:
            img = np.sin(f * rows + ph)
        elif y[i] == 1:
            img = np.sin(f * cols + ph)
        elif y[i] == 2:
            img = np.sin(f * (rows + cols) + ph)
        else:
            img = np.sin(f * rows + ph) * np.sin(f * cols + ph)
        x[i, 0] = img
    x += rng.normal(x.shape, scale=noise)
    return _split(x, np.asarray(y), val_fraction, rng.spawn("split"))


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def read_idx_images(path) -> np.ndarray:
    """(n, 1, rows, cols) float64 images scaled to [0, 1]."""
    with open(path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad IDX image magic 0x{magic:08x} in {path}")
        data = np.frombuffer(fh.read(n * rows * cols), dtype=np.uint8)
    if data.size != n * rows * cols:
        raise ValueError(f"truncated IDX image file {path}")
    return data.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, n = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad IDX label magic 0x{magic:08x} in {path}")
        data = np.frombuffer(fh.read(n), dtype=np.uint8)
    if data.size != n:
        raise ValueError(f"truncated IDX label file {path}")
    return data.astype(np.intp)


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of read_idx_images, for tests and dataset export."""
    arr = np.clip(np.asarray(images) * 255.0, 0, 255).astype(np.uint8)
    n, _, rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, arr.shape[0]))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path, val_fraction: float = 0.25, seed: int = 0) -> Dataset:
    x = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"image/label count mismatch: {x.shape[0]} vs {y.shape[0]}")
    return _split(x, y, val_fraction, Rng(seed, "philox").spawn("idx-split"))
