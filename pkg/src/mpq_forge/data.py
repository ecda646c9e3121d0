"""Dataset ingestion: IDX binary files and a seeded synthetic image task."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class DatasetHandle:
    train_x: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    train_y: np.ndarray  # (N,) int64
    val_x: np.ndarray
    val_y: np.ndarray
    classes: int

    def __post_init__(self):
        for split, x, y in (("train", self.train_x, self.train_y), ("val", self.val_x, self.val_y)):
            if len(x) != len(y):
                raise ValueError(f"{split}: {len(x)} images but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.classes):
                raise ValueError(f"{split}: labels outside [0, {self.classes})")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train_x.shape[1:])

    @property
    def counts(self) -> dict:
        return {"train": len(self.train_y), "val": len(self.val_y)}


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < expected:
        raise IdxFormatError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise IdxFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """(N, H, W) uint8 array from a 3-D IDX image file."""
    return _read_idx(path, IMAGE_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, LABEL_MAGIC, 1)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got shape {images.shape}")
    Path(path).write_bytes(struct.pack(">I3I", IMAGE_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def _pair(images_path, labels_path):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images but {len(labels)} labels")
    x = images[:, None, :, :].astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def load_idx_dataset(images_path, labels_path, val_images_path=None, val_labels_path=None,
                     classes: Optional[int] = None, val_fraction: float = 0.1) -> DatasetHandle:
    """Load IDX files. Without a separate validation pair, the last ``val_fraction`` is held out."""
    x, y = _pair(images_path, labels_path)
    if val_images_path is not None:
        vx, vy = _pair(val_images_path, val_labels_path)
    else:
        cut = len(y) - int(round(val_fraction * len(y)))
        x, vx, y, vy = x[:cut], x[cut:], y[:cut], y[cut:]
    if classes is None:
        classes = int(max(y.max(initial=0), vy.max(initial=0))) + 1
    return DatasetHandle(x, y, vx, vy, classes)


def synth_dataset(classes: int, samples: int, input_shape: Sequence[int] = (1, 8, 8), seed: int = 0,
                  val_samples: Optional[int] = None, noise: float = 0.35) -> DatasetHandle:
    """Class-prototype images plus Gaussian noise, stored as 8-bit pixels.

    Prototypes are uniform in [0.2, 0.8]; each sample is its class prototype
    plus ``noise``-std Gaussian noise, clipped to [0, 1] and rounded to 1/255.
    Classes are balanced (label ``k`` for sample ``k mod classes``) and shuffled.
    """
    if classes < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    if val_samples is None:
        val_samples = max(classes, samples // 4)
    rng = np.random.default_rng([int(seed), 7])
    shape = tuple(int(d) for d in input_shape)
    protos = rng.uniform(0.2, 0.8, size=(classes,) + shape)

    def draw(count: int):
        y = np.arange(count) % classes
        y = y[rng.permutation(count)]
        x = protos[y] + rng.normal(0.0, noise, size=(count,) + shape)
        pixels = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
        return pixels.astype(np.float64) / 255.0, y.astype(np.int64)

    tx, ty = draw(samples)
    vx, vy = draw(val_samples)
    return DatasetHandle(tx, ty, vx, vy, classes)
