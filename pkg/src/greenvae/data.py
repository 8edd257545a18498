"""Dataset ingestion: IDX files and seeded synthetic image sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class DatasetHandle:
    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: Optional[np.ndarray]
    provenance: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, H, W, C), got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _read_header(buf: bytes, path: str, magic: int, ndims: int) -> tuple[int, ...]:
    if len(buf) < 4:
        raise DataError(f"{path}: file too short for an IDX header")
    (seen,) = struct.unpack(">I", buf[:4])
    if seen != magic:
        raise DataError(f"{path}: bad magic 0x{seen:08x}, expected 0x{magic:08x}")
    need = 4 + 4 * ndims
    if len(buf) < need:
        raise DataError(f"{path}: truncated header")
    return struct.unpack(f">{ndims}I", buf[4:need])


def load_idx(images_path: str, labels_path: str | None = None) -> DatasetHandle:
    """Read an IDX image file (and optional label file); pixels scaled by 1/255."""
    with open(images_path, "rb") as fh:
        buf = fh.read()
    n, rows, cols = _read_header(buf, images_path, IMAGE_MAGIC, 3)
    payload = np.frombuffer(buf, dtype=np.uint8, offset=16)
    if payload.size < n * rows * cols:
        raise DataError(f"{images_path}: truncated payload, {payload.size} of {n * rows * cols} bytes")
    images = payload[: n * rows * cols].reshape(n, rows, cols, 1).astype(np.float32) / 255.0
    labels = None
    if labels_path:
        with open(labels_path, "rb") as fh:
            lbuf = fh.read()
        (m,) = _read_header(lbuf, labels_path, LABEL_MAGIC, 1)
        if m != n:
            raise DataError(f"count mismatch: {n} images vs {m} labels")
        lab = np.frombuffer(lbuf, dtype=np.uint8, offset=8)
        if lab.size < m:
            raise DataError(f"{labels_path}: truncated payload, {lab.size} of {m} labels")
        labels = lab[:m].astype(np.int64)
    return DatasetHandle(images, labels, f"idx:{images_path}")


def write_idx(path: str, images: np.ndarray | None = None, labels: np.ndarray | None = None) -> None:
    """Write an IDX image (n, H, W[, 1]) uint8 array or a label vector."""
    with open(path, "wb") as fh:
        if images is not None:
            a = np.asarray(images, dtype=np.uint8)
            a = a.reshape(a.shape[0], a.shape[1], a.shape[2])
            fh.write(struct.pack(">4I", IMAGE_MAGIC, *a.shape))
            fh.write(a.tobytes())
        else:
            a = np.asarray(labels, dtype=np.uint8)
            fh.write(struct.pack(">2I", LABEL_MAGIC, a.shape[0]))
            fh.write(a.tobytes())


def _class_centres(side: int) -> np.ndarray:
    # ten positions on a circle, pairwise distinct
    ang = 2 * np.pi * np.arange(N_CLASSES) / N_CLASSES
    r = 0.3 * side
    c = (side - 1) / 2
    return np.stack([c + r * np.sin(ang), c + r * np.cos(ang)], axis=1)


def make_synthetic(kind: str, n: int, side: int = 16, seed: int = 0, channels: int = 1) -> DatasetHandle:
    """Labeled images generated from a seeded stream.

    ``blobs``: one Gaussian spot whose position depends on the class
    (10 classes), with small position and width jitter.  ``rings``: an
    annulus whose radius depends on the class.
    """
    if n <= 0:
        raise DataError(f"synthetic dataset needs n > 0, got {n}")
    if side < 4:
        raise DataError(f"side must be >= 4, got {side}")
    if kind not in ("blobs", "rings"):
        raise DataError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, N_CLASSES, size=n)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    if kind == "blobs":
        centres = _class_centres(side)[labels] + rng.normal(0, 0.04 * side, size=(n, 2))
        width = 0.12 * side * rng.uniform(0.8, 1.2, size=n)
        d2 = (yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2
        img = np.exp(-d2 / (2 * width[:, None, None] ** 2))
    else:
        c = (side - 1) / 2 + rng.normal(0, 0.03 * side, size=(n, 2))
        radius = side * (0.1 + 0.035 * labels) * rng.uniform(0.95, 1.05, size=n)
        d = np.sqrt((yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2)
        img = np.exp(-((d - radius[:, None, None]) ** 2) / (2 * (0.05 * side) ** 2))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]
    if channels > 1:
        tint = rng.uniform(0.5, 1.0, size=(n, 1, 1, channels)).astype(np.float32)
        img = img * tint
    return DatasetHandle(img, labels.astype(np.int64), f"synthetic:{kind}:n={n}:side={side}:seed={seed}")
