"""Dataset sources: MNIST-style IDX files and synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, IdxFormatError
from .nn import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated header, {len(raw)} bytes", len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    return struct.unpack(f">{ndim}I", raw[4:need])


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    dims = _read_header(raw, path, magic, ndim)
    offset = 4 + 4 * ndim
    size = int(np.prod(dims))
    if len(raw) - offset != size:
        # Report where the payload stops matching the declared counts.
        raise IdxFormatError(
            f"{path}: header declares {dims} = {size} bytes of data, found {len(raw) - offset}",
            offset + min(size, len(raw) - offset),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def load_mnist_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Pixels scaled to [0, 1], images flattened row-major."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4
        )
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IdxFormatError(f"label {labels[bad]} out of range", 8 + bad)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_mnist_idx(data: Dataset, images_path, labels_path, shape: tuple[int, int] = (28, 28)) -> None:
    """Inverse of :func:`load_mnist_idx` for datasets whose pixels are k/255."""
    n = len(data)
    if shape[0] * shape[1] != data.dim:
        raise ConfigError(f"image shape {shape} does not match feature dim {data.dim}")
    pixels = np.rint(data.features * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise ConfigError("features must lie in [0, 1] to be stored as IDX bytes")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, *shape))
        f.write(pixels.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(data.labels.astype(np.uint8).tobytes())


def blob_centers(n_classes: int, dim: int, radius: float = 3.0) -> np.ndarray:
    """Class ``c`` sits at ``radius * e_c``: equidistant, like simplex vertices.

    With more classes than dimensions the centers are fixed pseudo-random
    points on the sphere of the same radius (independent of any run seed).
    """
    if n_classes <= dim:
        return radius * np.eye(n_classes, dim)
    rng = np.random.default_rng(20_000 + n_classes * 1_000 + dim)
    v = rng.normal(size=(n_classes, dim))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def make_synthetic_blobs(
    n_classes: int,
    dim: int,
    samples_per_class: int,
    spread: float,
    seed: int,
    radius: float = 3.0,
) -> Dataset:
    """Isotropic Gaussian blobs of std ``spread`` around :func:`blob_centers`,
    in class-major order."""
    if min(n_classes, dim, samples_per_class) < 1 or spread < 0:
        raise ConfigError("blob sizes must be positive and spread nonnegative")
    centers = blob_centers(n_classes, dim, radius)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    x = centers[labels] + spread * rng.normal(size=(labels.size, dim))
    return Dataset(x, labels, n_classes)
