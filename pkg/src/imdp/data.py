"""Dataset ingestion and synthesis.

Two sources: IDX-format image files (big-endian, the classic handwritten
digit layout) rescaled to [-1, 1], and synthetic ring-of-Gaussians
mixtures for fast trend experiments.  Batches are drawn uniformly with
replacement so the per-batch inclusion probability matches the sampling
ratio used by the privacy accounting.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import as_tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed IDX payload or invalid synthesis parameters."""


@dataclass
class Dataset:
    """Feature matrix in [-1, 1] with optional integer labels."""

    x: np.ndarray
    y: np.ndarray | None = None
    source: str = "unknown"

    def __post_init__(self):
        self.x = as_tensor(self.x, where="dataset features")
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("features must be a non-empty (N, d) matrix")
        if self.x.min() < -1.0 or self.x.max() > 1.0:
            raise ValueError("features must lie in [-1, 1]")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.x.shape[0],):
                raise ValueError("labels must have one entry per row")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


def _read_be_u32(data: bytes, offset: int) -> int:
    if offset + 4 > len(data):
        raise DataFormatError("truncated IDX header")
    return struct.unpack_from(">I", data, offset)[0]


def load_idx_images(path) -> Dataset:
    """Parse an IDX image file into a flattened, rescaled feature matrix."""
    with open(path, "rb") as f:
        data = f.read()
    magic = _read_be_u32(data, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"bad IDX image magic 0x{magic:08x}")
    n = _read_be_u32(data, 4)
    rows = _read_be_u32(data, 8)
    cols = _read_be_u32(data, 12)
    if n < 1 or rows < 1 or cols < 1 or rows * cols > 1 << 24:
        raise DataFormatError(f"implausible IDX dimensions ({n}, {rows}, {cols})")
    need = 16 + n * rows * cols
    if len(data) != need:
        raise DataFormatError(f"IDX payload holds {len(data) - 16} bytes, expected {n * rows * cols}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    x = pixels.astype(np.float64) / 255.0 * 2.0 - 1.0
    return Dataset(x=x, source=f"idx:{path}")


def load_idx_labels(path) -> np.ndarray:
    """Parse an IDX label file into an integer array."""
    with open(path, "rb") as f:
        data = f.read()
    magic = _read_be_u32(data, 0)
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"bad IDX label magic 0x{magic:08x}")
    n = _read_be_u32(data, 4)
    if len(data) != 8 + n:
        raise DataFormatError(f"IDX label payload holds {len(data) - 8} bytes, expected {n}")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def bytes_from_features(x: np.ndarray) -> np.ndarray:
    """Inverse of the ingest rescale; identity on byte-derived features."""
    return np.clip(np.rint((np.asarray(x) + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def downsample_images(x: np.ndarray, side: int, out_side: int) -> np.ndarray:
    """Average-pool square images to a smaller side, center-cropping first
    when the sides do not divide evenly (e.g. 28 -> 8 crops to 24)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != side * side:
        raise ValueError(f"expected flattened {side}x{side} images")
    if out_side < 1 or out_side > side:
        raise ValueError("out_side must lie in [1, side]")
    factor = side // out_side
    crop = side - out_side * factor
    lo = crop // 2
    imgs = x.reshape(-1, side, side)[:, lo:lo + out_side * factor, lo:lo + out_side * factor]
    pooled = imgs.reshape(-1, out_side, factor, out_side, factor).mean(axis=(2, 4))
    return pooled.reshape(-1, out_side * out_side)


def synth_mixture(k: int, radius: float, std: float, n: int, seed: int) -> Dataset:
    """Ring of k equal-weight Gaussians, stratified n/k points per component.

    Coordinates are scaled so radius + 3*std maps to 1, then clamped to
    [-1, 1]; labels record the component index.
    """
    if k < 2:
        raise DataFormatError("k must be >= 2")
    if n < k:
        raise DataFormatError("n must be >= k")
    if radius <= 0.0 or std < 0.0:
        raise DataFormatError("radius must be positive and std non-negative")
    rng = np.random.default_rng(seed)
    counts = [n // k + (1 if j < n % k else 0) for j in range(k)]
    angles = 2.0 * np.pi * np.arange(k) / k
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    xs, ys = [], []
    for j in range(k):
        pts = means[j] + std * rng.standard_normal((counts[j], 2))
        xs.append(pts)
        ys.append(np.full(counts[j], j, dtype=np.int64))
    scale = 1.0 / (radius + 3.0 * std)
    x = np.clip(np.concatenate(xs) * scale, -1.0, 1.0)
    return Dataset(x=x, y=np.concatenate(ys),
                   source=f"mixture:k={k},radius={radius},std={std},n={n},seed={seed}")


def subset_by_label(ds: Dataset, labels, per_class: int, seed: int) -> Dataset:
    """Stratified subset with per_class rows per requested label, shuffled."""
    if ds.y is None:
        raise ValueError("dataset has no labels")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    picks = []
    for label in sorted(set(int(l) for l in labels)):
        rows = np.flatnonzero(ds.y == label)
        if rows.size < per_class:
            raise ValueError(f"label {label} has {rows.size} rows, need {per_class}")
        picks.append(rng.choice(rows, size=per_class, replace=False))
    order = np.concatenate(picks)
    rng.shuffle(order)
    return Dataset(x=ds.x[order], y=ds.y[order], source=f"{ds.source}|subset")


def batch_iter(ds: Dataset, m: int, seed: int):
    """Endless batches of m rows drawn uniformly with replacement."""
    if m < 1 or m > ds.n:
        raise ValueError(f"batch size {m} out of range for {ds.n} rows")

    def gen():
        rng = np.random.default_rng(seed)
        while True:
            idx = rng.integers(0, ds.n, size=m)
            yield ds.x[idx]

    return gen()
