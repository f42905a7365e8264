"""Deterministic synthetic image datasets sized for minutes-scale training.

Every image is a pure function of (spec, index): the generator is re-seeded
per index, so iteration order, resumption, and cross-platform runs all see
identical data. Pixels are normalized to [-1, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DataError",
    "DatasetSpec",
    "SyntheticDataset",
    "generate",
    "normalize",
    "denormalize",
    "load_image_dir",
]


class DataError(Exception):
    """Bad dataset spec, unknown kind, or unreadable external data."""


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "shapes"
    image_size: int = 16
    num_classes: int = 3
    count: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("shapes", "gaussian_blobs"):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        if self.count < 1 or self.image_size < 4:
            raise DataError(f"bad dataset spec: count={self.count}, "
                            f"image_size={self.image_size}")


def _pixel_grid(size: int):
    c = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")


def _shape_alpha(kind: int, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    """Anti-aliased coverage of circle (0), square (1), or triangle (2)."""
    xx, yy = _pixel_grid(size)
    if kind == 0:
        d = np.hypot(xx - cx, yy - cy) - r
    elif kind == 1:
        d = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - r
    else:
        # equilateral triangle, apex up, circumradius r
        angles = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3,
                           np.pi / 2 + 4 * np.pi / 3])
        vx = cx + r * np.cos(angles)
        vy = cy - r * np.sin(angles)
        d = np.full_like(xx, -np.inf)
        for k in range(3):
            ex, ey = vx[(k + 1) % 3] - vx[k], vy[(k + 1) % 3] - vy[k]
            nx, ny = ey, -ex
            norm = np.hypot(nx, ny)
            d = np.maximum(d, ((xx - vx[k]) * nx + (yy - vy[k]) * ny) / norm)
    # distance in pixel units -> soft edge one pixel wide
    return np.clip(0.5 - d * size, 0.0, 1.0)


def generate(spec: DatasetSpec, index: int):
    """(image in [-1, 1] with shape (3, s, s), label or None)."""
    if not 0 <= index < spec.count:
        raise DataError(f"index {index} out of range [0, {spec.count})")
    rng = np.random.default_rng([spec.seed, index])
    s = spec.image_size
    if spec.kind == "shapes":
        n_kinds = spec.num_classes if spec.num_classes > 0 else 3
        label = int(rng.integers(n_kinds))
        cx, cy = rng.uniform(0.35, 0.65, size=2)
        r = rng.uniform(0.18, 0.32)
        color = rng.uniform(0.45, 1.0, size=3)
        bg = rng.uniform(0.0, 0.12, size=3)
        alpha = _shape_alpha(label % 3, s, cx, cy, r)
        img01 = bg[:, None, None] + alpha[None] * (color - bg)[:, None, None]
        out_label = label if spec.num_classes > 0 else None
    else:  # gaussian_blobs
        if spec.num_classes > 0:
            label = int(rng.integers(spec.num_classes))
            n_blobs = label + 1
            out_label = label
        else:
            n_blobs = 2
            out_label = None
        xx, yy = _pixel_grid(s)
        acc = np.zeros((3, s, s))
        for _ in range(n_blobs):
            bx, by = rng.uniform(0.2, 0.8, size=2)
            sig = rng.uniform(0.12, 0.28)
            amp = rng.uniform(-1.0, 1.0, size=3)
            g = np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * sig * sig))
            acc += amp[:, None, None] * g[None]
        img01 = 0.5 + 0.5 * np.tanh(1.5 * acc)
    return normalize(img01.astype(np.float32)), out_label


def normalize(image: np.ndarray, src=(0.0, 1.0)) -> np.ndarray:
    """Affine map from the source range to [-1, 1]."""
    lo, hi = src
    return (2.0 * (image.astype(np.float32) - np.float32(lo))
            / np.float32(hi - lo) - 1.0).astype(np.float32)


def denormalize(image: np.ndarray, dst=(0.0, 1.0)) -> np.ndarray:
    """Inverse of :func:`normalize`; round trip is exact up to float32."""
    lo, hi = dst
    return ((image.astype(np.float32) + 1.0) * np.float32((hi - lo) / 2.0)
            + np.float32(lo)).astype(np.float32)


class SyntheticDataset:
    """Materialized dataset; batch() gathers rows by index."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        imgs, labels = [], []
        for i in range(spec.count):
            img, lab = generate(spec, i)
            imgs.append(img)
            labels.append(lab)
        self.images = np.stack(imgs)
        self.labels = (np.asarray(labels, dtype=np.int64)
                       if labels[0] is not None else None)

    def __len__(self) -> int:
        return self.spec.count

    def batch(self, indices):
        idx = np.asarray(indices)
        labs = self.labels[idx] if self.labels is not None else None
        return self.images[idx], labs


def load_image_dir(path: str, image_size: int) -> np.ndarray:
    """Import a directory of fixed-size 8-bit RGB images, normalized to
    [-1, 1]. Order is sorted by filename for reproducibility."""
    from PIL import Image

    names = sorted(f for f in os.listdir(path)
                   if f.lower().endswith((".png", ".jpg", ".jpeg", ".bmp")))
    if not names:
        raise DataError(f"no images found in {path}")
    out = []
    for name in names:
        img = Image.open(os.path.join(path, name)).convert("RGB")
        if img.size != (image_size, image_size):
            raise DataError(f"{name}: size {img.size} != "
                            f"({image_size}, {image_size})")
        arr = np.asarray(img, dtype=np.float32) / 255.0
        out.append(normalize(arr.transpose(2, 0, 1)))
    return np.stack(out)
