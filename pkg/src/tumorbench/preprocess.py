"""Raw slice -> 256x256x3 model-ready image.

Chain: range normalization, bilinear resize, 3x3 sharpen, complement, grayscale
replication. Output stays in [0, 255]; the single division by 255 happens in
:func:`tumorbench.augment.apply_augmentations` unless ``scale_at="preprocess"``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import h5py
import numpy as np
from scipy import ndimage

from .errors import ConfigError, InvalidSize

DEFAULT_KERNEL = ((0.0, -1.0, 0.0), (-1.0, 5.0, -1.0), (0.0, -1.0, 0.0))
KERNELS = {
    "default": DEFAULT_KERNEL,
    "strong": ((-1.0, -1.0, -1.0), (-1.0, 9.0, -1.0), (-1.0, -1.0, -1.0)),
    "identity": ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 0.0)),
}


@dataclass(frozen=True)
class SharpenKernel:
    weights: tuple = DEFAULT_KERNEL
    border_mode: str = "replicate"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise ConfigError(f"sharpen kernel must be an odd-sized 2-D matrix, got {w.shape}")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError(f"sharpen kernel must sum to 1, sums to {w.sum()}")
        if self.border_mode != "replicate":
            raise ConfigError(f"unsupported border mode {self.border_mode!r}")
        object.__setattr__(self, "weights", tuple(tuple(float(v) for v in row) for row in w))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    @classmethod
    def named(cls, name: str) -> "SharpenKernel":
        try:
            return cls(KERNELS[name])
        except KeyError:
            raise ConfigError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


@dataclass(frozen=True)
class PreprocessConfig:
    side: int = 256
    kernel: str = "default"
    interpolation: str = "bilinear"
    scale_at: str = "model"

    def __post_init__(self):
        if self.scale_at not in ("model", "preprocess"):
            raise ConfigError(f"scale_at must be 'model' or 'preprocess', got {self.scale_at!r}")
        if self.interpolation not in ("bilinear", "nearest"):
            raise ConfigError(f"interpolation must be 'bilinear' or 'nearest', got {self.interpolation!r}")
        SharpenKernel.named(self.kernel)

    def to_dict(self) -> dict:
        return asdict(self)

    def cache_key(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _as_float(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidSize(f"expected a 2-D image, got shape {a.shape}")
    return a


def normalize_range(img) -> np.ndarray:
    """Linearly map ``[min, max]`` to ``[0, 255]``; constant images become 0."""
    a = _as_float(img)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) * (255.0 / (hi - lo))


def _sample_coords(n_in: int, n_out: int) -> np.ndarray:
    # pixel-area alignment: outer edges of input and output grids coincide,
    # so output pixel i samples input position (i + 0.5) * n_in / n_out - 0.5
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(pos, 0.0, n_in - 1)


def resize_bilinear(img, side: int = 256, interpolation: str = "bilinear") -> np.ndarray:
    """Resize to ``side x side`` with half-pixel-centre bilinear sampling.

    Halving an image averages each 2x2 block exactly. No antialiasing.
    """
    if side < 8:
        raise InvalidSize(f"side must be >= 8, got {side}")
    a = _as_float(img)
    h, w = a.shape
    ys, xs = _sample_coords(h, side), _sample_coords(w, side)
    if interpolation == "nearest":
        return a[np.floor(ys + 0.5).astype(int)][:, np.floor(xs + 0.5).astype(int)]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bottom = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def sharpen(img, kernel: SharpenKernel | None = None, clip: bool = True) -> np.ndarray:
    """Convolve with ``kernel`` using replicated borders, then clip to [0, 255]."""
    kernel = kernel or SharpenKernel()
    a = _as_float(img)
    k = kernel.array
    if a.shape[0] < k.shape[0] or a.shape[1] < k.shape[1]:
        raise InvalidSize(f"image {a.shape} smaller than kernel {k.shape}")
    out = ndimage.convolve(a, k, mode="nearest")
    return np.clip(out, 0.0, 255.0) if clip else out


def complement(img) -> np.ndarray:
    return 255.0 - np.asarray(img, dtype=np.float64)


def to_rgb(img) -> np.ndarray:
    a = np.asarray(img)
    return np.repeat(a[:, :, None], 3, axis=2)


def preprocess_pipeline(raw, config: PreprocessConfig | None = None) -> np.ndarray:
    """Full chain for one raw slice; returns float32 ``(side, side, 3)``."""
    config = config or PreprocessConfig()
    a = _as_float(raw)
    if min(a.shape) < 8:
        raise InvalidSize(f"raw image must be at least 8x8, got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("raw image contains non-finite values")
    a = normalize_range(a)
    a = resize_bilinear(a, config.side, config.interpolation)
    a = sharpen(a, SharpenKernel.named(config.kernel))
    a = complement(a)
    if config.scale_at == "preprocess":
        a = a / 255.0
    return to_rgb(a).astype(np.float32)


# ---------------------------------------------------------------------------
# preprocessed tensor caches


class ArrayCache:
    """In-memory image/label store addressed by manifest index."""

    def __init__(self, images: np.ndarray, labels: Sequence[int], indices: Sequence[int] | None = None):
        self._images = np.asarray(images, dtype=np.float32)
        self._labels = np.asarray(labels, dtype=np.int64)
        if indices is None:
            indices = range(len(self._labels))
        self._pos = {int(k): i for i, k in enumerate(indices)}

    def __len__(self):
        return len(self._labels)

    def images(self, indices: Sequence[int]) -> np.ndarray:
        rows = [self._pos[int(i)] for i in indices]
        if not rows:
            return np.zeros((0,) + self._images.shape[1:], dtype=np.float32)
        return self._images[rows]

    def labels(self, indices: Sequence[int]) -> np.ndarray:
        return self._labels[[self._pos[int(i)] for i in indices]].reshape(-1)


class H5Cache:
    """Preprocessed tensors stored in an HDF5 file written by :func:`build_cache`."""

    def __init__(self, path):
        self.path = Path(path)
        with h5py.File(self.path, "r") as f:
            self.config_key = f.attrs["config_key"]
            self.config = json.loads(f.attrs["config"])
            self._labels = f["labels"][()]
            self._shape = f["images"].shape[1:]
            indices = f["indices"][()]
        self._pos = {int(k): i for i, k in enumerate(indices)}

    def __len__(self):
        return len(self._labels)

    def images(self, indices: Sequence[int]) -> np.ndarray:
        rows = [self._pos[int(i)] for i in indices]
        if not rows:
            return np.zeros((0,) + self._shape, dtype=np.float32)
        order = np.argsort(rows)
        with h5py.File(self.path, "r") as f:
            data = f["images"][np.asarray(rows)[order]]
        out = np.empty_like(data)
        out[order] = data
        return out

    def labels(self, indices: Sequence[int]) -> np.ndarray:
        return self._labels[[self._pos[int(i)] for i in indices]].reshape(-1)


def build_cache(manifest, path, config: PreprocessConfig | None = None) -> H5Cache:
    """Preprocess every manifest record into an HDF5 tensor cache."""
    config = config or PreprocessConfig()
    n = manifest.total
    with h5py.File(path, "w") as f:
        f.attrs["config_key"] = config.cache_key()
        f.attrs["config"] = json.dumps(config.to_dict(), sort_keys=True)
        ds = f.create_dataset("images", shape=(n, config.side, config.side, 3), dtype=np.float32,
                              chunks=(1, config.side, config.side, 3))
        f.create_dataset("labels", data=manifest.labels)
        f.create_dataset("indices", data=np.arange(n, dtype=np.int64))
        for i, rec in enumerate(manifest.records):
            ds[i] = preprocess_pipeline(rec.image, config)
    return H5Cache(path)


def build_array_cache(manifest, config: PreprocessConfig | None = None, indices=None) -> ArrayCache:
    indices = range(manifest.total) if indices is None else list(indices)
    images = np.stack([preprocess_pipeline(manifest.records[i].image, config) for i in indices])
    labels = manifest.labels[list(indices)]
    return ArrayCache(images, labels, indices)
