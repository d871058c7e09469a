"""Training-time augmentation and the single /255 input scaling.

Training path, per sample and in this order: horizontal flip, rotation (0.2 rad),
zoom, contrast, rescale, rotation (30 deg), translation. The evaluation path
only rescales. Geometric transforms resample bilinearly about the image centre
with half-sample-symmetric ("reflect", ``dcba|abcd|dcba``) fill.

All randomness comes from :class:`AugmentationRng`, a Philox stream keyed by
``(seed, epoch, sample_index)`` so a sample's draws never depend on batch
composition or worker scheduling.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError


@dataclass(frozen=True)
class TranslationSpec:
    height_frac: float = 0.2
    width_frac: float = 0.3
    fill: str = "reflect"
    interpolation: str = "bilinear"


@dataclass(frozen=True)
class AugmentationConfig:
    flip_horizontal: bool = True
    rotation1_max_deg: float = math.degrees(0.2)
    zoom_frac: float = 0.2
    contrast_frac: float = 0.2
    rescale: float = 1.0 / 255.0
    rotation2_max_deg: float = 30.0
    translation: TranslationSpec = field(default_factory=TranslationSpec)
    enabled: bool = True
    # "degrees": rotation bounds are plain angles; "turns": they are fractions of a
    # full turn (0.2 -> +-72 deg), the convention of common layer libraries
    rotation_units: str = "degrees"
    # upper bound of pre-rescale intensities, used for contrast clipping
    value_max: float = 255.0

    def __post_init__(self):
        if isinstance(self.translation, dict):
            object.__setattr__(self, "translation", TranslationSpec(**self.translation))
        t = self.translation
        for name, v in (("zoom_frac", self.zoom_frac), ("contrast_frac", self.contrast_frac),
                        ("translation.height_frac", t.height_frac), ("translation.width_frac", t.width_frac)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.rotation1_max_deg < 0 or self.rotation2_max_deg < 0:
            raise ConfigError("rotation bounds must be >= 0")
        if self.rescale <= 0:
            raise ConfigError("rescale must be > 0")
        if self.rotation_units not in ("degrees", "turns"):
            raise ConfigError(f"rotation_units must be 'degrees' or 'turns', got {self.rotation_units!r}")
        if t.fill != "reflect" or t.interpolation != "bilinear":
            raise ConfigError("only reflect fill with bilinear interpolation is supported")

    def rotation_bounds_deg(self) -> tuple[float, float]:
        if self.rotation_units == "turns":
            return self.rotation1_max_deg * 360.0, self.rotation2_max_deg * 360.0
        return self.rotation1_max_deg, self.rotation2_max_deg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown augmentation keys: {sorted(unknown)}")
        d = dict(d)
        if "translation" in d:
            tr = d["translation"]
            bad = set(tr) - set(TranslationSpec.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown translation keys: {sorted(bad)}")
            d["translation"] = TranslationSpec(**tr)
        return cls(**d)


class AugmentationRng:
    """Deterministic counter-based (Philox) draw stream."""

    def __init__(self, seed: int | Sequence[int] = 0):
        self.seed = seed
        entropy = list(seed) if isinstance(seed, (tuple, list)) else int(seed)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    @classmethod
    def for_sample(cls, seed: int, sample_index: int, epoch: int = 0) -> "AugmentationRng":
        return cls((int(seed), int(epoch), int(sample_index)))

    def uniform(self, low: float, high: float) -> float:
        return float(self._gen.uniform(low, high))

    def random(self) -> float:
        return float(self._gen.random())


# ---------------------------------------------------------------------------
# deterministic transforms


def _snap(m: np.ndarray) -> np.ndarray:
    r = np.round(m)
    return np.where(np.abs(m - r) < 1e-12, r, m)


def _affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Resample so that output pixel p reads input at ``matrix @ p + offset``."""
    matrix = _snap(matrix)
    offset = _snap(offset)
    out = np.empty(img.shape, dtype=np.float64)
    channels = img[..., None] if img.ndim == 2 else img
    outc = out[..., None] if img.ndim == 2 else out
    for ch in range(channels.shape[-1]):
        ndimage.affine_transform(channels[..., ch].astype(np.float64), matrix, offset=offset,
                                 output=outc[..., ch], order=1, mode="reflect", prefilter=False)
    return out


def _centre(img) -> np.ndarray:
    h, w = img.shape[:2]
    return np.array([(h - 1) / 2.0, (w - 1) / 2.0])


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    return np.asarray(img)[:, ::-1].copy()


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counter-clockwise by ``angle_deg`` about the image centre."""
    img = np.asarray(img, dtype=np.float64)
    if angle_deg == 0:
        return img.copy()
    t = math.radians(angle_deg)
    m = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    c = _centre(img)
    return _affine(img, m, c - m @ c)


def zoom(img: np.ndarray, scale: float) -> np.ndarray:
    """Scale content by ``scale`` about the centre (>1 magnifies, <1 shrinks)."""
    img = np.asarray(img, dtype=np.float64)
    if scale == 1:
        return img.copy()
    m = np.eye(2) / scale
    c = _centre(img)
    return _affine(img, m, c - m @ c)


def translate(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Shift content down by ``dy`` rows and right by ``dx`` columns."""
    img = np.asarray(img, dtype=np.float64)
    if dy == 0 and dx == 0:
        return img.copy()
    return _affine(img, np.eye(2), np.array([-dy, -dx], dtype=np.float64))


def adjust_contrast(img: np.ndarray, factor: float, value_range=(0.0, 255.0)) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return img.copy()
    mean = img.mean(axis=(0, 1), keepdims=True)
    return np.clip(mean + factor * (img - mean), *value_range)


# ---------------------------------------------------------------------------
# random transforms


def random_flip_h(img, rng: AugmentationRng):
    return flip_horizontal(img) if rng.random() < 0.5 else np.array(img, copy=True)


def random_rotation(img, max_deg: float, rng: AugmentationRng):
    return rotate(img, rng.uniform(-max_deg, max_deg))


def random_zoom(img, zoom_frac: float, rng: AugmentationRng):
    return zoom(img, rng.uniform(1.0 - zoom_frac, 1.0 + zoom_frac))


def random_contrast(img, contrast_frac: float, rng: AugmentationRng, value_range=(0.0, 255.0)):
    return adjust_contrast(img, rng.uniform(1.0 - contrast_frac, 1.0 + contrast_frac), value_range)


def random_translation(img, spec: TranslationSpec, rng: AugmentationRng):
    h, w = np.shape(img)[:2]
    dy = rng.uniform(-spec.height_frac * h, spec.height_frac * h)
    dx = rng.uniform(-spec.width_frac * w, spec.width_frac * w)
    return translate(img, dy, dx)


def rescale(img, factor: float) -> np.ndarray:
    # for float32 x, x/255 sits far (>2**-33 relative) from any float32 rounding
    # midpoint, so the float64 product rounds to the same float32 as x / 255
    return (np.asarray(img, dtype=np.float64) * factor).astype(np.float32)


def apply_augmentations(img, cfg: AugmentationConfig, rng: AugmentationRng | None, training: bool) -> np.ndarray:
    """Map a preprocessed image to a float32 model input in [0, 1]."""
    if not training or not cfg.enabled:
        return rescale(img, cfg.rescale)
    rot1, rot2 = cfg.rotation_bounds_deg()
    x = np.asarray(img, dtype=np.float64)
    if cfg.flip_horizontal:
        x = random_flip_h(x, rng)
    x = random_rotation(x, rot1, rng)
    x = random_zoom(x, cfg.zoom_frac, rng)
    x = random_contrast(x, cfg.contrast_frac, rng, (0.0, cfg.value_max))
    x = x * cfg.rescale
    x = random_rotation(x, rot2, rng)
    x = random_translation(x, cfg.translation, rng)
    return np.clip(x, 0.0, cfg.value_max * cfg.rescale).astype(np.float32)


def augment_batch(images, cfg: AugmentationConfig, training: bool, seed: int = 0,
                  epoch: int = 0, sample_indices: Sequence[int] | None = None) -> np.ndarray:
    """Apply :func:`apply_augmentations` per sample with independent substreams."""
    images = np.asarray(images)
    if sample_indices is None:
        sample_indices = range(len(images))
    out = np.empty(images.shape, dtype=np.float32)
    for k, (img, idx) in enumerate(zip(images, sample_indices)):
        rng = AugmentationRng.for_sample(seed, idx, epoch) if training else None
        out[k] = apply_augmentations(img, cfg, rng, training)
    return out


def for_scale_at(cfg: AugmentationConfig, scale_at: str) -> AugmentationConfig:
    """Adjust ``cfg`` when the /255 scaling already happened during preprocessing."""
    if scale_at == "preprocess":
        return replace(cfg, rescale=1.0, value_max=1.0)
    return cfg
