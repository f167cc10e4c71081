"""Spatial and intensity augmentation.

Spatial parameters are shared between the teacher and student views of an
unlabeled image; intensity perturbation is applied to the student view only.
Images are float arrays in [0, 255]; masks are {0, 1}.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage

ROTATION_RANGE = (-15.0, 15.0)
SHEAR_RANGE = (-15.0, 15.0)
ASPECT_RANGE = (-0.01, 0.01)
OFFSET_RANGE = (-15.0, 15.0)
GAIN_RANGE = (0.8, 1.2)
DROPOUT_RANGE = (0.0, 0.05)
CONTRAST_RANGE = (0.8, 1.2)
MID_GRAY = 127.5


@dataclass(frozen=True)
class SpatialAug:
    hflip: bool = False
    rotation: float = 0.0
    shear: float = 0.0
    aspect: float = 0.0
    size: int = 64

    def __post_init__(self):
        _in_range("rotation", self.rotation, ROTATION_RANGE)
        _in_range("shear", self.shear, SHEAR_RANGE)
        _in_range("aspect", self.aspect, ASPECT_RANGE)

    def matrix(self, in_size: int) -> np.ndarray:
        """2x2 forward map on centred (x, y) = (column, row) coordinates."""
        s = self.size / float(in_size)
        th, sh = np.deg2rad(self.rotation), np.deg2rad(self.shear)
        resize = np.diag([s, s])
        aspect = np.diag([1.0 + self.aspect, 1.0 - self.aspect])
        shear = np.array([[1.0, np.tan(sh)], [0.0, 1.0]])
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        flip = np.diag([-1.0 if self.hflip else 1.0, 1.0])
        return flip @ rot @ shear @ aspect @ resize

    def map_point(self, x: float, y: float, in_size: int) -> Tuple[float, float]:
        """Where input pixel (x, y) lands in the output image."""
        ci, co = (in_size - 1) / 2.0, (self.size - 1) / 2.0
        px, py = self.matrix(in_size) @ np.array([x - ci, y - ci])
        return float(px + co), float(py + co)


@dataclass(frozen=True)
class IntensityAug:
    offset: float = 0.0
    gain: float = 1.0
    dropout: float = 0.0
    contrast: float = 1.0
    dropout_seed: int = 0

    def __post_init__(self):
        _in_range("offset", self.offset, OFFSET_RANGE)
        _in_range("gain", self.gain, GAIN_RANGE)
        _in_range("dropout", self.dropout, DROPOUT_RANGE)
        _in_range("contrast", self.contrast, CONTRAST_RANGE)


def _in_range(name, value, bounds):
    lo, hi = bounds
    if not lo <= value <= hi:
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")


IDENTITY_SPATIAL = SpatialAug()
IDENTITY_INTENSITY = IntensityAug()


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_spatial(rng: np.random.Generator, size: int = 64) -> SpatialAug:
    return SpatialAug(
        hflip=bool(rng.random() < 0.5),
        rotation=float(rng.uniform(*ROTATION_RANGE)),
        shear=float(rng.uniform(*SHEAR_RANGE)),
        aspect=float(rng.uniform(*ASPECT_RANGE)),
        size=size,
    )


def sample_intensity(rng: np.random.Generator) -> IntensityAug:
    return IntensityAug(
        offset=float(rng.uniform(*OFFSET_RANGE)),
        gain=float(rng.uniform(*GAIN_RANGE)),
        dropout=float(rng.uniform(*DROPOUT_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        dropout_seed=int(rng.integers(2**31)),
    )


def sample_augmentation(rng_seed, kind: str) -> Union[SpatialAug, IntensityAug]:
    """Draw one parameter set uniformly from the allowed ranges.

    ``rng_seed`` may be an int seed or a ``numpy.random.Generator``; passing a
    generator repeatedly yields a reproducible sequence.
    """
    rng = _rng(rng_seed)
    if kind == "spatial":
        return sample_spatial(rng)
    if kind == "intensity":
        return sample_intensity(rng)
    raise ValueError(f"unknown augmentation kind {kind!r}")


def warp(array: np.ndarray, aug: SpatialAug, order: int) -> np.ndarray:
    """Resample a square 2-D array onto the ``aug.size`` grid.

    ``order`` 1 is bilinear, 0 nearest neighbour; outside pixels are zero.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {a.shape}")
    n = a.shape[0]
    inv = np.linalg.inv(aug.matrix(n))
    # scipy indexes (row, col) = (y, x)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    m = swap @ inv @ swap
    ci, co = (n - 1) / 2.0, (aug.size - 1) / 2.0
    offset = np.array([ci, ci]) - m @ np.array([co, co])
    return ndimage.affine_transform(a, m, offset=offset, output_shape=(aug.size, aug.size),
                                    order=order, mode="constant", cval=0.0, prefilter=False)


def apply_spatial(image: np.ndarray, mask: Optional[np.ndarray] = None,
                  aug: SpatialAug = IDENTITY_SPATIAL) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    image = np.asarray(image)
    if mask is not None and np.shape(mask) != image.shape:
        raise ValueError(f"mask shape {np.shape(mask)} != image shape {image.shape}")
    out = np.clip(warp(image, aug, order=1), 0.0, 255.0).astype(np.float32)
    if mask is None:
        return out, None
    m = warp((np.asarray(mask) > 0).astype(np.float64), aug, order=0)
    return out, (m > 0.5).astype(np.uint8)


def resize(image: np.ndarray, size: int = 64) -> np.ndarray:
    return apply_spatial(image, None, SpatialAug(size=size))[0]


def resize_mask(mask: np.ndarray, size: int = 64) -> np.ndarray:
    return apply_spatial(np.zeros(np.shape(mask)), mask, SpatialAug(size=size))[1]


def apply_intensity(image: np.ndarray, aug: IntensityAug = IDENTITY_INTENSITY) -> np.ndarray:
    """contrast -> gain -> offset -> clamp to [0, 255] -> pixel dropout."""
    x = np.asarray(image, dtype=np.float64)
    x = MID_GRAY + aug.contrast * (x - MID_GRAY)
    x = x * aug.gain + aug.offset
    x = np.clip(x, 0.0, 255.0)
    if aug.dropout > 0:
        drop = np.random.default_rng(aug.dropout_seed).random(x.shape) < aug.dropout
        x = np.where(drop, 0.0, x)
    return x.astype(np.float32)


@dataclass(frozen=True)
class PairedView:
    teacher: np.ndarray
    student: np.ndarray
    spatial: SpatialAug
    intensity: IntensityAug


def paired_views(image: np.ndarray, rng: np.random.Generator, size: int = 64) -> PairedView:
    """Teacher and student inputs for one unlabeled image."""
    spatial = sample_spatial(rng, size)
    intensity = sample_intensity(rng)
    teacher, _ = apply_spatial(image, None, spatial)
    return PairedView(teacher, apply_intensity(teacher, intensity), spatial, intensity)
