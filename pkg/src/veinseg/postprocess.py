"""Probability map -> cleaned vein mask -> centroid -> puncture-axis commands."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD = 0.5
DEFAULT_MM_PER_PIXEL = 0.3
DEFAULT_NEEDLE_ANGLE = 17.0
# centroid assigned to failed predictions when scoring
FAILURE_CENTROID = (0.0, 0.0)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class EmptyMaskError(ValueError):
    """Raised when a centroid is requested for a mask with no vein pixels."""


@dataclass
class VeinMask:
    mask: np.ndarray
    failed: bool
    provenance: str = "largest_component"
    stages: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_binary(cls, mask, provenance: str = "raw") -> "VeinMask":
        m = (np.asarray(mask) > 0).astype(np.uint8)
        return cls(m, not m.any(), provenance)


def disk(radius: int) -> np.ndarray:
    """Structuring element of pixels within ``radius``; radius 1 is the 3x3 cross."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def _padded(op, mask: np.ndarray, se: np.ndarray, pad: int) -> np.ndarray:
    p = np.pad(mask, pad)
    out = op(p, se)
    return out[pad:-pad, pad:-pad] if pad else out


def opening(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    if radius <= 0:
        return mask.astype(bool)
    se = disk(radius)
    return _padded(lambda m, s: ndimage.binary_dilation(ndimage.binary_erosion(m, s), s),
                   mask.astype(bool), se, 2 * radius + 1)


def closing(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    if radius <= 0:
        return mask.astype(bool)
    se = disk(radius)
    return _padded(lambda m, s: ndimage.binary_erosion(ndimage.binary_dilation(m, s), s),
                   mask.astype(bool), se, 2 * radius + 1)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the biggest 8-connected component; ties go to the first in raster order."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    if n == 0:
        return np.zeros(np.shape(mask), dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def postprocess_mask(prob_map, threshold: float = DEFAULT_THRESHOLD, open_radius: int = 1,
                     close_radius: int = 1) -> VeinMask:
    """Binarize, open, close, keep the largest component.

    An empty result is not an error: it comes back with ``failed=True``.
    """
    p = np.asarray(prob_map, dtype=np.float64)
    raw = p > threshold
    opened = opening(raw, open_radius)
    closed = closing(opened, close_radius)
    final = largest_component(closed)
    out = final.astype(np.uint8)
    return VeinMask(out, not out.any(), "largest_component",
                    {"raw": raw.astype(np.uint8), "opened": opened.astype(np.uint8),
                     "closed": closed.astype(np.uint8)})


def centroid(mask) -> Tuple[float, float]:
    """Mean (x, y) = (column, row) of the foreground pixels."""
    m = mask.mask if isinstance(mask, VeinMask) else np.asarray(mask)
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        raise EmptyMaskError("mask is empty; treat this image as a failure case")
    return float(xs.sum() / xs.size), float(ys.sum() / ys.size)


@dataclass(frozen=True)
class PunctureCommand:
    centroid: Tuple[float, float]
    depth_mm: float
    axis5_travel_mm: float
    axis6_travel_mm: float
    needle_angle_deg: float

    def tip_displacement(self) -> Tuple[float, float]:
        """(horizontal, vertical) needle-tip travel along the inclined axis."""
        th = math.radians(self.needle_angle_deg)
        return self.axis6_travel_mm * math.cos(th), self.axis6_travel_mm * math.sin(th)

    def to_dict(self) -> dict:
        return {
            "centroid": [self.centroid[0], self.centroid[1]],
            "depth_mm": self.depth_mm,
            "axis5_travel_mm": self.axis5_travel_mm,
            "axis6_travel_mm": self.axis6_travel_mm,
            "needle_angle_deg": self.needle_angle_deg,
            "failed": False,
        }


def plan_puncture(centroid_xy: Tuple[float, float], skin_row: float = 0.0,
                  mm_per_pixel: float = DEFAULT_MM_PER_PIXEL,
                  needle_angle_deg: float = DEFAULT_NEEDLE_ANGLE) -> PunctureCommand:
    """Axis travels that bring the needle tip onto the vein centroid.

    Depth below the skin row sets axis 5; axis 6 then drives the needle
    ``depth / sin(angle)`` along its inclined rail, which covers a horizontal
    distance of ``depth / tan(angle)``.
    """
    if mm_per_pixel <= 0:
        raise ValueError("mm_per_pixel must be positive")
    if not 0 < needle_angle_deg < 90:
        raise ValueError("needle angle must lie strictly between 0 and 90 degrees")
    _, yc = centroid_xy
    if yc <= skin_row:
        raise ValueError(f"centroid row {yc} is not below the skin row {skin_row}")
    depth = (yc - skin_row) * mm_per_pixel
    th = math.radians(needle_angle_deg)
    return PunctureCommand(
        centroid=(float(centroid_xy[0]), float(yc)),
        depth_mm=depth,
        axis5_travel_mm=depth / math.tan(th),
        axis6_travel_mm=depth / math.sin(th),
        needle_angle_deg=float(needle_angle_deg),
    )


def navigate(prob_map, skin_row: float = 0.0, threshold: float = DEFAULT_THRESHOLD,
             mm_per_pixel: float = DEFAULT_MM_PER_PIXEL,
             needle_angle_deg: float = DEFAULT_NEEDLE_ANGLE, open_radius: int = 1,
             close_radius: int = 1) -> dict:
    """One navigation record for a probability map, as emitted by the CLI."""
    vm = postprocess_mask(prob_map, threshold, open_radius, close_radius)
    if vm.failed:
        return {"centroid": None, "depth_mm": None, "axis5_travel_mm": None,
                "axis6_travel_mm": None, "needle_angle_deg": needle_angle_deg, "failed": True}
    c = centroid(vm)
    try:
        return plan_puncture(c, skin_row, mm_per_pixel, needle_angle_deg).to_dict()
    except ValueError as exc:
        rec = {"centroid": list(c), "depth_mm": None, "axis5_travel_mm": None,
               "axis6_travel_mm": None, "needle_angle_deg": needle_angle_deg, "failed": True,
               "error": str(exc)}
        return rec
