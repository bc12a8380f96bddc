"""Deterministic CT volume preprocessing.

Pipeline: raw grid -> Hounsfield units (affine rescale + clip) -> resample to
uniform spacing (trilinear, node-centered) -> center crop / pad to the target
shape -> normalize to [-1, 1]. Every step is pure per volume.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .errors import VolumeError

HU_MIN = -1000.0
HU_MAX = 200.0
PAD_VALUE_HU = -1000.0  # air

UNIT_RAW = "raw"
UNIT_HOUNSFIELD = "hounsfield"
UNIT_NORMALIZED = "normalized"
_UNITS = (UNIT_RAW, UNIT_HOUNSFIELD, UNIT_NORMALIZED)


@dataclass
class VolumeGrid:
    """3D scalar grid in (x, y, z) order with physical spacing metadata."""

    data: np.ndarray
    spacing_mm: Tuple[float, float, float]
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    unit: str = UNIT_RAW

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise VolumeError(f"spacing components must be > 0, got {self.spacing_mm}")
        if self.unit not in _UNITS:
            raise VolumeError(f"unit must be one of {_UNITS}, got {self.unit!r}")
        if self.unit == UNIT_NORMALIZED:
            _check_range(self.data, -1.0, 1.0, "normalized")
        elif self.unit == UNIT_HOUNSFIELD:
            _check_range(self.data, HU_MIN, HU_MAX, "hounsfield")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def extent_mm(self) -> Tuple[float, float, float]:
        """Node-centered physical extent per axis."""
        return tuple((n - 1) * s for n, s in zip(self.data.shape, self.spacing_mm))


def _check_range(data: np.ndarray, lo: float, hi: float, unit: str, tol: float = 1e-6):
    if data.size == 0:
        return
    vmin, vmax = float(data.min()), float(data.max())
    if vmin < lo - tol or vmax > hi + tol:
        raise VolumeError(
            f"{unit} volume has values outside [{lo}, {hi}]: min={vmin}, max={vmax}"
        )


@dataclass(frozen=True)
class TargetGeometry:
    """Common grid every volume is brought to before encoding."""

    spacing_mm: Tuple[float, float, float] = (0.75, 0.75, 1.5)
    shape: Tuple[int, int, int] = (480, 480, 240)

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing_mm):
            raise VolumeError(f"target spacing must be > 0, got {self.spacing_mm}")
        if any(n <= 0 for n in self.shape):
            raise VolumeError(f"target shape must be positive, got {self.shape}")

    def check_patchable(self, patch_xyz: Tuple[int, int, int]) -> None:
        for axis, (n, p) in enumerate(zip(self.shape, patch_xyz)):
            if n % p != 0:
                raise VolumeError(
                    f"target shape {self.shape} not divisible by patch {patch_xyz} "
                    f"on axis {'xyz'[axis]}"
                )


def to_hounsfield(volume: VolumeGrid) -> VolumeGrid:
    """Affine rescale (slope * value + intercept) then clip to [-1000, 200]."""
    if volume.unit != UNIT_RAW:
        raise VolumeError(f"to_hounsfield expects unit=raw, got {volume.unit}")
    if volume.rescale_slope == 0:
        raise VolumeError("rescale slope is 0 (degenerate calibration)")
    hu = volume.data.astype(np.float32) * np.float32(volume.rescale_slope)
    hu += np.float32(volume.rescale_intercept)
    np.clip(hu, HU_MIN, HU_MAX, out=hu)
    return replace(volume, data=hu, unit=UNIT_HOUNSFIELD)


def _resample_axis(data: np.ndarray, axis: int, src: float, dst: float) -> np.ndarray:
    """Linear interpolation along one axis, node-centered with edge clamping."""
    n = data.shape[axis]
    if src == dst or n == 1:
        return data
    extent = (n - 1) * src
    m = int(round(extent / dst)) + 1
    pos = np.arange(m, dtype=np.float64) * (dst / src)
    idx0 = np.clip(np.floor(pos).astype(np.int64), 0, n - 1)
    idx1 = np.minimum(idx0 + 1, n - 1)
    frac = np.clip(pos - idx0, 0.0, 1.0).astype(data.dtype)
    shape = [1, 1, 1]
    shape[axis] = m
    frac = frac.reshape(shape)
    lo = np.take(data, idx0, axis=axis)
    hi = np.take(data, idx1, axis=axis)
    return lo * (1 - frac) + hi * frac


def resample(volume: VolumeGrid, target: TargetGeometry) -> VolumeGrid:
    """Trilinear resampling onto the target spacing.

    Node-centered convention: voxel i sits at i * spacing, so physical extent
    is preserved to within one voxel per axis and equal spacings pass the data
    through unchanged.
    """
    if volume.unit != UNIT_HOUNSFIELD:
        raise VolumeError(f"resample expects unit=hounsfield, got {volume.unit}")
    data = volume.data
    for axis in range(3):
        data = _resample_axis(data, axis, volume.spacing_mm[axis], target.spacing_mm[axis])
    if data is not volume.data:
        # interpolation of in-range values is in-range; clamp float residue
        data = np.clip(data, HU_MIN, HU_MAX)
    return replace(volume, data=data, spacing_mm=target.spacing_mm)


def crop_or_pad(volume: VolumeGrid, target: TargetGeometry) -> VolumeGrid:
    """Center crop or pad (with air, -1000 HU) to exactly the target shape.

    Odd excess puts the extra voxel on the high-index side, for both crop and
    pad, so the operation is deterministic and idempotent.
    """
    if volume.unit != UNIT_HOUNSFIELD:
        raise VolumeError(f"crop_or_pad expects unit=hounsfield, got {volume.unit}")
    for axis in range(3):
        if abs(volume.spacing_mm[axis] - target.spacing_mm[axis]) > 1e-9:
            raise VolumeError(
                f"crop_or_pad expects spacing {target.spacing_mm}, got {volume.spacing_mm}"
            )
    data = volume.data
    slices = []
    pads = []
    for axis in range(3):
        n = data.shape[axis]
        t = target.shape[axis]
        if n > t:
            excess = n - t
            lo = excess // 2
            slices.append(slice(lo, lo + t))
            pads.append((0, 0))
        else:
            deficit = t - n
            lo = deficit // 2
            slices.append(slice(None))
            pads.append((lo, deficit - lo))
    data = data[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="constant", constant_values=PAD_VALUE_HU)
    return replace(volume, data=data)


def normalize(volume: VolumeGrid) -> VolumeGrid:
    """Affinely map the clipped HU range [-1000, 200] onto [-1, 1]."""
    if volume.unit != UNIT_HOUNSFIELD:
        raise VolumeError(f"normalize expects unit=hounsfield, got {volume.unit}")
    _check_range(volume.data, HU_MIN, HU_MAX, "hounsfield")
    data = (volume.data.astype(np.float32) + np.float32(400.0)) / np.float32(600.0)
    return replace(volume, data=data, unit=UNIT_NORMALIZED)


def denormalize(volume: VolumeGrid) -> VolumeGrid:
    if volume.unit != UNIT_NORMALIZED:
        raise VolumeError(f"denormalize expects unit=normalized, got {volume.unit}")
    data = volume.data.astype(np.float32) * np.float32(600.0) - np.float32(400.0)
    np.clip(data, HU_MIN, HU_MAX, out=data)
    return replace(volume, data=data, unit=UNIT_HOUNSFIELD)


def preprocess(volume: VolumeGrid, target: TargetGeometry) -> VolumeGrid:
    """Full pipeline: to_hounsfield -> resample -> crop_or_pad -> normalize.

    Accepts raw or already-converted Hounsfield input.
    """
    if volume.unit == UNIT_RAW:
        volume = to_hounsfield(volume)
    if volume.unit == UNIT_NORMALIZED:
        raise VolumeError("preprocess expects raw or hounsfield input")
    volume = resample(volume, target)
    volume = crop_or_pad(volume, target)
    return normalize(volume)
