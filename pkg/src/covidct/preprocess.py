"""Deterministic CT preprocessing: isotropic resampling, HU windowing, resizing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume_io import CtVolume

log = logging.getLogger(__name__)

HU_WINDOW = (-1000.0, 400.0)
INPLANE_SIZE = 240
STANDARD_DEPTH = 50


@dataclass
class NormalizedStack:
    """Preprocessed slices in [0, 1], shape (z, size, size)."""

    slices: np.ndarray
    case_id: str
    original_slice_count: int

    def __post_init__(self):
        s = np.asarray(self.slices, dtype=np.float32)
        if s.ndim != 3 or s.shape[0] < 1 or s.shape[1] != s.shape[2]:
            raise ValidationError(f"stack must be (z, n, n) with z >= 1, got {s.shape}")
        if not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
            raise ValidationError("stack values must be finite and within [0, 1]")
        self.slices = s


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def _interp_axis(a: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``a`` along ``axis`` at fractional ``coords``.

    Coordinates are clamped to the valid index range.  Integer coordinates
    return the source samples exactly.
    """
    n = a.shape[axis]
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = coords - i0
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    # exact on integer coordinates: (1 - 0) * lo + 0 * hi == lo
    return lo * (1.0 - w) + hi * w


def _aligned_coords(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned sample positions: first and last samples coincide."""
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resampled_shape(shape, spacing, target_spacing):
    return tuple(max(1, round_half_away(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing))


def resample_grid(grid: np.ndarray, spacing_mm, target_spacing_mm=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Trilinear resampling of a (z, y, x) grid from ``spacing_mm`` to ``target_spacing_mm``.

    Output voxel ``i`` sits at physical offset ``i * target`` from the first
    input voxel centre, so matching spacings reproduce the input exactly.
    Positions past the last input voxel take the edge value.
    """
    target = tuple(float(t) for t in target_spacing_mm)
    if len(target) != 3 or not all(math.isfinite(t) and t > 0 for t in target):
        raise ValidationError(f"target spacing must be 3 finite positive numbers, got {target_spacing_mm}")
    spacing = tuple(float(s) for s in spacing_mm)
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing must be 3 finite positive numbers, got {spacing_mm}")
    out = np.asarray(grid, dtype=np.float64)
    out_shape = resampled_shape(out.shape, spacing, target)
    for axis, (n_out, s, t) in enumerate(zip(out_shape, spacing, target)):
        if s == t:
            continue
        out = _interp_axis(out, axis, np.arange(n_out, dtype=np.float64) * (t / s))
    return out


def resample_isomorphic(v: CtVolume, target_spacing_mm=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Resample a CT volume to isotropic voxels; returns a float64 HU grid."""
    return resample_grid(v.voxels, v.spacing_mm, target_spacing_mm)


def hu_window_normalize(hu) -> np.ndarray:
    """Clamp to the [-1000, 400] HU lung window and rescale to [0, 1]."""
    hu = np.asarray(hu, dtype=np.float64)
    if not np.all(np.isfinite(hu)):
        raise ValidationError("HU values must be finite")
    lo, hi = HU_WINDOW
    return (np.clip(hu, lo, hi) - lo) / (hi - lo)


def resize_inplane(stack: np.ndarray, size: int = INPLANE_SIZE) -> np.ndarray:
    """Bilinear per-slice resize of a (z, h, w) stack to (z, size, size)."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1] < 2 or stack.shape[2] < 2:
        raise ValidationError(f"expected (z, h, w) with h, w >= 2, got {stack.shape}")
    out = stack
    for axis in (1, 2):
        if out.shape[axis] != size:
            out = _interp_axis(out, axis, _aligned_coords(out.shape[axis], size))
    return out


def resize_depth(stack: np.ndarray, depth: int = STANDARD_DEPTH) -> np.ndarray:
    """Linear interpolation along z to exactly ``depth`` slices, endpoints kept."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ValidationError(f"expected a (z, h, w) stack, got {stack.shape}")
    if stack.shape[0] == 1:
        log.warning("single-slice input replicated to %d slices", depth)
        return np.repeat(stack, depth, axis=0)
    if stack.shape[0] == depth:
        return stack.copy()
    return _interp_axis(stack, 0, _aligned_coords(stack.shape[0], depth))


def preprocess_case(v: CtVolume, size: int = INPLANE_SIZE, target_spacing_mm=(1.0, 1.0, 1.0)) -> NormalizedStack:
    """Resample, window and resize one CT volume."""
    iso = resample_isomorphic(v, target_spacing_mm)
    norm = hu_window_normalize(iso)
    resized = np.clip(resize_inplane(norm, size), 0.0, 1.0)
    return NormalizedStack(resized.astype(np.float32), v.case_id, v.shape[0])


def standardize_mask(mask: np.ndarray, spacing_mm, size: int = INPLANE_SIZE, depth: int = STANDARD_DEPTH,
                     target_spacing_mm=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Carry a binary mask through the same geometry as preprocessing + depth resize."""
    frac = resample_grid(np.asarray(mask, dtype=np.float64), spacing_mm, target_spacing_mm)
    frac = resize_depth(resize_inplane(frac, size), depth)
    return frac >= 0.5
