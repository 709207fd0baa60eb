"""Gradient-lattice (Perlin) noise and pseudo-infection synthesis."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError

_MASK64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """splitmix64 finaliser on a Python int."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(*parts: int) -> int:
    h = 0
    for p in parts:
        h = mix64(h ^ (int(p) & _MASK64))
    return h


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@dataclass(frozen=True)
class PerlinParams:
    cell_size_px: float = 24
    octaves: int = 3
    persistence: float = 0.5
    amplitude: float = 0.35
    seed: int = 0
    # pseudo-infection ellipses are centred on a pixel whose normalized value
    # lies in this range (aerated lung); None centres them anywhere in the
    # middle 60% of the slice
    anchor_range: Optional[Tuple[float, float]] = (0.1, 0.45)

    def __post_init__(self):
        if not self.cell_size_px >= 2:
            raise ValidationError(f"cell_size_px must be >= 2, got {self.cell_size_px}")
        if not 1 <= int(self.octaves) <= 8:
            raise ValidationError(f"octaves must be in [1, 8], got {self.octaves}")
        if not 0 < self.persistence <= 1:
            raise ValidationError(f"persistence must be in (0, 1], got {self.persistence}")
        if not 0 <= self.seed <= _MASK64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.anchor_range is not None:
            lo, hi = self.anchor_range
            if not 0.0 <= lo < hi <= 1.0:
                raise ValidationError(f"anchor_range must satisfy 0 <= lo < hi <= 1, got {self.anchor_range}")
            object.__setattr__(self, "anchor_range", (float(lo), float(hi)))


def _gradients(seed: int, ix: np.ndarray, iy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    with np.errstate(over="ignore"):
        h = _mix64_array(ix.astype(np.int64).astype(np.uint64) * np.uint64(0x8CB92BA72F3D8DD7))
        h = _mix64_array(h ^ (iy.astype(np.int64).astype(np.uint64) * np.uint64(0xD6E8FEB86659FD93)))
        h = _mix64_array(h ^ np.uint64(seed))
    angle = (h >> np.uint64(11)).astype(np.float64) * (2.0 * np.pi / 2.0**53)
    return np.cos(angle), np.sin(angle)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_base(y: np.ndarray, x: np.ndarray, seed: int) -> np.ndarray:
    """Single-octave unit-gradient noise at lattice-unit coordinates (y, x)."""
    y0 = np.floor(y)
    x0 = np.floor(x)
    fy = y - y0
    fx = x - x0
    iy = y0.astype(np.int64)
    ix = x0.astype(np.int64)

    def corner(dy, dx):
        gx, gy = _gradients(seed, ix + dx, iy + dy)
        return gx * (fx - dx) + gy * (fy - dy)

    u = _fade(fx)
    v = _fade(fy)
    n00, n01 = corner(0, 0), corner(0, 1)
    n10, n11 = corner(1, 0), corner(1, 1)
    top = n00 + u * (n01 - n00)
    bottom = n10 + u * (n11 - n10)
    return top + v * (bottom - top)


def perlin_field(height: int, width: int, p: PerlinParams) -> np.ndarray:
    """Fractal noise sampled at integer pixel positions, lattice every ``cell_size_px``."""
    if height < p.cell_size_px or width < p.cell_size_px:
        raise ValidationError(f"field {height}x{width} smaller than one cell ({p.cell_size_px} px)")
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    out = np.zeros((height, width))
    for k in range(int(p.octaves)):
        # scale before dividing so lattice pixels map to exact integers
        scale = 2.0**k
        y = yy * scale / p.cell_size_px
        x = xx * scale / p.cell_size_px
        out += p.persistence**k * perlin_base(y, x, derive_seed(p.seed, k))
    return out * p.amplitude


def _ellipse_region(shape, rng: np.random.Generator, area_range=(0.05, 0.20), anchors=None) -> np.ndarray:
    """Boolean ellipse covering ``area_range`` of the slice (less if it crosses the border).

    ``anchors`` is an optional boolean image of allowed centre pixels.
    """
    h, w = shape
    area = rng.uniform(*area_range) * h * w
    aspect = rng.uniform(0.5, 2.0)
    a = np.sqrt(area * aspect / np.pi)  # semi-axis along x
    b = area / (np.pi * a)
    theta = rng.uniform(0.0, np.pi)
    candidates = np.flatnonzero(anchors) if anchors is not None else np.empty(0, dtype=np.intp)
    if candidates.size:
        cy, cx = divmod(int(candidates[rng.integers(candidates.size)]), w)
    else:
        cy = rng.uniform(0.2, 0.8) * (h - 1)
        cx = rng.uniform(0.2, 0.8) * (w - 1)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def pseudo_infect(slice_: np.ndarray, p: PerlinParams, region_seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Add rectified Perlin noise inside a random ellipse.

    Returns ``(noisy, applied)`` with ``noisy == clip(slice_ + applied, 0, 1)``
    and ``applied >= 0``.
    """
    if not p.amplitude > 0:
        raise ValidationError(f"amplitude must be > 0, got {p.amplitude}")
    slice_ = np.asarray(slice_, dtype=np.float32)
    if slice_.ndim != 2:
        raise ValidationError(f"expected a 2D slice, got shape {slice_.shape}")
    rng = np.random.default_rng(region_seed)
    anchors = None
    if p.anchor_range is not None:
        anchors = (slice_ >= p.anchor_range[0]) & (slice_ <= p.anchor_range[1])
    region = _ellipse_region(slice_.shape, rng, anchors=anchors)
    noise = perlin_field(*slice_.shape, replace(p, seed=derive_seed(p.seed, region_seed)))
    applied = np.where(region, np.maximum(noise, 0.0), 0.0).astype(np.float32)
    noisy = np.clip(slice_ + applied, 0.0, 1.0)
    return noisy, applied


def split_noisy_clean(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Shuffle ``n`` slice indices; returns (clean, noisy) with the odd one out noisy."""
    if n < 1:
        raise ValidationError("need at least one slice")
    order = np.random.default_rng(seed).permutation(n)
    n_clean = n // 2
    return order[:n_clean], order[n_clean:]


def build_denoiser_dataset(control_stacks: Sequence, p: PerlinParams, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mix clean and pseudo-infected control slices.

    ``inputs`` holds the clean half followed by the noised half; ``targets``
    always holds the original clean slice for the same position.
    """
    slices: List[np.ndarray] = []
    for st in control_stacks:
        arr = getattr(st, "slices", st)
        slices.extend(np.asarray(arr, dtype=np.float32))
    if not slices:
        raise ValidationError("no control slices supplied")
    clean_idx, noisy_idx = split_noisy_clean(len(slices), seed)
    order = np.concatenate([clean_idx, noisy_idx])
    targets = np.stack([slices[i] for i in order])
    inputs = targets.copy()
    for j in range(len(clean_idx), len(order)):
        inputs[j], _ = pseudo_infect(targets[j], p, derive_seed(seed, int(order[j])))
    return inputs, targets
