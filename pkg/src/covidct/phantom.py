"""Synthetic chest CT phantoms with ground-truth lesion masks.

Geometry is a soft-tissue torso ellipse with a rib shell and two textured
lung ellipsoids.  CAP-like cases get a few compact dense blobs in one lung,
Covid-like cases get peripheral ground-glass patches in both lungs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import ValidationError
from .metrics import assign_test, split_dataset
from .noise import PerlinParams, derive_seed, perlin_field
from .volume_io import (
    HU_MAX,
    HU_MIN,
    LABELS,
    CtVolume,
    DatasetManifest,
    ManifestEntry,
    write_array,
    write_manifest,
    write_volume,
)

log = logging.getLogger(__name__)

MIN_SHAPE = (16, 64, 64)
AIR_HU = -1000


@dataclass
class PhantomSpec:
    counts: Tuple[int, int, int] = (30, 30, 30)  # Control, CAP, Covid
    shape: Tuple[int, int, int] = (24, 128, 128)
    spacing_mm: Tuple[float, float, float] = (2.5, 2.0, 2.0)
    n_test: int = 9
    train_fraction: float = 0.9
    cap_blobs: Tuple[int, int] = (1, 3)
    covid_patches: Tuple[int, int] = (3, 8)
    lung_hu: Tuple[float, float] = (-700.0, -600.0)
    soft_tissue_hu: Tuple[float, float] = (100.0, 300.0)
    bone_hu: Tuple[float, float] = (300.0, 1900.0)
    cap_hu: Tuple[float, float] = (-100.0, 100.0)
    covid_hu: Tuple[float, float] = (-500.0, -300.0)
    texture_hu: float = 50.0
    texture_cell_px: int = 8
    master_seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.counts) != 3 or min(self.counts) < 0:
            raise ValidationError(f"counts must be three non-negative integers, got {self.counts}")
        if any(n < m for n, m in zip(self.shape, MIN_SHAPE)):
            raise ValidationError(f"phantom shape must be at least {MIN_SHAPE}, got {self.shape}")
        for name in ("lung_hu", "soft_tissue_hu", "bone_hu", "cap_hu", "covid_hu"):
            lo, hi = getattr(self, name)
            if not HU_MIN <= lo <= hi <= HU_MAX:
                raise ValidationError(f"{name} must be an ordered range within [{HU_MIN}, {HU_MAX}]")
        if not 0 <= self.n_test <= sum(self.counts):
            raise ValidationError("n_test exceeds the number of cases")

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LesionMask:
    mask: np.ndarray
    lesion_class: Optional[str] = None  # "CAP-like", "Covid-like" or None for controls

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class _Anatomy:
    torso_r: np.ndarray          # normalised elliptic radius of the torso
    lung_r: list                 # per-lung normalised ellipsoid radius (left, right)
    lungs: list                  # per-lung boolean masks
    coords: Tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False, default=None)


def _texture(shape, cell, amplitude, seed):
    """Smooth-in-z noise: two in-plane Perlin fields blended linearly along z."""
    z, y, x = shape
    cell = min(cell, y, x)
    a = perlin_field(y, x, PerlinParams(cell_size_px=cell, octaves=2, amplitude=1.0, seed=derive_seed(seed, 1)))
    b = perlin_field(y, x, PerlinParams(cell_size_px=cell, octaves=2, amplitude=1.0, seed=derive_seed(seed, 2)))
    w = np.linspace(0.0, 1.0, z)[:, None, None]
    t = (1.0 - w) * a[None] + w * b[None]
    # perlin_field with 2 octaves peaks near 1.06; rescale and clamp to +-1
    return amplitude * np.clip(t / 0.75, -1.0, 1.0)


def _anatomy(shape, spacing):
    z, y, x = shape
    sz, sy, sx = spacing
    zz = (np.arange(z) - (z - 1) / 2.0)[:, None, None] * sz
    yy = (np.arange(y) - (y - 1) / 2.0)[None, :, None] * sy
    xx = (np.arange(x) - (x - 1) / 2.0)[None, None, :] * sx
    ez, ey, ex = z * sz / 2.0, y * sy / 2.0, x * sx / 2.0
    torso_r = np.sqrt((xx / (0.88 * ex)) ** 2 + (yy / (0.70 * ey)) ** 2)
    torso_r = np.broadcast_to(torso_r, shape)
    lung_r, lungs = [], []
    for side in (-1.0, 1.0):
        r = np.sqrt(((xx - side * 0.38 * ex) / (0.27 * ex)) ** 2
                    + ((yy + 0.02 * ey) / (0.46 * ey)) ** 2
                    + (zz / (0.92 * ez)) ** 2)
        lung_r.append(r)
        lungs.append((r <= 1.0) & (torso_r < 0.80))
    return _Anatomy(torso_r, lung_r, lungs, (zz, yy, xx))


def _sphere(coords, center_idx, radius_mm, spacing, shape):
    zz, yy, xx = coords
    z, y, x = shape
    cz = (center_idx[0] - (z - 1) / 2.0) * spacing[0]
    cy = (center_idx[1] - (y - 1) / 2.0) * spacing[1]
    cx = (center_idx[2] - (x - 1) / 2.0) * spacing[2]
    return ((zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2) <= radius_mm**2


def _choose_voxel(candidates: np.ndarray, rng: np.random.Generator):
    idx = np.argwhere(candidates)
    if len(idx) == 0:
        return None
    return tuple(idx[rng.integers(len(idx))])


def generate_phantom(label: str, shape=(24, 128, 128), spacing=(2.5, 2.0, 2.0), seed: int = 0,
                     spec: Optional[PhantomSpec] = None, case_id: Optional[str] = None):
    """Build one phantom; returns ``(CtVolume, LesionMask)``. Deterministic in ``seed``."""
    if label not in LABELS:
        raise ValidationError(f"label must be one of {LABELS}, got {label!r}")
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or any(n < m for n, m in zip(shape, MIN_SHAPE)):
        raise ValidationError(f"phantom shape must be at least {MIN_SHAPE}, got {shape}")
    spacing = tuple(float(s) for s in spacing)
    spec = spec or PhantomSpec(shape=shape, spacing_mm=spacing)
    rng = np.random.default_rng(derive_seed(seed, 0xC7))
    anat = _anatomy(shape, spacing)

    hu = np.full(shape, float(AIR_HU))
    torso = anat.torso_r <= 1.0
    hu[torso] = rng.uniform(*spec.soft_tissue_hu)

    # rib shell: periodic arcs in the outer band of the torso, varying with z
    zz, yy, xx = anat.coords
    theta = np.arctan2(yy, xx)
    phase = rng.uniform(0, 2 * np.pi)
    ribs = (anat.torso_r > 0.86) & torso & (np.cos(9 * theta + phase + 0.6 * zz / spacing[0]) > -0.1)
    hu[ribs] = rng.uniform(max(spec.bone_hu[0], 500.0), min(spec.bone_hu[1], 1200.0))

    tex = _texture(shape, spec.texture_cell_px, spec.texture_hu, derive_seed(seed, 0x7E))
    for lung in anat.lungs:
        hu[lung] = rng.uniform(*spec.lung_hu) + tex[lung]

    mask = np.zeros(shape, dtype=bool)
    lesion_class = None
    if label == "CAP":
        lesion_class = "CAP-like"
        side = int(rng.integers(2))
        lung, r = anat.lungs[side], anat.lung_r[side]
        n_blobs = int(rng.integers(spec.cap_blobs[0], spec.cap_blobs[1] + 1))
        semi_x = 0.27 * shape[2] * spacing[2] / 2.0
        placed = 0
        while placed < n_blobs:
            c = _choose_voxel(lung & (r < 0.6), rng)
            if c is None:
                raise ValidationError(f"phantom shape {shape} leaves no room for lesions")
            blob = _sphere(anat.coords, c, rng.uniform(0.30, 0.45) * semi_x, spacing, shape) & lung & ~mask
            if not blob.any():
                continue
            level = rng.uniform(spec.cap_hu[0] + 20.0, spec.cap_hu[1] - 20.0)
            hu[blob] = level + 0.4 * tex[blob]
            mask |= blob
            placed += 1
    elif label == "Covid":
        lesion_class = "Covid-like"
        n_patches = int(rng.integers(spec.covid_patches[0], spec.covid_patches[1] + 1))
        sides = [0, 1] + [int(rng.integers(2)) for _ in range(n_patches - 2)]
        semi_x = 0.27 * shape[2] * spacing[2] / 2.0
        ggo = _texture(shape, spec.texture_cell_px, 1.0, derive_seed(seed, 0x66))
        lo, hi = spec.covid_hu
        placed = 0
        while placed < n_patches:
            side = sides[placed]
            lung, r = anat.lungs[side], anat.lung_r[side]
            c = _choose_voxel(lung & (r > 0.55) & (r < 0.85), rng)
            if c is None:
                raise ValidationError(f"phantom shape {shape} leaves no room for lesions")
            patch = _sphere(anat.coords, c, rng.uniform(0.40, 0.60) * semi_x, spacing, shape) & lung
            patch &= ggo > -0.6
            if not patch.any():
                continue
            hu[patch] = lo + (hi - lo) * (0.5 + 0.5 * ggo[patch])
            mask |= patch
            placed += 1

    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    vol = CtVolume(hu, spacing, case_id or f"{label.lower()}_{seed}")
    return vol, LesionMask(mask, lesion_class)


def generate_phantom_dataset(spec: PhantomSpec, out_dir, split_seed: Optional[int] = None) -> DatasetManifest:
    """Write volumes, masks and ``manifest.json`` under ``out_dir``.

    Splits: stratified held-out test set of ``spec.n_test`` cases, then a
    stratified train/validation split of the rest.  Split seeds derive from
    ``split_seed`` when given, otherwise from the master seed.
    """
    out_dir = Path(out_dir)
    entries = []
    for cls_idx, (label, count) in enumerate(zip(LABELS, spec.counts)):
        for i in range(count):
            case_id = f"{label.lower()}_{i:03d}"
            seed = derive_seed(spec.master_seed, cls_idx, i)
            vol, les = generate_phantom(label, spec.shape, spec.spacing_mm, seed, spec=spec, case_id=case_id)
            vpath = write_volume(vol, out_dir / "volumes" / f"{case_id}.json")
            write_array(out_dir / "masks" / f"{case_id}.json", les.mask.astype(np.int16),
                        case_id=case_id, spacing_mm=vol.spacing_mm, stage="mask")
            entries.append(ManifestEntry(case_id, vpath, label))
            log.info("wrote %s", case_id)
    manifest = DatasetManifest(entries)
    root = spec.master_seed if split_seed is None else split_seed
    if entries:
        manifest = assign_test(manifest, spec.n_test, seed=derive_seed(root, 0x7E57))
        if any(e.split != "test" for e in manifest):
            manifest = split_dataset(manifest, spec.train_fraction, seed=derive_seed(root, 0x5B1),
                                     require_all_classes=False)
    write_manifest(manifest, out_dir / "manifest.json")
    (out_dir / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    return manifest
