"""Red-on-grey overlays of infection maps and their JSON summary."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ValidationError

DEFAULT_SCALE = 2.0


def overlay_slice(base: np.ndarray, infection: np.ndarray, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """8-bit RGB slice: grey base, red raised by ``scale`` times the positive part of the map."""
    base = np.asarray(base, dtype=np.float64)
    infection = np.asarray(infection, dtype=np.float64)
    if base.shape != infection.shape or base.ndim != 2:
        raise ValidationError(f"base {base.shape} and map {infection.shape} must be equal 2D shapes")
    grey = np.clip(base, 0.0, 1.0)
    red = np.clip(grey + scale * np.maximum(infection, 0.0), 0.0, 1.0)
    rgb = np.stack([red, grey, grey], axis=-1)
    return np.rint(rgb * 255.0).astype(np.uint8)


def overlay_volume(base: np.ndarray, infection: np.ndarray, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Stack of RGB overlays, shape (z, h, w, 3)."""
    base = np.asarray(base)
    infection = np.asarray(infection)
    if base.shape != infection.shape or base.ndim != 3:
        raise ValidationError(f"base {base.shape} and map {infection.shape} must be equal 3D shapes")
    return np.stack([overlay_slice(b, m, scale) for b, m in zip(base, infection)])


def red_energy_fraction(rgb: np.ndarray, mask: np.ndarray) -> float:
    """Share of the squared red excess (R - G) that falls inside ``mask``."""
    excess = rgb[..., 0].astype(np.float64) - rgb[..., 1].astype(np.float64)
    energy = excess**2
    total = energy.sum()
    if total == 0:
        return float("nan")
    return float(energy[np.asarray(mask, dtype=bool)].sum() / total)


def write_overlays(base: np.ndarray, infection: np.ndarray, out_dir, case_id: str,
                   predicted: Optional[str] = None, scale: float = DEFAULT_SCALE) -> Path:
    """Write ``slice_###.png`` for every slice plus ``summary.json``; returns the summary path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rgb = overlay_volume(base, infection, scale)
    for i, img in enumerate(rgb):
        Image.fromarray(img).save(out_dir / f"slice_{i:03d}.png")
    summary = {
        "case": case_id,
        "per_slice_mean_abs": [float(v) for v in np.abs(np.asarray(infection, np.float64)).mean(axis=(1, 2))],
        "predicted_class": predicted,
        "scale": scale,
    }
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2) + "\n")
    return path
