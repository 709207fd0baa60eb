"""End-to-end phantom experiment: run every CLI stage, then score the artifacts.

The scoring reads only files the stages wrote, so it checks the same
outputs a user of the CLI would see.  Used by the acceptance suite.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .cli import main
from .config import PipelineConfig, load_config
from .errors import CovidCTError
from .metrics import EvalReport
from .overlay import overlay_volume, red_energy_fraction
from .preprocess import resize_depth, standardize_mask
from .volume_io import mask_path_for, read_array, read_manifest, read_volume

STAGES = ("make-phantoms", "preprocess", "train-anomaly", "infer-anomaly", "train-classifier", "evaluate")


@dataclass
class ExperimentResult:
    seconds: Dict[str, float]
    validation: dict
    test: dict
    control_p99: Dict[str, float]          # held-out Control cases
    contrast: Dict[str, float]             # held-out lesioned cases
    red_energy: Dict[str, float]           # held-out lesioned cases
    denoiser_val_mse: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.seconds.values()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_seconds"] = self.total_seconds
        return d


def run_stages(work_dir, argv: Sequence[str] = (), stages: Sequence[str] = STAGES) -> Dict[str, float]:
    """Run CLI stages in order; returns wall time per stage.  Raises on a nonzero exit."""
    seconds = {}
    for stage in stages:
        t0 = time.perf_counter()
        code = main([*argv, "--work-dir", str(work_dir), stage])
        seconds[stage] = time.perf_counter() - t0
        if code != 0:
            raise CovidCTError(f"stage {stage} exited with code {code}")
    return seconds


def lesion_contrast(infection: np.ndarray, mask: np.ndarray) -> float:
    """Mean |map| inside the lesion mask over mean |map| everywhere else."""
    a = np.abs(np.asarray(infection, dtype=np.float64))
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or mask.all():
        return float("nan")
    return float(a[mask].mean() / a[~mask].mean())


def score(cfg: PipelineConfig) -> ExperimentResult:
    """Compute the acceptance metrics from the artifacts under ``cfg.work_dir``."""
    manifest = read_manifest(cfg.manifest_path)
    held_out = [e for e in manifest if e.split in ("validation", "test")]
    reports = {}
    for split in ("validation", "test"):
        path = cfg.reports_dir / f"{split}_report.json"
        reports[split] = EvalReport.load(path).to_dict() if path.exists() else {}
    p99, contrast, red = {}, {}, {}
    for e in held_out:
        inf = read_array(cfg.infection_dir / f"{e.case_id}.json")[0]
        if e.label == "Control":
            p99[e.case_id] = float(np.percentile(np.abs(inf), 99))
            continue
        vol = read_volume(e.path)
        mask = read_array(mask_path_for(e.path))[0] > 0
        std_mask = standardize_mask(mask, vol.spacing_mm, cfg.slice_size, cfg.depth, cfg.target_spacing_mm)
        contrast[e.case_id] = lesion_contrast(inf, std_mask)
        base = resize_depth(read_array(cfg.normalized_dir / f"{e.case_id}.json")[0], cfg.depth)
        red[e.case_id] = red_energy_fraction(overlay_volume(base, inf, cfg.overlay_scale), std_mask)
    val_mse = None
    log_path = cfg.logs_dir / "denoiser.jsonl"
    if log_path.exists():
        rows = [json.loads(r) for r in log_path.read_text().splitlines() if r.strip()]
        val_mse = rows[-1].get("val_mse") if rows else None
    return ExperimentResult({}, reports["validation"], reports["test"], p99, contrast, red, val_mse)


def run_experiment(work_dir, profile: str = "test", seed: int = 0, overrides: Sequence[str] = ()) -> ExperimentResult:
    argv = ["--profile", profile, "--seed", str(seed)]
    for o in overrides:
        argv += ["--set", o]
    seconds = run_stages(work_dir, argv)
    cfg = load_config(profile=profile, seed=seed, overrides=[*overrides, "work_dir=" + json.dumps(str(Path(work_dir)))])
    result = score(cfg)
    result.seconds = seconds
    return result
