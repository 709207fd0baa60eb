"""On-disk containers: CT volumes, dataset manifests and weight archives.

Volumes are a JSON sidecar plus a raw little-endian voxel blob, row-major
with z varying slowest.  Weight archives are a directory (or a ``.zip``) that
holds ``manifest.json`` and one ``.bin`` file per tensor.
"""
from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import CorruptionError, FormatError, UnsupportedFormatError, ValidationError

HU_MIN = -1024
HU_MAX = 3071

LABELS = ("Control", "CAP", "Covid")
SPLITS = ("train", "validation", "test")
STAGES = ("raw", "mask", "normalized", "standard", "infection")

_DTYPES = {"int16": np.dtype("<i2"), "float32": np.dtype("<f4")}
_SIDECAR_FIELDS = ("case_id", "shape", "spacing_mm", "dtype", "voxel_file")


def _check_spacing(spacing) -> Tuple[float, float, float]:
    try:
        spacing = tuple(float(s) for s in spacing)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"spacing must be three numbers, got {spacing!r}") from exc
    if len(spacing) != 3:
        raise ValidationError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing components must be finite and > 0, got {spacing}")
    return spacing


@dataclass(frozen=True)
class CtVolume:
    """Raw CT volume in Hounsfield units, indexed (z, y, x)."""

    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float]
    case_id: str

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValidationError(f"voxels must be a non-empty 3D grid, got shape {vox.shape}")
        if vox.dtype != np.int16:
            if not np.issubdtype(vox.dtype, np.integer):
                raise ValidationError(f"voxels must be integers, got {vox.dtype}")
        lo, hi = int(vox.min()), int(vox.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise ValidationError(f"HU values must lie in [{HU_MIN}, {HU_MAX}], got [{lo}, {hi}]")
        vox = np.ascontiguousarray(vox, dtype=np.int16)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def shape(self):
        return self.voxels.shape


def _sidecar_paths(path) -> Tuple[Path, str]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return path, path.with_suffix(".raw").name


def write_array(path, array: np.ndarray, *, case_id: str, spacing_mm, stage: Optional[str] = None,
                extra: Optional[dict] = None) -> Path:
    """Write a 3D array as sidecar + raw blob; returns the sidecar path.

    int16 arrays are stored as int16, everything else as float32.  ``extra``
    adds JSON-serializable keys to the sidecar without overriding core fields.
    """
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValidationError(f"expected a 3D array, got shape {array.shape}")
    dtype = "int16" if array.dtype == np.int16 else "float32"
    if stage is not None and stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}")
    sidecar, voxel_name = _sidecar_paths(path)
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "case_id": str(case_id),
        "shape": [int(n) for n in array.shape],
        "spacing_mm": list(_check_spacing(spacing_mm)),
        "dtype": dtype,
        "voxel_file": voxel_name,
    }
    if stage is not None:
        meta["stage"] = stage
    for k, v in (extra or {}).items():
        meta.setdefault(k, v)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes(order="C")
    (sidecar.parent / voxel_name).write_bytes(payload)
    sidecar.write_text(json.dumps(meta, indent=2) + "\n")
    return sidecar


def read_array(path) -> Tuple[np.ndarray, dict]:
    """Read a container written by :func:`write_array`; returns (array, sidecar dict)."""
    sidecar, _ = _sidecar_paths(path)
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{sidecar}: invalid JSON ({exc})") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{sidecar}: sidecar must be a JSON object")
    missing = [k for k in _SIDECAR_FIELDS if k not in meta]
    if missing:
        raise FormatError(f"{sidecar}: missing sidecar field(s) {missing}")
    if meta["dtype"] not in _DTYPES:
        raise UnsupportedFormatError(f"{sidecar}: unsupported dtype {meta['dtype']!r}")
    shape = tuple(int(n) for n in meta["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise FormatError(f"{sidecar}: shape must be three positive integers, got {meta['shape']}")
    meta["spacing_mm"] = list(_check_spacing(meta["spacing_mm"]))
    dtype = _DTYPES[meta["dtype"]]
    raw = (sidecar.parent / meta["voxel_file"]).read_bytes()
    expected = dtype.itemsize * int(np.prod(shape))
    if len(raw) != expected:
        raise CorruptionError(f"{sidecar}: voxel file holds {len(raw)} bytes, shape {shape} needs {expected}")
    array = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True), meta


def read_volume(path) -> CtVolume:
    array, meta = read_array(path)
    if meta["dtype"] != "int16":
        raise UnsupportedFormatError(f"{path}: CT volumes must be int16, got {meta['dtype']}")
    return CtVolume(array, tuple(meta["spacing_mm"]), str(meta["case_id"]))


def write_volume(v: CtVolume, path) -> Path:
    return write_array(path, v.voxels, case_id=v.case_id, spacing_mm=v.spacing_mm, stage=None)


def mask_path_for(volume_path) -> Path:
    """Conventional mask location: ``<root>/masks/<name>.json`` next to ``<root>/volumes``."""
    volume_path = Path(volume_path)
    return volume_path.parent.parent / "masks" / volume_path.name


# --------------------------------------------------------------------------
# Dataset manifest


@dataclass
class ManifestEntry:
    case_id: str
    path: Path
    label: str
    split: Optional[str] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        self.path = Path(self.path)


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    schema_version: int = 1

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.case_id in seen:
                raise ValidationError(f"duplicate case_id {e.case_id!r}")
            seen.add(e.case_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_split(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def by_label(self, label: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.label == label]

    def get(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise KeyError(case_id)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    rows = []
    for e in manifest.entries:
        p = Path(e.path)
        try:
            p = p.resolve().relative_to(root)
        except ValueError:
            pass
        rows.append({"case_id": e.case_id, "path": p.as_posix(), "label": e.label, "split": e.split})
    path.write_text(json.dumps(rows, indent=2) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    """Read a manifest; relative entry paths are resolved against the manifest's directory."""
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(rows, list):
        raise FormatError(f"{path}: manifest must be a JSON list")
    entries = []
    for row in rows:
        try:
            p = Path(row["path"])
            if not p.is_absolute():
                p = path.parent / p
            entries.append(ManifestEntry(str(row["case_id"]), p, row["label"], row.get("split")))
        except KeyError as exc:
            raise FormatError(f"{path}: manifest row missing field {exc}") from exc
    return DatasetManifest(entries)


# --------------------------------------------------------------------------
# Weight archives


@dataclass
class NamedTensorArchive:
    """Ordered float32 tensors plus string metadata."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {str(k): np.ascontiguousarray(v, dtype=np.float32) for k, v in self.tensors.items()}
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    def manifest(self) -> List[Tuple[str, List[int], str]]:
        return [(name, list(t.shape), "float32") for name, t in self.tensors.items()]

    def equals(self, other: "NamedTensorArchive") -> bool:
        if list(self.tensors) != list(other.tensors) or self.metadata != other.metadata:
            return False
        return all(
            self.tensors[k].shape == other.tensors[k].shape
            and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def _archive_files(archive: NamedTensorArchive) -> Dict[str, bytes]:
    files = {}
    rows = []
    for i, (name, t) in enumerate(archive.tensors.items()):
        fname = f"tensor_{i:04d}.bin"
        files[fname] = t.astype("<f4").tobytes(order="C")
        rows.append({"name": name, "shape": list(t.shape), "dtype": "float32", "file": fname})
    manifest = {"tensors": rows, "metadata": dict(archive.metadata)}
    files["manifest.json"] = (json.dumps(manifest, indent=2) + "\n").encode()
    return files


def save_weights(archive: NamedTensorArchive, path) -> Path:
    """Save to a directory, or to a zip file when ``path`` ends in ``.zip``."""
    path = Path(path)
    files = _archive_files(archive)
    if path.suffix == ".zip":
        path.parent.mkdir(parents=True, exist_ok=True)
        # fixed timestamps keep repeated saves byte-identical
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, data in files.items():
                zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)
    else:
        path.mkdir(parents=True, exist_ok=True)
        for name, data in files.items():
            (path / name).write_bytes(data)
    return path


def load_weights(path) -> NamedTensorArchive:
    path = Path(path)
    if path.suffix == ".zip":
        with zipfile.ZipFile(path) as zf:
            contents = {n: zf.read(n) for n in zf.namelist()}
        read = lambda name: contents[name]  # noqa: E731
    else:
        read = lambda name: (path / name).read_bytes()  # noqa: E731
    try:
        manifest = json.loads(read("manifest.json"))
        rows = manifest["tensors"]
    except (KeyError, FileNotFoundError) as exc:
        raise FormatError(f"{path}: missing weight manifest ({exc})") from exc
    tensors = {}
    for row in rows:
        if row.get("dtype") != "float32":
            raise UnsupportedFormatError(f"{path}: tensor {row.get('name')!r} has dtype {row.get('dtype')!r}")
        name = row["name"]
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        shape = tuple(int(n) for n in row["shape"])
        data = read(row["file"])
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if len(data) != expected:
            raise CorruptionError(f"{path}: tensor {name!r} has {len(data)} bytes, expected {expected}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    return NamedTensorArchive(tensors, manifest.get("metadata", {}))

