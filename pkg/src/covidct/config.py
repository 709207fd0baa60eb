"""Pipeline configuration: profiles, JSON files and dotted-path overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .anomaly_net import DenoiserConfig
from .classifier import ClassifierConfig
from .errors import ValidationError
from .noise import PerlinParams, derive_seed
from .phantom import PhantomSpec

PROFILES = ("full", "test")


def _profile_defaults(profile: str) -> dict:
    """Documented default shapes and training settings for each profile."""
    if profile == "full":
        return dict(
            slice_size=240,
            depth=50,
            phantom=PhantomSpec(shape=(24, 128, 128), spacing_mm=(2.5, 2.0, 2.0)),
            denoiser=DenoiserConfig(),
            classifier=ClassifierConfig(init_active_fraction=1e-3),
            perlin=PerlinParams(amplitude=1.0),
        )
    if profile == "test":
        # 16 x 64 x 64 voxels at (2.0, 1.6, 1.6) mm resample to 32 x 102 x 102 and resize to 96 x 96
        return dict(
            slice_size=96,
            depth=32,
            phantom=PhantomSpec(shape=(16, 64, 64), spacing_mm=(2.0, 1.6, 1.6)),
            denoiser=DenoiserConfig(input_size=96, base_channels=8, learning_rate=2e-3, batch_size=4, epochs=6),
            classifier=ClassifierConfig(input_shape=(32, 96, 96), channels=(4, 8), learning_rate=3e-3, epochs=30,
                                        init_active_fraction=1e-3),
            perlin=PerlinParams(cell_size_px=10, amplitude=1.0),
        )
    raise ValidationError(f"profile must be one of {PROFILES}, got {profile!r}")


@dataclass
class PipelineConfig:
    profile: str = "test"
    work_dir: str = "covidct_work"
    data_root: Optional[str] = None          # default: <work_dir>/data
    denoiser_weights: Optional[str] = None   # default: <work_dir>/weights/denoiser.zip
    classifier_weights: Optional[str] = None  # default: <work_dir>/weights/classifier.zip
    seed: int = 0
    split_seed: Optional[int] = None         # default: derived from the phantom master seed
    slice_size: int = 240
    depth: int = 50
    target_spacing_mm: tuple = (1.0, 1.0, 1.0)
    overlay_scale: float = 2.0
    jobs: int = 1
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    perlin: PerlinParams = field(default_factory=PerlinParams)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValidationError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        if self.denoiser.input_size != self.slice_size:
            raise ValidationError(f"denoiser.input_size {self.denoiser.input_size} != slice_size {self.slice_size}")
        if self.classifier.input_shape != (self.depth, self.slice_size, self.slice_size):
            raise ValidationError(f"classifier.input_shape {self.classifier.input_shape} must be "
                                  f"({self.depth}, {self.slice_size}, {self.slice_size})")
        if self.perlin.cell_size_px > self.slice_size:
            raise ValidationError("perlin.cell_size_px exceeds the slice size")
        self.target_spacing_mm = tuple(float(t) for t in self.target_spacing_mm)

    # --- derived paths -------------------------------------------------
    @property
    def work(self) -> Path:
        return Path(self.work_dir)

    @property
    def data_dir(self) -> Path:
        return Path(self.data_root) if self.data_root else self.work / "data"

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.json"

    @property
    def normalized_dir(self) -> Path:
        return self.work / "normalized"

    @property
    def infection_dir(self) -> Path:
        return self.work / "infection"

    @property
    def reports_dir(self) -> Path:
        return self.work / "reports"

    @property
    def overlays_dir(self) -> Path:
        return self.work / "overlays"

    @property
    def logs_dir(self) -> Path:
        return self.work / "logs"

    @property
    def denoiser_path(self) -> Path:
        return Path(self.denoiser_weights) if self.denoiser_weights else self.work / "weights" / "denoiser.zip"

    @property
    def classifier_path(self) -> Path:
        return Path(self.classifier_weights) if self.classifier_weights else self.work / "weights" / "classifier.zip"

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"phantom": PhantomSpec, "denoiser": DenoiserConfig, "classifier": ClassifierConfig,
             "perlin": PerlinParams}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(tree: dict, path: str, value: Any) -> None:
    keys = path.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ValidationError(f"unknown config section {k!r} in {path!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ValidationError(f"unknown config field {path!r}")
    node[keys[-1]] = value


def _tuplify(cls, values: dict) -> dict:
    """JSON has no tuples; restore them wherever the dataclass default is one."""
    out = dict(values)
    for f in fields(cls):
        default = f.default_factory() if callable(f.default_factory) else f.default
        if isinstance(default, tuple) and isinstance(out.get(f.name), list):
            out[f.name] = tuple(out[f.name])
    return out


def _build(tree: dict) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(tree) - known
    if unknown:
        raise ValidationError(f"unknown config fields: {sorted(unknown)}")
    kwargs = dict(tree)
    for name, cls in _SECTIONS.items():
        section = kwargs.get(name)
        if isinstance(section, dict):
            allowed = {f.name for f in fields(cls)}
            bad = set(section) - allowed
            if bad:
                raise ValidationError(f"unknown {name} fields: {sorted(bad)}")
            try:
                kwargs[name] = cls(**_tuplify(cls, section))
            except TypeError as exc:
                raise ValidationError(f"bad {name} section: {exc}") from exc
    try:
        return PipelineConfig(**_tuplify(PipelineConfig, kwargs))
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, profile: Optional[str] = None, seed: Optional[int] = None,
                overrides=(), jobs: Optional[int] = None) -> PipelineConfig:
    """Resolve a config: profile defaults < JSON file < --seed < --set overrides.

    Component seeds (phantoms and splits, Perlin noise, both networks) are
    derived from the top-level ``seed``.  Seeds spelled out in the file are
    kept unless ``seed`` is passed explicitly.
    """
    file_tree = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file {p} does not exist")
        try:
            file_tree = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(file_tree, dict):
            raise ValidationError("config file must hold a JSON object")
    prof = profile or file_tree.get("profile", "test")
    tree = asdict(PipelineConfig(profile=prof, **_profile_defaults(prof)))
    tree = _merge(tree, file_tree)
    tree["profile"] = prof
    if seed is not None:
        tree["seed"] = int(seed)
    s = int(tree["seed"])
    derived = {("phantom", "master_seed"): s,
               ("denoiser", "seed"): derive_seed(s, 1) & 0x7FFFFFFFFFFFFFFF,
               ("classifier", "seed"): derive_seed(s, 2) & 0x7FFFFFFFFFFFFFFF,
               ("perlin", "seed"): derive_seed(s, 3)}
    for (section, key), value in derived.items():
        # component seeds written in the file win unless --seed was given
        if seed is not None or key not in file_tree.get(section, {}):
            tree[section][key] = value
    if jobs is not None:
        tree["jobs"] = jobs
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like dotted.path=value")
        key, value = item.split("=", 1)
        _set_dotted(tree, key.strip(), _parse_value(value))
    return _build(tree)


def save_config(cfg: PipelineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
