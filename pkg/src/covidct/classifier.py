"""3D CNN over infection volumes: Control / CAP / Covid."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import TrainingError, ValidationError
from .metrics import ClassProbs
from .nets import config_metadata, he_init_, load_archive_into, minibatches, model_to_archive
from .volume_io import LABELS, NamedTensorArchive, load_weights, save_weights

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    input_shape: Tuple[int, int, int] = (50, 240, 240)
    channels: Tuple[int, ...] = (8, 16, 32, 64)
    n_classes: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 30
    class_weights: Optional[Tuple[float, float, float]] = None  # None: inverse class frequency
    input_scale: Optional[float] = None  # None: 1 / RMS of the training volumes, fixed at training time
    init_active_fraction: Optional[float] = None  # None: zero first-layer biases
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.channels = tuple(int(c) for c in self.channels)
        if self.n_classes != 3:
            raise ValidationError("the classifier head must have exactly 3 outputs")
        if not self.channels or min(self.channels) < 1:
            raise ValidationError("channels must be a non-empty list of positive widths")
        if len(self.input_shape) != 3 or min(self.input_shape) < 2 ** len(self.channels):
            raise ValidationError(f"input_shape {self.input_shape} too small for {len(self.channels)} pooling stages")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValidationError("epochs, batch_size must be >= 1 and learning_rate >= 0")
        if self.input_scale is not None and not (np.isfinite(self.input_scale) and self.input_scale > 0):
            raise ValidationError(f"input_scale must be finite and > 0, got {self.input_scale}")
        if self.init_active_fraction is not None and not 0 < self.init_active_fraction < 1:
            raise ValidationError(f"init_active_fraction must be in (0, 1), got {self.init_active_fraction}")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != 3 or min(self.class_weights) <= 0:
                raise ValidationError("class_weights needs three positive values")


class VolumeCNN(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        layers = []
        cin = 1
        for c in cfg.channels:
            layers += [nn.Conv3d(cin, c, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool3d(2)]
            cin = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, cfg.n_classes)

    def forward(self, x):
        x = self.features(x)
        return self.head(x.mean(dim=(2, 3, 4)))


def build_classifier(cfg: ClassifierConfig) -> VolumeCNN:
    model = VolumeCNN(cfg)
    gen = torch.Generator().manual_seed(int(cfg.seed) & 0x7FFFFFFFFFFFFFFF)
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            he_init_(m, gen, gain=1.0 if m is model.head else 2.0)
    return model


@dataclass
class ClassifierWeights:
    archive: NamedTensorArchive
    config: ClassifierConfig
    history: List[dict] = field(default_factory=list)
    _model: Optional[VolumeCNN] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_model(cls, model, cfg, history=None, **meta):
        return cls(model_to_archive(model, config_metadata(cfg, "classifier", True, **meta)), cfg, list(history or []))

    def model(self) -> VolumeCNN:
        if self._model is None:
            model = load_archive_into(VolumeCNN(self.config), self.archive)
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
            self._model = model
        return self._model

    def save(self, path) -> Path:
        return save_weights(self.archive, path)

    @classmethod
    def load(cls, path) -> "ClassifierWeights":
        archive = load_weights(path)
        if archive.metadata.get("kind") != "classifier":
            raise ValidationError(f"{path} does not hold classifier weights")
        cfg = json.loads(archive.metadata["config"])
        return cls(archive, ClassifierConfig(**cfg))


def initial_weights(cfg: ClassifierConfig, volumes: Optional[Sequence[np.ndarray]] = None) -> ClassifierWeights:
    """Weights before the first optimizer step.

    Given training ``volumes``, the input scale and (if configured) the
    first-layer biases are fitted to them exactly as ``train_classifier`` does.
    """
    cfg, model = _prepare(cfg, volumes)
    return ClassifierWeights.from_model(model, cfg)


def _prepare(cfg: ClassifierConfig, volumes=None):
    if volumes is None:
        return cfg, build_classifier(cfg)
    volumes = list(volumes)
    if cfg.input_scale is None:
        cfg = replace(cfg, input_scale=rms_scale(volumes))
    model = build_classifier(cfg)
    if cfg.init_active_fraction is not None:
        fit_first_layer_bias_(model, volumes, cfg.init_active_fraction, cfg.input_scale)
    return cfg, model


@torch.no_grad()
def fit_first_layer_bias_(model: VolumeCNN, volumes: Sequence[np.ndarray], active_fraction: float,
                          scale: Optional[float] = None, max_volumes: int = 16, stride: int = 7) -> None:
    """Set each first-layer bias so its unit fires on ``active_fraction`` of the voxels.

    Subtraction maps are dominated by faint background residue, and lesions
    cover a tiny share of the volume.  With zero biases every unit mostly
    averages background and the pooled features hardly differ between
    classes.  Thresholding at a high quantile of the pre-activations starts
    each unit as a sparse detector of strong local responses instead.
    Uses at most ``max_volumes`` evenly spaced volumes and every ``stride``-th voxel.
    """
    conv = model.features[0]
    picks = np.unique(np.linspace(0, len(volumes) - 1, min(len(volumes), max_volumes)).round().astype(int))
    samples = []
    for i in picks:
        pre = nn.functional.conv3d(_batch([volumes[i]], scale), conv.weight, padding=conv.padding)
        samples.append(pre[0].reshape(conv.out_channels, -1)[:, ::stride].double().numpy())
    values = np.concatenate(samples, axis=1)
    conv.bias.copy_(torch.from_numpy(-np.quantile(values, 1.0 - active_fraction, axis=1)).to(conv.bias.dtype))


def _batch(volumes: Sequence[np.ndarray], scale: Optional[float] = None) -> torch.Tensor:
    x = np.stack([np.asarray(v, dtype=np.float32) for v in volumes])
    if scale is not None:
        x = x * np.float32(scale)
    return torch.from_numpy(x).unsqueeze(1)


def rms_scale(volumes: Sequence[np.ndarray]) -> float:
    """1 / root-mean-square over all voxels; 1.0 for all-zero input.

    Subtraction maps are mostly near zero, so without this the pooled
    features, and with them the logits, barely move during training.
    """
    total, count = 0.0, 0
    for v in volumes:
        a = np.asarray(v, dtype=np.float64)
        total += float(np.sum(a * a))
        count += a.size
    rms = np.sqrt(total / count) if count else 0.0
    return float(1.0 / rms) if rms > 0 else 1.0


def inverse_frequency_weights(labels: Sequence[int]) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=3).astype(np.float64)
    present = counts > 0
    w = np.ones(3)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def _label_indices(labels) -> np.ndarray:
    return np.array([LABELS.index(lab) if isinstance(lab, str) else int(lab) for lab in labels], dtype=np.int64)


@torch.no_grad()
def _logits(model, volumes, batch_size, scale=None) -> np.ndarray:
    out = [model(_batch(volumes[i:i + batch_size], scale)).double().numpy()
           for i in range(0, len(volumes), batch_size)]
    return np.concatenate(out)


def _check_shapes(volumes, cfg: ClassifierConfig):
    for v in volumes:
        if tuple(np.shape(v)) != cfg.input_shape:
            raise ValidationError(f"volume shape {np.shape(v)} != configured {cfg.input_shape}")


def train_classifier(volumes, labels, cfg: ClassifierConfig, val: Optional[Tuple[Sequence, Sequence]] = None,
                     log_path=None) -> ClassifierWeights:
    """Class-weighted cross-entropy with Adam.

    With validation data the weights of the epoch with the best validation
    accuracy are returned (ties: lower validation loss, then the earlier epoch).
    Inputs are multiplied by ``cfg.input_scale``; when unset it is fixed from
    the training volumes and recorded in the returned config.  The starting
    point is ``initial_weights(cfg, volumes)``.
    """
    volumes = list(volumes)
    y = _label_indices(labels)
    if not volumes or len(volumes) != len(y):
        raise ValidationError("volumes and labels must be non-empty and aligned")
    _check_shapes(volumes, cfg)
    cfg, model = _prepare(cfg, volumes)
    scale = cfg.input_scale
    weights = np.asarray(cfg.class_weights) if cfg.class_weights is not None else inverse_frequency_weights(y)
    loss_fn = nn.CrossEntropyLoss(weight=torch.tensor(weights, dtype=torch.float32))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    if val is not None:
        val_x = list(val[0])
        val_y = _label_indices(val[1])
        _check_shapes(val_x, cfg)
    history = []
    best = None
    best_state = None
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            total, correct = 0.0, 0
            for idx in minibatches(len(volumes), cfg.batch_size, rng):
                xb = _batch([volumes[i] for i in idx], scale)
                yb = torch.from_numpy(y[idx])
                opt.zero_grad()
                logits = model(xb)
                loss = loss_fn(logits, yb)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                correct += int((logits.argmax(1) == yb).sum())
            model.eval()
            row = {"epoch": epoch, "train_loss": total / len(volumes), "train_acc": correct / len(volumes),
                   "val_loss": None, "val_acc": None}
            if val is not None and val_x:
                logits = torch.from_numpy(_logits(model, val_x, cfg.batch_size, scale))
                vy = torch.from_numpy(val_y)
                row["val_loss"] = float(nn.functional.cross_entropy(
                    logits, vy, weight=torch.tensor(weights, dtype=torch.float64)))
                row["val_acc"] = float((logits.argmax(1) == vy).double().mean())
                key = (row["val_acc"], -row["val_loss"])
                if best is None or key > best:
                    best = key
                    best_state = {k: v.clone() for k, v in model.state_dict().items()}
                    row["checkpoint"] = True
            row["seconds"] = time.perf_counter() - t0
            history.append(row)
            log.info("classifier epoch %d loss=%.4f acc=%.3f val_acc=%s", epoch, row["train_loss"],
                     row["train_acc"], row["val_acc"])
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    chosen = next((r["epoch"] for r in reversed(history) if r.get("checkpoint")), cfg.epochs)
    return ClassifierWeights.from_model(model, cfg, history, epoch=chosen, seed=cfg.seed)


def predict_logits(volumes, weights: ClassifierWeights, batch_size: int = 4) -> np.ndarray:
    volumes = list(volumes)
    _check_shapes(volumes, weights.config)
    return _logits(weights.model(), volumes, batch_size, weights.config.input_scale)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(volume, weights: ClassifierWeights) -> ClassProbs:
    return ClassProbs.from_array(softmax(predict_logits([volume], weights))[0])


def predict_many(volumes, weights: ClassifierWeights) -> List[ClassProbs]:
    return [ClassProbs.from_array(p) for p in softmax(predict_logits(volumes, weights))]
