"""Healthy-lung denoising reconstructor and subtraction infection maps.

The network is a U-Net whose bottleneck is a stack of densely connected
convolution blocks and whose decoder merges each (skip, upsampled) pair with
a bidirectional convolutional LSTM before the usual two 3x3 convolutions.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import StateError, TrainingError, ValidationError
from .nets import config_metadata, he_init_, load_archive_into, minibatches, model_to_archive
from .preprocess import STANDARD_DEPTH, NormalizedStack, resize_depth
from .volume_io import NamedTensorArchive, load_weights, save_weights

log = logging.getLogger(__name__)


@dataclass
class DenoiserConfig:
    input_size: int = 240
    depth: int = 3
    base_channels: int = 16
    dense_blocks: int = 2
    lstm_hidden: Optional[List[int]] = None  # per decoder level (shallowest first); default channels // 2
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if not 2 <= self.depth <= 4:
            raise ValidationError(f"depth must be in [2, 4], got {self.depth}")
        b = self.base_channels
        if b < 1 or b & (b - 1):
            raise ValidationError(f"base_channels must be a positive power of two, got {b}")
        if self.dense_blocks < 1:
            raise ValidationError("dense_blocks must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.input_size % (2**self.depth):
            raise ValidationError(f"input_size {self.input_size} not divisible by 2**depth")
        if self.loss != "mse":
            raise ValidationError(f"unsupported loss {self.loss!r}")
        if self.lstm_hidden is not None:
            self.lstm_hidden = [int(h) for h in self.lstm_hidden]
            if len(self.lstm_hidden) != self.depth or min(self.lstm_hidden) < 1:
                raise ValidationError("lstm_hidden needs one positive width per decoder level")

    def channels(self) -> List[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]

    def hidden(self) -> List[int]:
        if self.lstm_hidden is not None:
            return list(self.lstm_hidden)
        return [max(1, c // 2) for c in self.channels()]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.depth


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class ConvLSTMCell(nn.Module):
    """LSTM cell whose gates are 3x3 convolutions over [input, hidden]."""

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, 3, padding=1)

    def forward(self, x, state):
        h, c = state
        i, f, g, o = torch.chunk(self.gates(torch.cat([x, h], dim=1)), 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c

    def run(self, seq: Sequence[torch.Tensor]) -> torch.Tensor:
        x0 = seq[0]
        h = x0.new_zeros(x0.shape[0], self.hidden, *x0.shape[2:])
        state = (h, h)
        for x in seq:
            state = self(x, state)
        return state[0]


class BiConvLSTMMerge(nn.Module):
    """Reads (skip, upsampled) as a length-2 sequence in both directions."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.forward_cell = ConvLSTMCell(channels, hidden)
        self.backward_cell = ConvLSTMCell(channels, hidden)

    def forward(self, skip, up):
        h_fwd = self.forward_cell.run([skip, up])
        h_bwd = self.backward_cell.run([up, skip])
        return torch.cat([h_fwd, h_bwd], dim=1)


class BCDUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chans = cfg.channels()
        cb = cfg.bottleneck_channels
        self.encoder = nn.ModuleList()
        cin = 1
        for c in chans:
            self.encoder.append(_double_conv(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.up_act = nn.ReLU()
        self.dense = nn.ModuleList(
            [_double_conv(chans[-1] if k == 0 else k * cb, cb) for k in range(cfg.dense_blocks)]
        )
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        self.decoder = nn.ModuleList()
        prev = cb
        for c, h in reversed(list(zip(chans, cfg.hidden()))):
            self.up.append(nn.ConvTranspose2d(prev, c, 2, stride=2))
            self.merge.append(BiConvLSTMMerge(c, h))
            self.decoder.append(_double_conv(2 * h, c))
            prev = c
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        outs = []
        for k, block in enumerate(self.dense):
            inp = x if k == 0 else torch.cat(outs, dim=1)
            outs.append(block(inp))
        x = outs[-1]
        for up, merge, block, skip in zip(self.up, self.merge, self.decoder, reversed(skips)):
            x = self.up_act(up(x))
            x = block(merge(skip, x))
        return torch.sigmoid(self.head(x))


def build_denoiser(cfg: DenoiserConfig) -> BCDUNet:
    """Fresh network with seeded fan-in initialisation."""
    model = BCDUNet(cfg)
    gen = torch.Generator().manual_seed(int(cfg.seed) & 0x7FFFFFFFFFFFFFFF)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            # gate and head convolutions feed saturating nonlinearities
            linear_out = m is model.head or any(m is cell.gates for cell in _cells(model))
            he_init_(m, gen, gain=1.0 if linear_out else 2.0)
    return model


def _cells(model: BCDUNet):
    for merge in model.merge:
        yield merge.forward_cell
        yield merge.backward_cell


@dataclass
class DenoiserWeights:
    archive: NamedTensorArchive
    config: DenoiserConfig
    frozen: bool = False
    history: List[dict] = field(default_factory=list)
    _model: Optional[BCDUNet] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_model(cls, model: BCDUNet, cfg: DenoiserConfig, frozen: bool, history=None, **meta):
        archive = model_to_archive(model, config_metadata(cfg, "denoiser", frozen, **meta))
        return cls(archive, cfg, frozen, list(history or []))

    def model(self) -> BCDUNet:
        if self._model is None:
            model = load_archive_into(BCDUNet(self.config), self.archive)
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
            self._model = model
        return self._model

    def save(self, path) -> Path:
        return save_weights(self.archive, path)

    @classmethod
    def load(cls, path) -> "DenoiserWeights":
        archive = load_weights(path)
        if archive.metadata.get("kind") != "denoiser":
            raise ValidationError(f"{path} does not hold denoiser weights")
        cfg = DenoiserConfig(**json.loads(archive.metadata["config"]))
        for t in archive.tensors.values():
            t.setflags(write=False)
        return cls(archive, cfg, archive.metadata.get("frozen") == "true")


def initial_weights(cfg: DenoiserConfig, warm_start: Optional[NamedTensorArchive] = None) -> DenoiserWeights:
    model = build_denoiser(cfg)
    if warm_start is not None:
        load_archive_into(model, warm_start)
    return DenoiserWeights.from_model(model, cfg, frozen=False)


def _as_batch(arr) -> torch.Tensor:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).unsqueeze(1)


@torch.no_grad()
def _predict(model: nn.Module, slices: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(slices), batch_size):
        out.append(model(_as_batch(slices[start:start + batch_size])).squeeze(1).numpy())
    return np.concatenate(out, axis=0)


def evaluate_mse(weights: DenoiserWeights, inputs, targets, batch_size: int = 16) -> float:
    """Mean squared error of the reconstruction of ``inputs`` against ``targets``."""
    model = weights.model() if weights.frozen else _unfrozen_model(weights)
    pred = _predict(model, np.asarray(inputs, dtype=np.float32), batch_size)
    return float(np.mean((pred.astype(np.float64) - np.asarray(targets, dtype=np.float64)) ** 2))


def _unfrozen_model(weights: DenoiserWeights) -> BCDUNet:
    model = load_archive_into(BCDUNet(weights.config), weights.archive)
    model.eval()
    return model


def train_denoiser(inputs, targets, cfg: DenoiserConfig, val: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                   log_path=None, warm_start: Optional[NamedTensorArchive] = None) -> DenoiserWeights:
    """Mini-batch Adam on the mean squared reconstruction error; returns frozen weights.

    ``val`` is an optional (inputs, targets) pair evaluated after every epoch.
    One JSON line per epoch is appended to ``log_path`` when given.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if inputs.shape != targets.shape or inputs.ndim != 3:
        raise ValidationError(f"inputs {inputs.shape} and targets {targets.shape} must be equal (n, h, w)")
    if len(inputs) < min(cfg.batch_size, 1) or len(inputs) == 0:
        raise ValidationError("need at least one training slice")
    if inputs.shape[1] % (2**cfg.depth) or inputs.shape[2] % (2**cfg.depth):
        raise ValidationError(f"slice size {inputs.shape[1:]} not divisible by 2**depth")

    model = build_denoiser(cfg)
    if warm_start is not None:
        load_archive_into(model, warm_start)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.MSELoss()
    rng = np.random.default_rng(cfg.seed)
    history = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            total = 0.0
            for idx in minibatches(len(inputs), cfg.batch_size, rng):
                x = _as_batch(inputs[idx])
                y = _as_batch(targets[idx])
                opt.zero_grad()
                loss = loss_fn(model(x), y)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            model.eval()
            row = {"epoch": epoch, "train_mse": total / len(inputs), "val_mse": None}
            if val is not None:
                pred = _predict(model, np.asarray(val[0], dtype=np.float32), cfg.batch_size)
                row["val_mse"] = float(np.mean((pred.astype(np.float64) - np.asarray(val[1], dtype=np.float64)) ** 2))
            row["seconds"] = time.perf_counter() - t0
            history.append(row)
            log.info("denoiser epoch %d train_mse=%.5f val_mse=%s", epoch, row["train_mse"], row["val_mse"])
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return DenoiserWeights.from_model(model, cfg, frozen=True, history=history, epoch=cfg.epochs, seed=cfg.seed)


def _require_frozen(w: DenoiserWeights):
    if not w.frozen:
        raise StateError("denoiser weights must be frozen before inference")


def reconstruct(stack: NormalizedStack, w: DenoiserWeights, batch_size: int = 8) -> NormalizedStack:
    """Per-slice forward pass of the frozen denoiser."""
    _require_frozen(w)
    s = stack.slices
    if s.shape[1] % (2**w.config.depth):
        raise ValidationError(f"slice size {s.shape[1]} not divisible by 2**{w.config.depth}")
    pred = _predict(w.model(), s, batch_size)
    return NormalizedStack(np.clip(pred, 0.0, 1.0), stack.case_id, stack.original_slice_count)


@dataclass
class InfectionVolume:
    voxels: np.ndarray
    case_id: str

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        if v.ndim != 3 or not np.all(np.isfinite(v)) or v.min() < -1.0 or v.max() > 1.0:
            raise ValidationError("infection volume must be a finite 3D grid within [-1, 1]")
        self.voxels = v


def infection_map_case(stack: NormalizedStack, w: DenoiserWeights, depth: int = STANDARD_DEPTH) -> InfectionVolume:
    """Signed residual ``stack - reconstruct(stack)`` resized to ``depth`` slices."""
    recon = reconstruct(stack, w)
    diff = stack.slices.astype(np.float64) - recon.slices.astype(np.float64)
    return InfectionVolume(np.clip(resize_depth(diff, depth), -1.0, 1.0), stack.case_id)


def residual_stats(inf: InfectionVolume, mask: Optional[np.ndarray] = None) -> dict:
    a = np.abs(inf.voxels.astype(np.float64))
    out = {"p99_abs": float(np.percentile(a, 99)), "mean_abs": float(a.mean())}
    if mask is not None and mask.any() and (~mask).any():
        inside = float(a[mask].mean())
        outside = float(a[~mask].mean())
        out.update(inside=inside, outside=outside, contrast=inside / outside if outside > 0 else math.inf)
    return out
