"""Torch helpers shared by the denoiser and the classifier."""
from __future__ import annotations

import json
import math
from dataclasses import asdict
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .volume_io import NamedTensorArchive


def he_init_(module: nn.Module, generator: torch.Generator, gain: float = 2.0) -> None:
    """Seeded fan-in normal init: std = sqrt(gain / fan_in), zero bias."""
    w = module.weight
    if isinstance(module, (nn.ConvTranspose2d, nn.ConvTranspose3d)):
        fan_in = w.shape[0] * int(np.prod(w.shape[2:]))
    else:
        fan_in = int(np.prod(w.shape[1:]))
    with torch.no_grad():
        w.copy_(torch.randn(w.shape, generator=generator, dtype=w.dtype) * math.sqrt(gain / fan_in))
        if module.bias is not None:
            module.bias.zero_()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_to_archive(model: nn.Module, metadata: dict) -> NamedTensorArchive:
    tensors = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    archive = NamedTensorArchive(tensors, metadata)
    for t in archive.tensors.values():
        t.setflags(write=False)
    return archive


def load_archive_into(model: nn.Module, archive: NamedTensorArchive) -> nn.Module:
    dtype = next(model.parameters()).dtype
    state = {k: torch.from_numpy(np.array(v)).to(dtype) for k, v in archive.tensors.items()}
    model.load_state_dict(state, strict=True)
    return model


def config_metadata(cfg, kind: str, frozen: bool, **extra) -> dict:
    meta = {"kind": kind, "frozen": "true" if frozen else "false", "config": json.dumps(asdict(cfg), sort_keys=True)}
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
