"""Finite-difference gradient checking in float64.

Backpropagated gradients are compared with central differences on a random
sample of individual weights.  Used to validate the recurrent merge cell and
the 3D conv stack independently of autograd.

Central differences are meaningless across a kink, so the rectifier sign
pattern and max-pool switches are recorded at w - h, w and w + h; a sampled
weight whose perturbation flips any of them is replaced by a fresh draw.
"""
from __future__ import annotations

import copy
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ValidationError

REL_ERROR_FLOOR = 1e-6

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def mse_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean((output - target) ** 2)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: Optional[str] = None
    n_kinks_skipped: int = 0
    samples: List[dict] = field(default_factory=list, repr=False)


def _double_copy(module: nn.Module) -> nn.Module:
    m = copy.deepcopy(module).double()
    m.eval()
    for p in m.parameters():
        p.requires_grad_(True)
    return m


def _as_double(x):
    if isinstance(x, torch.Tensor):
        return x.double() if x.is_floating_point() else x
    arr = np.asarray(x)
    t = torch.from_numpy(np.ascontiguousarray(arr))
    return t.double() if t.is_floating_point() else t


_POOLS = {nn.MaxPool1d: F.max_pool1d, nn.MaxPool2d: F.max_pool2d, nn.MaxPool3d: F.max_pool3d}


@contextmanager
def _record_switches(module: nn.Module, log: list):
    """Append every rectifier sign mask and max-pool argmax seen during forward passes."""

    def relu_hook(mod, inp, out):
        log.append(out > 0)

    def pool_hook(mod, inp, out):
        fn = _POOLS[type(mod)]
        _, idx = fn(inp[0], mod.kernel_size, mod.stride, mod.padding, mod.dilation, mod.ceil_mode, True)
        log.append(idx)

    handles = []
    for m in module.modules():
        if isinstance(m, nn.ReLU):
            handles.append(m.register_forward_hook(relu_hook))
        elif type(m) in _POOLS:
            handles.append(m.register_forward_hook(pool_hook))
    try:
        yield
    finally:
        for hd in handles:
            hd.remove()


def _same_switches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def analytic_gradients(module: nn.Module, inputs, targets, loss: LossFn = mse_loss) -> Dict[str, np.ndarray]:
    """Backpropagated gradient of ``loss(module(inputs), targets)`` for every parameter, in float64."""
    m = _double_copy(module)
    x, t = _as_double(inputs), _as_double(targets)
    m.zero_grad()
    loss(m(x), t).backward()
    return {name: p.grad.detach().numpy().copy() for name, p in m.named_parameters()}


def check_gradients(module: nn.Module, inputs, targets, loss: LossFn = mse_loss, n_samples: int = 200,
                    h: float = 1e-5, seed: int = 0) -> GradCheckResult:
    """Max relative error between backprop and central differences over sampled weights.

    Weights are drawn uniformly (with replacement) over all scalar
    parameters; draws that straddle a kink are skipped.  The relative error
    of one sample is ``|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)``.
    """
    if n_samples < 1 or h <= 0:
        raise ValidationError("n_samples must be >= 1 and h > 0")
    m = _double_copy(module)
    x, t = _as_double(inputs), _as_double(targets)
    m.zero_grad()
    loss(m(x), t).backward()

    params = [(name, p) for name, p in m.named_parameters()]
    sizes = np.array([p.numel() for _, p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    base = []
    with torch.no_grad(), _record_switches(m, base):
        m(x)

    def evaluate(flat, local, value):
        flat[local] = value
        seen = []
        with _record_switches(m, seen):
            out = float(loss(m(x), t))
        return out, _same_switches(seen, base)

    samples = []
    skipped = 0
    worst, worst_err = None, -1.0
    budget = 20 * n_samples
    with torch.no_grad():
        while len(samples) < n_samples:
            if budget == 0:
                raise ValidationError(f"too many kink crossings ({skipped}); choose a smaller h or another point")
            budget -= 1
            fid = int(rng.integers(total))
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            name, p = params[k]
            local = int(fid - offsets[k])
            flat = p.view(-1)
            orig = float(flat[local])
            lp, ok_p = evaluate(flat, local, orig + h)
            lm, ok_m = evaluate(flat, local, orig - h)
            flat[local] = orig
            if not (ok_p and ok_m):
                skipped += 1
                continue
            a = float(p.grad.view(-1)[local])
            n = (lp - lm) / (2 * h)
            err = abs(a - n) / max(abs(a), abs(n), REL_ERROR_FLOOR)
            samples.append({"param": name, "index": local, "analytic": a, "numeric": n, "rel_error": err})
            if err > worst_err:
                worst, worst_err = f"{name}[{local}]", err
    return GradCheckResult(worst_err, len(samples), worst, skipped, samples)


def stationarity(module: nn.Module, inputs) -> float:
    """Max |gradient| of the MSE loss when targets equal the module's own outputs."""
    m = _double_copy(module)
    x = _as_double(inputs)
    with torch.no_grad():
        target = m(x).clone()
    grads = analytic_gradients(m, x, target, mse_loss)
    return max(float(np.abs(g).max()) for g in grads.values())
