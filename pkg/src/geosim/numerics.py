"""Dense double-precision tensor helpers, gradient checking and the optimizer.

Tensors are ``torch.Tensor`` objects in float64; reverse-mode gradients come
from torch autograd and are audited by :func:`grad_check`, which uses plain
central finite differences and never touches autograd for the numeric side.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ConfigError, DimensionError, NumericError

DTYPE = torch.float64

Tensor = torch.Tensor
Parameter = torch.nn.Parameter


def tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Build a float64 tensor, optionally reshaping row-major ``data``."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64)).clone()
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"extents must be positive, got {shape}")
        if math.prod(shape) != t.numel():
            raise DimensionError(f"cannot view {t.numel()} values as {shape}")
        t = t.reshape(shape)
    return t


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max subtraction; works on any leading batch dims."""
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` takes no arguments and reads ``params`` by closure. Relative
    error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()}")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError(f"non-finite loss while perturbing coordinate {i}")
                num = (up - down) / (2.0 * eps)
                a = gflat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


@torch.no_grad()
def sgd_step(
    params: Sequence[Tensor],
    lr: float,
    weight_decay: float = 0.0,
    clip_norm: float | None = None,
    no_decay: Iterable[Tensor] = (),
    momentum: float = 0.0,
    buffers: dict | None = None,
) -> float:
    """One SGD update; returns the pre-clip global gradient norm.

    The gradient is rescaled to ``clip_norm`` when its global norm exceeds
    it, then ``p -= lr * (grad + weight_decay * p)``. Parameters listed in
    ``no_decay`` skip the decay term. With ``momentum > 0`` a heavy-ball
    buffer (kept in ``buffers``, keyed by parameter id) replaces the raw
    step direction.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if weight_decay < 0:
        raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
    if momentum and buffers is None:
        raise ConfigError("momentum needs a buffers dict")
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    scale = 1.0
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
    skip = {id(p) for p in no_decay}
    for p in params:
        d = p.grad * scale
        if weight_decay and id(p) not in skip:
            d = d + weight_decay * p
        if momentum:
            buf = buffers.get(id(p))
            buf = d.clone() if buf is None else buf.mul_(momentum).add_(d)
            buffers[id(p)] = buf
            d = buf
        p.sub_(lr * d)
    return norm


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    min_lr: float
    warmup_iters: int
    total_iters: int

    def __post_init__(self):
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 < min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ConfigError("need 0 <= warmup_iters <= total_iters")


def cosine_lr(sched: LrSchedule, it: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr``."""
    if it < 0 or it > sched.total_iters:
        raise ConfigError(f"iteration {it} outside [0, {sched.total_iters}]")
    if it < sched.warmup_iters:
        return sched.base_lr * it / sched.warmup_iters
    span = sched.total_iters - sched.warmup_iters
    if span == 0:
        return sched.base_lr
    frac = (it - sched.warmup_iters) / span
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + math.cos(math.pi * frac))


# -- serialization ---------------------------------------------------------

def save_tns(t: Tensor, path: str | Path) -> None:
    """Write ``shape: d0 d1 ...`` followed by little-endian float64 data."""
    t = t.detach().to(DTYPE).contiguous()
    header = "shape: " + " ".join(str(s) for s in t.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(t.numpy().astype("<f8").tobytes())


def load_tns(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        payload = fh.read()
    if not header.startswith("shape:"):
        raise DimensionError(f"{path}: missing shape header")
    shape = tuple(int(s) for s in header[len("shape:"):].split())
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != math.prod(shape):
        raise DimensionError(f"{path}: header {shape} disagrees with {values.size} values")
    return torch.from_numpy(values.astype(np.float64).reshape(shape))


def export_csv(t: Tensor, path: str | Path) -> None:
    """Dump as rows of the leading axis (scalars and vectors become one row)."""
    arr = t.detach().cpu().numpy()
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    else:
        arr = arr.reshape(arr.shape[0], -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in arr:
            w.writerow([repr(float(v)) for v in row])
