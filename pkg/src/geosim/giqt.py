"""Geometry-conditioned low-rank query/key transforms inside multi-head attention.

Each head's queries and keys are multiplied by ``T = I + U V^T`` where the
factors are predicted from the geometry embedding; values pass through
untouched. The transform is never materialized: ``x' = x + (x V) U^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DimensionError
from .numerics import softmax_rows


@dataclass(frozen=True)
class GiqtConfig:
    d_model: int = 64
    n_heads: int = 4
    rank: int = 8
    gating: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 1 <= self.rank <= self.d_k:
            raise ConfigError(f"rank must lie in [1, {self.d_k}], got {self.rank}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


FACTOR_NAMES = ("u_q", "v_q", "u_k", "v_k")


class FactorPredictor(nn.Module):
    """Shared geometry trunk plus separate per-head linear heads for T_Q and T_K.

    The embedding is layer-normalized before the trunk. The U heads start at
    exactly zero so T = I at initialization; the V heads start small and
    random, otherwise the bilinear product U V^T would sit at a saddle with
    zero gradient for both factors.
    """

    def __init__(self, d_geo: int, cfg: GiqtConfig, hidden: int = 64,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.d_geo = d_geo
        self.hidden = hidden
        self.fc1 = nn.Linear(d_geo, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        out = cfg.n_heads * cfg.d_k * cfg.rank
        self.heads = nn.ModuleDict({name: nn.Linear(hidden, out) for name in FACTOR_NAMES})
        _init_linear(self.fc1, generator)
        _init_linear(self.fc2, generator)
        for name, lin in self.heads.items():
            if name.startswith("u"):
                nn.init.zeros_(lin.weight)
            else:
                _init_linear(lin, generator, std=0.02)
            nn.init.zeros_(lin.bias)

    @staticmethod
    def parameter_count(d_geo: int, cfg: GiqtConfig, hidden: int = 64) -> int:
        out = cfg.n_heads * cfg.d_k * cfg.rank
        return (d_geo + 1) * hidden + (hidden + 1) * hidden + 4 * (hidden + 1) * out

    def forward(self, e_geo: torch.Tensor) -> dict[str, torch.Tensor]:
        """(B, d_geo) -> dict of (B, H, d_k, r) factor tensors."""
        if e_geo.shape[-1] != self.d_geo:
            raise ConfigError(f"geometry embedding has {e_geo.shape[-1]} dims, predictor expects {self.d_geo}")
        h = F.gelu(self.fc2(F.gelu(self.fc1(unit_scale(e_geo)))))
        shape = e_geo.shape[:-1] + (self.cfg.n_heads, self.cfg.d_k, self.cfg.rank)
        return {name: head(h).reshape(shape) for name, head in self.heads.items()}


def unit_scale(e_geo: torch.Tensor) -> torch.Tensor:
    """Parameter-free layer norm of the geometry embedding.

    The tables start at std 0.02; normalizing here lets the downstream
    layers see unit-scale inputs from the first step on.
    """
    return F.layer_norm(e_geo, e_geo.shape[-1:])


def predict_factors(e_geo: torch.Tensor, pred: FactorPredictor) -> list[dict[str, torch.Tensor]]:
    """Single-sample form: one dict of (d_k, r) factors per head."""
    if e_geo.dim() != 1:
        raise DimensionError("predict_factors expects a single d_geo vector")
    f = pred(e_geo.unsqueeze(0))
    return [{name: f[name][0, h] for name in FACTOR_NAMES} for h in range(pred.cfg.n_heads)]


def apply_low_rank(x: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Row-wise ``x + (x V) U^T``; batch dims of ``x``, ``u``, ``v`` broadcast."""
    if u.shape != v.shape or x.shape[-1] != u.shape[-2]:
        raise DimensionError(f"shape mismatch: x {tuple(x.shape)}, U {tuple(u.shape)}, V {tuple(v.shape)}")
    return x + (x @ v) @ u.transpose(-1, -2)


def gate_blend(x_t: torch.Tensor, x: torch.Tensor, beta) -> torch.Tensor:
    a = torch.sigmoid(torch.as_tensor(beta, dtype=x.dtype))
    return a * x_t + (1.0 - a) * x


def _split(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(1, 2)


def _merge(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dk = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dk)


def rectified_attention(q, k, v, n_heads, factors=None, beta=None, return_weights=False):
    """Batched multi-head attention on already-projected (B, n, d) inputs.

    ``factors`` maps u_q/v_q/u_k/v_k to (B, H, d_k, r) tensors; ``None``
    gives plain attention. ``beta`` holds per-head gate logits or is ``None``
    for ungated transforms.
    """
    d = q.shape[-1]
    if d % n_heads:
        raise ConfigError(f"d={d} not divisible by n_heads={n_heads}")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise DimensionError("query, key and value widths must agree")
    d_k = d // n_heads
    qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
    if factors is not None:
        qt = apply_low_rank(qh, factors["u_q"], factors["v_q"])
        kt = apply_low_rank(kh, factors["u_k"], factors["v_k"])
        if beta is not None:
            g = torch.sigmoid(beta).view(1, -1, 1, 1)
            qt = g * qt + (1.0 - g) * qh
            kt = g * kt + (1.0 - g) * kh
        qh, kh = qt, kt
    w = softmax_rows(qh @ kh.transpose(-1, -2) / math.sqrt(d_k))
    out = _merge(w @ vh)
    return (out, w) if return_weights else out


def giqt_attention(Q, K, V, e_geo, cfg: GiqtConfig, pred: FactorPredictor, gates=None):
    """Single-sample rectified attention on projected (L, d), (N, d), (N, d) inputs."""
    if Q.shape[-1] != cfg.d_model:
        raise ConfigError(f"inputs have width {Q.shape[-1]}, config says {cfg.d_model}")
    factors = pred(e_geo.reshape(1, -1))
    beta = gates if cfg.gating else None
    return rectified_attention(Q[None], K[None], V[None], cfg.n_heads, factors, beta)[0]


class GeoAttention(nn.Module):
    """Multi-head attention with input/output projections.

    With ``geometry=True`` the module owns a factor predictor and per-head
    gate logits, and queries/keys are rectified by the sample's geometry.
    """

    def __init__(self, cfg: GiqtConfig, d_geo: int = 0, geometry: bool = False,
                 predictor_hidden: int = 64, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.w_q, self.w_k, self.w_v, self.w_o = (nn.Linear(d, d) for _ in range(4))
        for lin in (self.w_q, self.w_k, self.w_v, self.w_o):
            _init_linear(lin, generator)
        self.geometry = geometry
        if geometry:
            self.predictor = FactorPredictor(d_geo, cfg, predictor_hidden, generator)
            self.beta = nn.Parameter(torch.zeros(cfg.n_heads))
        self.enabled = True  # runtime switch for ablation

    def forward(self, x_q, x_kv, e_geo=None, return_weights=False):
        q, k, v = self.w_q(x_q), self.w_k(x_kv), self.w_v(x_kv)
        factors = beta = None
        if self.geometry and self.enabled:
            if e_geo is None:
                raise ConfigError("geometry-conditioned attention needs e_geo")
            factors = self.predictor(e_geo)
            beta = self.beta if self.cfg.gating else None
        out = rectified_attention(q, k, v, self.cfg.n_heads, factors, beta, return_weights)
        if return_weights:
            return self.w_o(out[0]), out[1]
        return self.w_o(out)


def _init_linear(lin: nn.Linear, generator, std: float | None = None):
    fan_in = lin.weight.shape[1]
    std = std if std is not None else 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        lin.weight.copy_(torch.randn(lin.weight.shape, generator=generator) * std)
        lin.bias.zero_()
