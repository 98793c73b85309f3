"""Encoder stub, geometry-conditioned prompts and the two-way attention decoder.

Pipeline per sample::

    [cls, view, x_local] = encoder([CLS, VIEW, tokenize(x)])
    x_inv  = cls - view
    e_geo  = [e_cam; e_alt; e_angle]
    p_geo  = p_base + prompt_alpha * f_geo([x_inv; e_geo])
    x_ref  = decoder(x_local, p_geo, e_geo)
    out    = [x_inv; x_ref]
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DimensionError, InputError
from .geometry import GeometryEmbedder
from .giqt import GeoAttention, GiqtConfig, _init_linear, unit_scale
from .numerics import generator as make_generator, load_tns, save_tns


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 16
    d_model: int = 64
    n_heads: int = 4
    rank: int = 8
    prompt_len: int = 32
    n_blocks: int = 2
    n_cams: int = 4
    n_alt_bins: int = 3
    n_angle_bins: int = 3
    d_cam: int = 16
    d_alt: int = 16
    d_angle: int = 16
    n_ids: int = 2
    n_views: int = 2
    predictor_hidden: int = 64
    gating: bool = True
    prompt_alpha_init: float = 1.0
    use_gcpg: bool = True
    use_giqt: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for f in ("d_in", "prompt_len", "n_blocks", "n_ids", "n_views", "n_cams"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    @property
    def d_geo(self) -> int:
        return self.d_cam + self.d_alt + self.d_angle

    @property
    def giqt(self) -> GiqtConfig:
        return GiqtConfig(self.d_model, self.n_heads, self.rank, self.gating)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, generator=None):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        _init_linear(self.fc1, generator)
        _init_linear(self.fc2, generator)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.attn = GeoAttention(GiqtConfig(d, cfg.n_heads, 1, False), generator=generator)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, 4 * d, generator)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


@dataclass
class EncoderOutput:
    cls: torch.Tensor
    view: torch.Tensor
    x_local: torch.Tensor
    x_inv: torch.Tensor


class EncoderStub(nn.Module):
    """Small pre-norm transformer over ``[cls, view, patch tokens]``."""

    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        d = cfg.d_model
        self.tokenizer = nn.Linear(cfg.d_in, d)
        _init_linear(self.tokenizer, generator)
        self.cls_token = nn.Parameter(torch.randn(d, generator=generator) * 0.02)
        self.view_token = nn.Parameter(torch.randn(d, generator=generator) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(cfg, generator) for _ in range(cfg.n_blocks))
        self.norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        if x.dim() != 3 or x.shape[1] < 1:
            raise InputError(f"expected (B, n_patches>=1, d_in) input, got {tuple(x.shape)}")
        b = x.shape[0]
        tokens = torch.cat([self.cls_token.expand(b, 1, -1), self.view_token.expand(b, 1, -1),
                            self.tokenizer(x)], dim=1)
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.norm(tokens)
        cls, view = tokens[:, 0], tokens[:, 1]
        return EncoderOutput(cls=cls, view=view, x_local=tokens[:, 2:], x_inv=cls - view)


class PromptSet(nn.Module):
    """Base prompts, a learnable scale and the offset network f_geo."""

    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        d, L = cfg.d_model, cfg.prompt_len
        self.prompt_len = L
        self.p_base = nn.Parameter(torch.randn(L, d, generator=generator) * 0.02)
        self.prompt_alpha = nn.Parameter(torch.tensor(float(cfg.prompt_alpha_init)))
        hidden = 2 * (d + cfg.d_geo)
        self.fc1 = nn.Linear(d + cfg.d_geo, hidden)
        self.fc2 = nn.Linear(hidden, L * d)
        _init_linear(self.fc1, generator)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def offset(self, x_inv, e_geo):
        h = F.gelu(self.fc1(torch.cat([x_inv, unit_scale(e_geo)], dim=-1)))
        return self.fc2(h).reshape(x_inv.shape[:-1] + self.p_base.shape)

    def forward(self, x_inv, e_geo, enabled: bool = True):
        """Returns (p_geo, offset), both (B, L, d)."""
        if enabled:
            off = self.offset(x_inv, e_geo)
        else:
            off = torch.zeros(x_inv.shape[:-1] + self.p_base.shape, dtype=x_inv.dtype)
        return self.p_base + self.prompt_alpha * off, off


class CvftDecoder(nn.Module):
    """Two-way attention followed by output-token fusion.

    Every cross-attention is geometry conditioned; self-attentions are plain.
    Sublayers are pre-norm with residual connections.
    """

    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        d = cfg.d_model
        g = cfg.giqt
        plain = GiqtConfig(d, cfg.n_heads, 1, False)

        def cross():
            return GeoAttention(g, cfg.d_geo, True, cfg.predictor_hidden, generator)

        self.sa_prompt = GeoAttention(plain, generator=generator)
        self.ca_prompt_to_image = cross()
        self.ffn_prompt = FeedForward(d, 4 * d, generator)
        self.ca_image_to_prompt = cross()
        self.ca_fuse = cross()
        self.sa_fuse = GeoAttention(plain, generator=generator)
        self.ffn_fuse = FeedForward(d, 4 * d, generator)
        self.out_token = nn.Parameter(torch.randn(d, generator=generator) * 0.02)
        self.norms = nn.ModuleDict({k: nn.LayerNorm(d) for k in (
            "p_sa", "p_ca", "mem_img", "p_ffn", "i_ca", "mem_prompt",
            "f_ca", "mem_fuse", "f_sa", "f_ffn", "out")})

    def cross_attentions(self):
        return (self.ca_prompt_to_image, self.ca_image_to_prompt, self.ca_fuse)

    def two_way(self, p_geo, x_local, e_geo):
        n = self.norms
        h = n["p_sa"](p_geo)
        p = p_geo + self.sa_prompt(h, h)
        p = p + self.ca_prompt_to_image(n["p_ca"](p), n["mem_img"](x_local), e_geo)
        f_p = p + self.ffn_prompt(n["p_ffn"](p))
        f_i = x_local + self.ca_image_to_prompt(n["i_ca"](x_local), n["mem_prompt"](f_p), e_geo)
        return f_p, f_i

    def fuse(self, f_p, f_i, e_geo):
        n = self.norms
        t = torch.cat([self.out_token.expand(f_p.shape[0], 1, -1), f_p], dim=1)
        t = t + self.ca_fuse(n["f_ca"](t), n["mem_fuse"](f_i), e_geo)
        h = n["f_sa"](t)
        t = t + self.sa_fuse(h, h)
        t = t + self.ffn_fuse(n["f_ffn"](t))
        return n["out"](t[:, 0])


@dataclass
class ModelOutput:
    x_inv: torch.Tensor
    x_ref: torch.Tensor
    out: torch.Tensor
    view: torch.Tensor
    view_logits: torch.Tensor
    id_logits_global: torch.Tensor
    id_logits_local: torch.Tensor
    prompt_offset: torch.Tensor


class GeoReidModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = make_generator(cfg.seed)
        self.embedder = GeometryEmbedder(cfg.n_cams, cfg.n_alt_bins, cfg.n_angle_bins,
                                         cfg.d_cam, cfg.d_alt, cfg.d_angle, generator=g)
        self.encoder = EncoderStub(cfg, g)
        self.prompts = PromptSet(cfg, g)
        self.decoder = CvftDecoder(cfg, g)
        d = cfg.d_model
        self.view_head = nn.Linear(d, cfg.n_views)
        self.id_head_global = nn.Linear(d, cfg.n_ids, bias=False)
        self.id_head_local = nn.Linear(d, cfg.n_ids, bias=False)
        _init_linear(self.view_head, g)
        with torch.no_grad():
            self.id_head_global.weight.copy_(torch.randn(cfg.n_ids, d, generator=g) * 0.02)
            self.id_head_local.weight.copy_(torch.randn(cfg.n_ids, d, generator=g) * 0.02)
        self.set_ablation(cfg.use_gcpg, cfg.use_giqt)

    def set_ablation(self, use_gcpg: bool, use_giqt: bool) -> None:
        """Switch components off at run time: zero prompt offsets and/or T = I without gates."""
        self.use_gcpg = bool(use_gcpg)
        self.use_giqt = bool(use_giqt)
        for ca in self.decoder.cross_attentions():
            ca.enabled = self.use_giqt

    def no_decay_parameters(self) -> list[nn.Parameter]:
        out = [self.embedder.table_cam, self.embedder.table_alt, self.embedder.table_angle,
               self.prompts.p_base, self.prompts.prompt_alpha]
        out += [ca.beta for ca in self.decoder.cross_attentions()]
        return out

    def forward(self, x: torch.Tensor, geo_idx: torch.Tensor) -> ModelOutput:
        """``x``: (B, n_patches, d_in); ``geo_idx``: (B, 3) camera/alt/angle indices."""
        if x.shape[-1] != self.cfg.d_in:
            raise DimensionError(f"patch width {x.shape[-1]} != d_in {self.cfg.d_in}")
        if geo_idx.shape != (x.shape[0], 3):
            raise DimensionError(f"geometry index must be ({x.shape[0]}, 3), got {tuple(geo_idx.shape)}")
        e_geo = self.embedder(geo_idx)
        enc = self.encoder(x)
        p_geo, offset = self.prompts(enc.x_inv, e_geo, enabled=self.use_gcpg)
        f_p, f_i = self.decoder.two_way(p_geo, enc.x_local, e_geo)
        x_ref = self.decoder.fuse(f_p, f_i, e_geo)
        return ModelOutput(
            x_inv=enc.x_inv, x_ref=x_ref, out=torch.cat([enc.x_inv, x_ref], dim=-1),
            view=enc.view, view_logits=self.view_head(enc.view),
            id_logits_global=self.id_head_global(enc.x_inv),
            id_logits_local=self.id_head_local(x_ref), prompt_offset=offset)


# -- single-sample functional forms ------------------------------------------

def encode(x: torch.Tensor, enc: EncoderStub) -> EncoderOutput:
    if x.dim() != 2 or x.shape[0] < 1:
        raise InputError(f"expected (n_patches>=1, d_in) input, got {tuple(x.shape)}")
    o = enc(x[None])
    return EncoderOutput(o.cls[0], o.view[0], o.x_local[0], o.x_inv[0])


def generate_prompts(x_inv, e_geo, ps: PromptSet):
    p, off = ps(x_inv[None], e_geo[None])
    return p[0], off[0]


def two_way(p_geo, x_local, e_geo, dec: CvftDecoder):
    f_p, f_i = dec.two_way(p_geo[None], x_local[None], e_geo[None])
    return f_p[0], f_i[0]


def fuse(f_p, f_i, e_geo, dec: CvftDecoder):
    return dec.fuse(f_p[None], f_i[None], e_geo[None])[0]


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: GeoReidModel, directory: str | Path, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for name, t in model.state_dict().items():
        save_tns(t, directory / f"{name}.tns")
        names.append(name)
    manifest = {"config": asdict(model.cfg), "tensors": names,
                "ablation": {"use_gcpg": model.use_gcpg, "use_giqt": model.use_giqt}}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory: str | Path) -> tuple[GeoReidModel, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    model = GeoReidModel(ModelConfig.from_dict(manifest["config"]))
    state = {name: load_tns(directory / f"{name}.tns") for name in manifest["tensors"]}
    model.load_state_dict(state)
    ab = manifest.get("ablation", {})
    model.set_ablation(ab.get("use_gcpg", True), ab.get("use_giqt", True))
    return model, manifest


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
