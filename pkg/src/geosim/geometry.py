"""Camera geometry: discretization, learnable embedding and inference-time corruptions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError

CORRUPTION_KINDS = ("none", "flip_alt", "flip_angle", "joint_flip", "biased_alt_shift", "stale", "wrong")


@dataclass(frozen=True)
class GeometryRecord:
    camera_id: int
    altitude_m: float
    angle_deg: float


@dataclass(frozen=True)
class BinningScheme:
    n_alt_bins: int = 3
    n_angle_bins: int = 3
    alt_range: tuple[float, float] = (0.0, 45.0)
    angle_range: tuple[float, float] = (0.0, 90.0)

    def __post_init__(self):
        if self.n_alt_bins < 1 or self.n_angle_bins < 1:
            raise ConfigError("need at least one bin per axis")
        if not self.alt_range[1] > self.alt_range[0] or not self.angle_range[1] > self.angle_range[0]:
            raise ConfigError("bin ranges must be non-degenerate")


@dataclass(frozen=True, order=True)
class GeometryBins:
    camera_id: int
    alt_bin: int
    angle_bin: int

    @property
    def cell(self) -> tuple[int, int]:
        return (self.alt_bin, self.angle_bin)


def _uniform_bin(value: float, lo: float, hi: float, n: int) -> int:
    # left-inclusive edges, clamped at both ends
    idx = math.floor((value - lo) / (hi - lo) * n)
    return min(max(idx, 0), n - 1)


def bin_geometry(rec: GeometryRecord, scheme: BinningScheme) -> GeometryBins:
    if not (math.isfinite(rec.altitude_m) and math.isfinite(rec.angle_deg)):
        raise InputError(f"non-finite geometry {rec}")
    return GeometryBins(
        camera_id=int(rec.camera_id),
        alt_bin=_uniform_bin(rec.altitude_m, *scheme.alt_range, scheme.n_alt_bins),
        angle_bin=_uniform_bin(rec.angle_deg, *scheme.angle_range, scheme.n_angle_bins),
    )


class GeometryEmbedder(nn.Module):
    """Three lookup tables whose selected rows are concatenated into e_geo."""

    def __init__(self, n_cams: int, n_alt: int, n_angle: int,
                 d_cam: int = 16, d_alt: int = 16, d_angle: int = 16,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.table_cam = nn.Parameter(torch.randn(n_cams, d_cam, generator=generator) * 0.02)
        self.table_alt = nn.Parameter(torch.randn(n_alt, d_alt, generator=generator) * 0.02)
        self.table_angle = nn.Parameter(torch.randn(n_angle, d_angle, generator=generator) * 0.02)

    @property
    def d_geo(self) -> int:
        return self.table_cam.shape[1] + self.table_alt.shape[1] + self.table_angle.shape[1]

    def index(self, bins: GeometryBins | Sequence[GeometryBins]) -> torch.Tensor:
        if isinstance(bins, GeometryBins):
            bins = [bins]
        idx = torch.tensor([[b.camera_id, b.alt_bin, b.angle_bin] for b in bins], dtype=torch.long)
        limits = (self.table_cam.shape[0], self.table_alt.shape[0], self.table_angle.shape[0])
        for col, (name, n) in enumerate(zip(("camera", "altitude bin", "angle bin"), limits)):
            bad = (idx[:, col] < 0) | (idx[:, col] >= n)
            if bad.any():
                raise IndexError(f"{name} index {int(idx[bad, col][0])} outside [0, {n})")
        return idx

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        """``idx`` is a (B, 3) long tensor from :meth:`index`; returns (B, d_geo)."""
        return torch.cat([self.table_cam[idx[:, 0]], self.table_alt[idx[:, 1]],
                          self.table_angle[idx[:, 2]]], dim=-1)


def embed_geometry(bins: GeometryBins, emb: GeometryEmbedder) -> torch.Tensor:
    return emb(emb.index(bins))[0]


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTION_KINDS}")


def corrupt(bins_list: Sequence[GeometryBins], spec: CorruptionSpec,
            scheme: BinningScheme) -> list[GeometryBins]:
    """Perturb altitude/angle bins; camera ids are left untouched.

    Query and gallery should be passed as one concatenated sequence so a
    single draw covers both streams.
    """
    if not isinstance(spec, CorruptionSpec):
        raise ConfigError(f"expected CorruptionSpec, got {type(spec).__name__}")
    items = list(bins_list)
    n = len(items)
    if spec.kind == "none" or n == 0:
        return items
    rng = np.random.Generator(np.random.Philox(spec.seed))
    max_alt, max_ang = scheme.n_alt_bins - 1, scheme.n_angle_bins - 1

    def clip(v, hi):
        return int(min(max(v, 0), hi))

    if spec.kind in ("flip_alt", "flip_angle", "joint_flip"):
        d_alt = rng.choice((-1, 1), size=n)
        d_ang = rng.choice((-1, 1), size=n)
        out = []
        for b, da, dg in zip(items, d_alt, d_ang):
            alt = clip(b.alt_bin + da, max_alt) if spec.kind != "flip_angle" else b.alt_bin
            ang = clip(b.angle_bin + dg, max_ang) if spec.kind != "flip_alt" else b.angle_bin
            out.append(replace(b, alt_bin=alt, angle_bin=ang))
        return out
    if spec.kind == "biased_alt_shift":
        return [replace(b, alt_bin=clip(b.alt_bin + 1, max_alt)) for b in items]
    if spec.kind == "stale":
        # previous item in sequence order, wrapping around
        return [replace(b, alt_bin=items[i - 1].alt_bin, angle_bin=items[i - 1].angle_bin)
                for i, b in enumerate(items)]
    # wrong: permute (alt, angle) cells across items
    perm = rng.permutation(n)
    return [replace(b, alt_bin=items[j].alt_bin, angle_bin=items[j].angle_bin)
            for b, j in zip(items, perm)]


# -- metadata files ----------------------------------------------------------

def write_metadata(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_metadata(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            missing = {"id", "camera", "altitude_m", "angle_deg", "view"} - row.keys()
            if missing:
                raise InputError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            if row["view"] not in ("A", "G", "W"):
                raise InputError(f"{path}:{lineno}: view must be A, G or W")
            rows.append(row)
    return rows


def record_from_row(row: dict) -> GeometryRecord:
    return GeometryRecord(camera_id=int(row["camera"]), altitude_m=float(row["altitude_m"]),
                          angle_deg=float(row["angle_deg"]))
