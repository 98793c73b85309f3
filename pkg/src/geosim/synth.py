"""Synthetic aerial/ground benchmark with planted, geometry-dependent low-rank distortions.

Every identity owns a latent vector ``z``. Ground samples show ``z`` on
every patch plus noise. Aerial samples show ``(I + s U_b V_b^T) z`` where
``(U_b, V_b)`` is fixed per (altitude bin, angle bin) cell. The factor pair
of a cell is assembled from an altitude block and an angle block::

    U_b = [Q_alt M | Q_ang M],   V_b = [Q_alt | Q_ang]

Altitude blocks live in the first half of the latent coordinates and angle
blocks in the second half, so the two parts never interact. ``M`` is built
from 2x2 blocks ``(R(90 deg) - I) / 2``: at the reference strength ``s = 2``
each plane is rotated by exactly 90 degrees, which leaves the distribution
of ``z`` unchanged and makes the cell unidentifiable from a single aerial
sample. Every strength gives an invertible map, and a cell never seen in
training shares both of its blocks with seen cells.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .dataset import CrossViewDataset
from .errors import ConfigError
from .geometry import BinningScheme, GeometryRecord


@dataclass(frozen=True)
class SyntheticConfig:
    n_ids: int = 100
    samples_per_id_per_view: int = 4
    latent_dim: int = 8
    patch_count: int = 4
    distortion_rank: int = 4
    distortion_strength: float = 2.0
    noise_std: float = 0.1
    n_alt_bins: int = 3
    n_angle_bins: int = 3
    n_cams: int = 4
    seed: int = 0
    train_fraction: float = 0.5
    holdout_cell: tuple[int, int] | None = None

    def __post_init__(self):
        if not 1 <= self.distortion_rank <= self.latent_dim:
            raise ConfigError("distortion_rank must lie in [1, latent_dim]")
        if self.distortion_rank < 2:
            raise ConfigError("distortion_rank must be >= 2 (one column per geometry axis)")
        if self.distortion_rank - self.distortion_rank // 2 > self.latent_dim - self.latent_dim // 2 \
                or self.distortion_rank // 2 > self.latent_dim // 2:
            raise ConfigError("each geometry axis needs its share of the rank within half the latent dims")
        if self.distortion_strength < 0 or self.noise_std < 0:
            raise ConfigError("strength and noise must be non-negative")
        if self.n_cams < 2:
            raise ConfigError("need at least one ground and one aerial camera")
        n_train = int(round(self.n_ids * self.train_fraction))
        if n_train < 2 or self.n_ids - n_train < 2:
            raise ConfigError(f"split of {self.n_ids} identities leaves fewer than 2 on a side")
        if self.holdout_cell is not None:
            a, g = self.holdout_cell
            if not (0 <= a < self.n_alt_bins and 0 <= g < self.n_angle_bins):
                raise ConfigError(f"holdout cell {self.holdout_cell} outside the bin grid")

    @property
    def scheme(self) -> BinningScheme:
        return BinningScheme(self.n_alt_bins, self.n_angle_bins, (0.0, 45.0), (0.0, 90.0))

    @property
    def ground_cameras(self) -> list[int]:
        return list(range(self.n_cams // 2))

    @property
    def aerial_cameras(self) -> list[int]:
        return list(range(self.n_cams // 2, self.n_cams))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holdout_cell"] = list(self.holdout_cell) if self.holdout_cell else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if d.get("holdout_cell") is not None:
            d["holdout_cell"] = tuple(d["holdout_cell"])
        return cls(**d)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


REFERENCE_STRENGTH = 2.0


def _generator_block(width: int) -> np.ndarray:
    m = np.zeros((width, width))
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])  # R(90 deg)
    for j in range(0, width - 1, 2):
        m[j:j + 2, j:j + 2] = (rot - np.eye(2)) / REFERENCE_STRENGTH
    if width % 2:
        m[-1, -1] = 1.0 / REFERENCE_STRENGTH  # a lone column stretches instead
    return m


def _axis_blocks(cfg: SyntheticConfig, axis: int, n_bins: int, width: int):
    rng = _rng(cfg.seed, 1, axis)
    half = cfg.latent_dim // 2
    lo, hi = (0, half) if axis == 0 else (half, cfg.latent_dim)
    blocks = []
    for _ in range(n_bins):
        q = np.zeros((cfg.latent_dim, width))
        q[lo:hi], _ = np.linalg.qr(rng.standard_normal((hi - lo, width)))
        blocks.append(q)
    return blocks


def distortion_oracle(cfg: SyntheticConfig) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
    """Ground-truth (U_b, V_b) per (alt_bin, angle_bin) cell, each latent_dim x r*."""
    w_alt = cfg.distortion_rank // 2
    w_ang = cfg.distortion_rank - w_alt
    alt = _axis_blocks(cfg, 0, cfg.n_alt_bins, w_alt)
    ang = _axis_blocks(cfg, 1, cfg.n_angle_bins, w_ang)
    m_alt, m_ang = _generator_block(w_alt), _generator_block(w_ang)
    out = {}
    for a in range(cfg.n_alt_bins):
        for g in range(cfg.n_angle_bins):
            u = np.hstack([alt[a] @ m_alt, ang[g] @ m_ang])
            v = np.hstack([alt[a], ang[g]])
            out[(a, g)] = (u, v)
    return out


def distortion_matrix(cfg: SyntheticConfig, cell: tuple[int, int]) -> np.ndarray:
    u, v = distortion_oracle(cfg)[cell]
    return np.eye(cfg.latent_dim) + cfg.distortion_strength * u @ v.T


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between the column spaces of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))[::-1]


def _cell_sample(cell: tuple[int, int], scheme: BinningScheme, rng) -> tuple[float, float]:
    a, g = cell
    lo, hi = scheme.alt_range
    w = (hi - lo) / scheme.n_alt_bins
    alt = lo + w * (a + rng.uniform(0.1, 0.9))
    lo, hi = scheme.angle_range
    w = (hi - lo) / scheme.n_angle_bins
    ang = lo + w * (g + rng.uniform(0.1, 0.9))
    return float(alt), float(ang)


def generate(cfg: SyntheticConfig) -> tuple[CrossViewDataset, CrossViewDataset]:
    """Identity-disjoint (train, test) datasets.

    Aerial cells are assigned round-robin over the bin grid, offset per
    identity. When ``cfg.holdout_cell`` is set, aerial training samples in
    that cell are dropped so it only occurs at test time.
    """
    scheme = cfg.scheme
    factors = distortion_oracle(cfg)
    distort = {cell: np.eye(cfg.latent_dim) + cfg.distortion_strength * u @ v.T
               for cell, (u, v) in factors.items()}
    cells = [(a, g) for a in range(cfg.n_alt_bins) for g in range(cfg.n_angle_bins)]
    n_train = int(round(cfg.n_ids * cfg.train_fraction))
    order = _rng(cfg.seed, 2).permutation(cfg.n_ids)
    train_ids = set(int(i) for i in order[:n_train])

    per_split = {True: ([], [], [], [], []), False: ([], [], [], [], [])}
    k = cfg.samples_per_id_per_view
    for pid in range(cfg.n_ids):
        rng = _rng(cfg.seed, 3, pid)
        z = rng.standard_normal(cfg.latent_dim)
        is_train = pid in train_ids
        patches, ids, views, recs, names = per_split[is_train]
        for j in range(k):
            cam = cfg.ground_cameras[j % len(cfg.ground_cameras)]
            x = z[None, :] + cfg.noise_std * rng.standard_normal((cfg.patch_count, cfg.latent_dim))
            patches.append(x)
            ids.append(pid)
            views.append("G")
            recs.append(GeometryRecord(cam, float(rng.uniform(1.0, 3.0)), float(rng.uniform(0.0, 10.0))))
            names.append(f"id{pid:04d}_G{j}")
        for j in range(k):
            cell = cells[(pid + j) % len(cells)]
            cam = cfg.aerial_cameras[j % len(cfg.aerial_cameras)]
            x = (distort[cell] @ z)[None, :] + cfg.noise_std * rng.standard_normal(
                (cfg.patch_count, cfg.latent_dim))
            alt, ang = _cell_sample(cell, scheme, rng)
            if is_train and cfg.holdout_cell is not None and cell == tuple(cfg.holdout_cell):
                continue
            patches.append(x)
            ids.append(pid)
            views.append("A")
            recs.append(GeometryRecord(cam, alt, ang))
            names.append(f"id{pid:04d}_A{j}")

    def build(split):
        patches, ids, views, recs, names = per_split[split]
        return CrossViewDataset(torch.from_numpy(np.stack(patches)), ids, views, recs, names)

    return build(True), build(False)
