"""Retrieval metrics: CMC Rank-k, mAP and per-geometry-bin mAP deltas."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DimensionError, NumericError, ProtocolError
from .geometry import GeometryBins


@dataclass
class EmbeddingSet:
    features: torch.Tensor
    ids: list[int]
    cameras: list[int]
    views: list[str]
    bins: list[GeometryBins]

    def __post_init__(self):
        m = self.features.shape[0]
        if not (len(self.ids) == len(self.cameras) == len(self.views) == len(self.bins) == m):
            raise DimensionError("embedding metadata lengths disagree with feature rows")

    def subset(self, index: Sequence[int]) -> "EmbeddingSet":
        index = list(index)
        return EmbeddingSet(self.features[index], [self.ids[i] for i in index],
                            [self.cameras[i] for i in index], [self.views[i] for i in index],
                            [self.bins[i] for i in index])


@dataclass(frozen=True)
class ProtocolSpec:
    query_view: str = "A"
    gallery_view: str = "G"
    exclude_same_camera: bool = True
    rank_depths: tuple[int, ...] = (1, 5, 10)

    @classmethod
    def named(cls, name: str, **kw) -> "ProtocolSpec":
        table = {"a2g": ("A", "G"), "g2a": ("G", "A"), "a2a": ("A", "A"), "g2g": ("G", "G"),
                 "a2w": ("A", "W"), "w2a": ("W", "A")}
        if name not in table:
            raise ProtocolError(f"unknown protocol {name!r}")
        q, g = table[name]
        return cls(q, g, **kw)

    @property
    def name(self) -> str:
        return f"{self.query_view.lower()}2{self.gallery_view.lower()}"


@dataclass
class RankingReport:
    cmc: dict[int, float]
    map: float
    n_queries: int
    n_skipped: int
    per_bin_map: dict[tuple[int, int], float] = field(default_factory=dict)
    per_bin_count: dict[tuple[int, int], int] = field(default_factory=dict)
    delta_map: dict[tuple[int, int], float] = field(default_factory=dict)
    low_support: list[tuple[int, int]] = field(default_factory=list)
    ap: list[float] = field(default_factory=list)

    @property
    def rank1(self) -> float:
        return self.cmc[1]

    def to_json(self) -> dict:
        def key(b):
            return f"{b[0]},{b[1]}"
        return {
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "mAP": self.map, "n_queries": self.n_queries, "n_skipped": self.n_skipped,
            "per_bin_map": {key(b): v for b, v in sorted(self.per_bin_map.items())},
            "per_bin_count": {key(b): v for b, v in sorted(self.per_bin_count.items())},
            "delta_map": {key(b): v for b, v in sorted(self.delta_map.items())},
            "low_support": [key(b) for b in sorted(self.low_support)],
        }


def distance_matrix(q: EmbeddingSet | torch.Tensor, g: EmbeddingSet | torch.Tensor,
                    metric: str = "cosine") -> torch.Tensor:
    """Cosine distance ``1 - cos`` (default) or Euclidean distance between rows."""
    qf = q.features if isinstance(q, EmbeddingSet) else q
    gf = g.features if isinstance(g, EmbeddingSet) else g
    if qf.shape[-1] != gf.shape[-1]:
        raise DimensionError(f"feature widths differ: {qf.shape[-1]} vs {gf.shape[-1]}")
    qf, gf = qf.detach().to(torch.float64), gf.detach().to(torch.float64)
    if metric == "euclidean":
        return torch.cdist(qf, gf)
    if metric != "cosine":
        raise ValueError(f"unknown metric {metric!r}")
    for name, f in (("query", qf), ("gallery", gf)):
        norms = f.norm(dim=1)
        bad = torch.nonzero(norms == 0)
        if len(bad):
            raise NumericError(f"{name} row {int(bad[0])} has zero norm")
    qn = qf / qf.norm(dim=1, keepdim=True)
    gn = gf / gf.norm(dim=1, keepdim=True)
    return 1.0 - qn @ gn.T


def average_precision(relevant: np.ndarray) -> float:
    """AP of a ranked 0/1 relevance vector (mean precision at each hit)."""
    hits = np.flatnonzero(relevant)
    if hits.size == 0:
        return 0.0
    return float(np.mean((np.arange(hits.size) + 1) / (hits + 1)))


def _rank_query(dist_row, q_id, q_cam, g_ids, g_cams, exclude_same_camera, self_col=None):
    order = np.argsort(dist_row, kind="stable")
    if self_col is not None:
        order = order[order != self_col]
    if exclude_same_camera:
        # standard junk rule: same identity seen by the same camera
        order = order[~((g_ids[order] == q_id) & (g_cams[order] == q_cam))]
    return (g_ids[order] == q_id).astype(np.int8)


def cmc_map(dist, q_meta: EmbeddingSet, g_meta: EmbeddingSet, proto: ProtocolSpec = ProtocolSpec(),
            min_bin_count: int = 5, same_pool: bool = False) -> RankingReport:
    """CMC@k and mAP over queries with at least one valid positive.

    Gallery rows are sorted by distance with index order breaking ties.
    Queries lacking a valid positive are skipped and counted. With
    ``same_pool`` query ``i`` is gallery item ``i`` and never retrieves itself.
    """
    dist = np.asarray(dist.detach() if isinstance(dist, torch.Tensor) else dist, dtype=np.float64)
    if dist.shape != (len(q_meta.ids), len(g_meta.ids)):
        raise DimensionError(f"distance matrix {dist.shape} vs {len(q_meta.ids)}x{len(g_meta.ids)}")
    if dist.shape[1] == 0:
        raise ProtocolError("empty gallery")
    g_ids = np.asarray(g_meta.ids)
    g_cams = np.asarray(g_meta.cameras)
    depths = sorted(set(proto.rank_depths))
    hits_at = {k: 0 for k in depths}
    aps, valid_bins = [], []
    skipped = 0
    for i in range(dist.shape[0]):
        rel = _rank_query(dist[i], q_meta.ids[i], q_meta.cameras[i], g_ids, g_cams,
                          proto.exclude_same_camera, i if same_pool else None)
        if rel.size == 0:
            raise ProtocolError(f"query {i}: gallery empty after filtering")
        if not rel.any():
            skipped += 1
            continue
        first = int(np.argmax(rel))
        for k in depths:
            hits_at[k] += first < k
        aps.append(average_precision(rel))
        valid_bins.append(q_meta.bins[i].cell)
    n = len(aps)
    if n == 0:
        raise ProtocolError("no query has a valid positive in the gallery")
    rep = RankingReport(cmc={k: hits_at[k] / n for k in depths}, map=float(np.mean(aps)),
                        n_queries=n, n_skipped=skipped, ap=aps)
    per_bin, counts, delta, low = binned_delta_map(aps, valid_bins, rep.map, min_bin_count)
    rep.per_bin_map, rep.per_bin_count, rep.delta_map, rep.low_support = per_bin, counts, delta, low
    return rep


def binned_delta_map(aps: Sequence[float], cells: Sequence[tuple[int, int]], overall_map: float,
                     min_count: int = 5):
    """Group per-query APs by (alt_bin, angle_bin); returns (mAP, count, delta, low-support bins)."""
    groups: dict[tuple[int, int], list[float]] = {}
    for ap, c in zip(aps, cells):
        groups.setdefault(tuple(c), []).append(ap)
    per_bin = {c: float(np.mean(v)) for c, v in sorted(groups.items())}
    counts = {c: len(v) for c, v in sorted(groups.items())}
    delta = {c: m - overall_map for c, m in per_bin.items()}
    low = [c for c, n in counts.items() if n < min_count]
    return per_bin, counts, delta, low


def evaluate_embeddings(emb: EmbeddingSet, proto: ProtocolSpec, metric: str = "cosine",
                        min_bin_count: int = 5) -> RankingReport:
    q_idx = [i for i, v in enumerate(emb.views) if v == proto.query_view]
    g_idx = [i for i, v in enumerate(emb.views) if v == proto.gallery_view]
    if not q_idx or not g_idx:
        raise ProtocolError(f"protocol {proto.name}: empty query or gallery selection")
    q, g = emb.subset(q_idx), emb.subset(g_idx)
    return cmc_map(distance_matrix(q, g, metric), q, g, proto, min_bin_count,
                   same_pool=proto.query_view == proto.gallery_view)


def write_report(rep: RankingReport, directory: str | Path, stem: str = "report") -> None:
    """JSON document plus CSVs of the CMC curve and per-bin table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{stem}.json").write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True))
    with open(directory / f"{stem}_cmc.csv", "w") as fh:
        fh.write("rank,cmc\n")
        for k, v in sorted(rep.cmc.items()):
            fh.write(f"{k},{v!r}\n")
    with open(directory / f"{stem}_bins.csv", "w") as fh:
        fh.write("alt_bin,angle_bin,count,map,delta_map,low_support\n")
        for b in sorted(rep.per_bin_map):
            fh.write(f"{b[0]},{b[1]},{rep.per_bin_count[b]},{rep.per_bin_map[b]!r},"
                     f"{rep.delta_map[b]!r},{int(b in rep.low_support)}\n")
