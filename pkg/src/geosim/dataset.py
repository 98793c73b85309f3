"""Labeled cross-view sample collections and their on-disk format.

A dataset directory holds ``patches.tns`` with shape (M, n_patches, d_in)
and ``metadata.jsonl`` with one line per sample, in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InputError
from .geometry import (BinningScheme, GeometryBins, GeometryRecord, bin_geometry,
                       read_metadata, record_from_row, write_metadata)
from .numerics import load_tns, save_tns

VIEW_CODES = {"A": 0, "G": 1, "W": 2}


@dataclass
class CrossViewDataset:
    patches: torch.Tensor
    ids: list[int]
    views: list[str]
    records: list[GeometryRecord]
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        m = self.patches.shape[0]
        if not (len(self.ids) == len(self.views) == len(self.records) == m):
            raise InputError("patches, ids, views and geometry must have equal length")
        if not self.sample_ids:
            self.sample_ids = [f"s{i:06d}" for i in range(m)]

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def cameras(self) -> list[int]:
        return [r.camera_id for r in self.records]

    @property
    def view_codes(self) -> list[int]:
        return [VIEW_CODES[v] for v in self.views]

    def bins(self, scheme: BinningScheme) -> list[GeometryBins]:
        return [bin_geometry(r, scheme) for r in self.records]

    def subset(self, index: Sequence[int]) -> "CrossViewDataset":
        index = list(index)
        return CrossViewDataset(
            patches=self.patches[index] if index else self.patches[:0],
            ids=[self.ids[i] for i in index], views=[self.views[i] for i in index],
            records=[self.records[i] for i in index],
            sample_ids=[self.sample_ids[i] for i in index])

    def select_views(self, views: str | Sequence[str]) -> list[int]:
        views = {views} if isinstance(views, str) else set(views)
        return [i for i, v in enumerate(self.views) if v in views]

    def id_set(self) -> set[int]:
        return set(self.ids)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_tns(self.patches, directory / "patches.tns")
        write_metadata(directory / "metadata.jsonl", (
            {"id": sid, "person": pid, "camera": r.camera_id, "altitude_m": r.altitude_m,
             "angle_deg": r.angle_deg, "view": v}
            for sid, pid, r, v in zip(self.sample_ids, self.ids, self.records, self.views)))

    @classmethod
    def load(cls, directory: str | Path) -> "CrossViewDataset":
        directory = Path(directory)
        patches = load_tns(directory / "patches.tns")
        rows = read_metadata(directory / "metadata.jsonl")
        if patches.dim() != 3 or patches.shape[0] != len(rows):
            raise InputError(f"{directory}: patches {tuple(patches.shape)} vs {len(rows)} metadata rows")
        return cls(patches=patches, ids=[int(r.get("person", r["id"])) for r in rows],
                   views=[r["view"] for r in rows], records=[record_from_row(r) for r in rows],
                   sample_ids=[str(r["id"]) for r in rows])


def relabel(ids: Sequence[int]) -> tuple[list[int], dict[int, int]]:
    """Map arbitrary identity labels to 0..C-1 in sorted order."""
    mapping = {pid: k for k, pid in enumerate(sorted(set(ids)))}
    return [mapping[p] for p in ids], mapping


def pk_batches(ids: Sequence[int], views: Sequence[str], p: int, k: int,
               rng: np.random.Generator):
    """Endless P x K batch index generator.

    The K slots of an identity cycle through its views, so a batch holds both
    views of every identity that has them. Within one view, instances are
    drawn without replacement unless the pool is smaller than the demand.
    """
    by_id: dict[int, dict[str, list[int]]] = {}
    for i, (pid, v) in enumerate(zip(ids, views)):
        by_id.setdefault(pid, {}).setdefault(v, []).append(i)
    pids = sorted(by_id)
    if len(pids) < p:
        raise InputError(f"need at least {p} identities per batch, have {len(pids)}")
    while True:
        chosen = rng.choice(len(pids), size=p, replace=False)
        batch = []
        for c in chosen:
            groups = by_id[pids[c]]
            vs = sorted(groups)
            slots = [vs[j % len(vs)] for j in range(k)]
            drawn = {}
            for v in vs:
                need = slots.count(v)
                pool = groups[v]
                drawn[v] = list(rng.choice(pool, size=need, replace=need > len(pool)))
            batch.extend(int(drawn[v].pop()) for v in slots)
        yield batch
