"""Training loop and embedding/evaluation helpers shared by the CLI commands."""

from __future__ import annotations

import json
import math
import shutil
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..dataset import CrossViewDataset, pk_batches, relabel
from ..errors import ConfigError, NumericError
from ..evaluation import EmbeddingSet, ProtocolSpec, RankingReport, evaluate_embeddings
from ..geometry import BinningScheme, CorruptionSpec, GeometryBins, corrupt
from ..losses import compute_losses
from ..model import GeoReidModel, load_checkpoint, save_checkpoint
from ..numerics import cosine_lr, sgd_step, zero_grad
from ..synth import generate
from .config import RunConfig


class TrainingAborted(NumericError):
    """A loss component became non-finite; carries the step and the breakdown."""

    def __init__(self, step: int, parts: dict[str, float]):
        self.step = step
        self.parts = parts
        bad = sorted(k for k, v in parts.items() if not math.isfinite(v))
        super().__init__(f"non-finite loss at step {step} (components {bad}): "
                         + ", ".join(f"{k}={v:.6g}" for k, v in sorted(parts.items())))


@dataclass
class RunReport:
    config: dict
    config_hash: str
    loss_curve: list[dict]
    reports: dict[str, RankingReport] = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        """Everything except wall-clock time, so identical runs serialize identically."""
        return {"config": self.config, "config_hash": self.config_hash,
                "loss_curve": self.loss_curve,
                "reports": {k: v.to_json() for k, v in sorted(self.reports.items())}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


# -- data ------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[CrossViewDataset, CrossViewDataset]:
    if cfg.dataset_path is not None:
        root = Path(cfg.dataset_path)
        return CrossViewDataset.load(root / "train"), CrossViewDataset.load(root / "test")
    return generate(cfg.synthetic_config())


def n_cameras(cfg: RunConfig, *datasets: CrossViewDataset) -> int:
    seen = max(max(d.cameras) for d in datasets if len(d)) + 1
    if cfg.n_cams is not None:
        if cfg.n_cams < seen:
            raise ConfigError(f"n_cams={cfg.n_cams} but camera id {seen - 1} occurs in the data")
        return cfg.n_cams
    if cfg.dataset_path is None:
        return max(seen, cfg.synthetic_config().n_cams)
    return seen


def geometry_index(model: GeoReidModel, bins: Sequence[GeometryBins]) -> torch.Tensor:
    return model.embedder.index(list(bins))


# -- training --------------------------------------------------------------

def build_model(cfg: RunConfig, train: CrossViewDataset, test: CrossViewDataset | None = None) -> GeoReidModel:
    others = [test] if test is not None else []
    mcfg = cfg.model_config(d_in=train.patches.shape[-1], n_ids=len(train.id_set()),
                            n_cams=n_cameras(cfg, train, *others))
    return GeoReidModel(mcfg)


def train_model(cfg: RunConfig, train: CrossViewDataset, test: CrossViewDataset | None = None,
                out_dir: str | Path | None = None, log_every: int = 1):
    """Fit a model on ``train``; returns (model, loss_curve).

    With ``out_dir``, a JSONL loss log is written and a checkpoint is saved
    at the end of every epoch (only the newest ``cfg.keep_checkpoints`` kept).
    """
    torch.manual_seed(cfg.seed)
    scheme = cfg.scheme()
    model = build_model(cfg, train, test)
    labels, _ = relabel(train.ids)
    lab = torch.tensor(labels)
    views = torch.tensor(train.view_codes)
    geo = geometry_index(model, train.bins(scheme))
    params = list(model.parameters())
    no_decay = model.no_decay_parameters()
    sched = cfg.schedule()
    weights = cfg.loss_weights()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    batches = pk_batches(labels, train.views, cfg.p_ids, cfg.k_instances, rng)
    # separate stream so the batch sequence does not depend on geo_shuffle_prob
    shuffle_rng = np.random.Generator(np.random.Philox(key=cfg.seed + 1))
    buffers: dict = {}
    curve: list[dict] = []
    log_fh = None
    ckpt_root = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss_log.jsonl", "w")
        ckpt_root = out_dir / "checkpoints"
    model.train()
    try:
        for it in range(cfg.total_iters):
            idx = next(batches)
            g = geo[idx]
            if cfg.geo_shuffle_prob > 0:
                g = shuffle_geometry(g, geo, cfg.geo_shuffle_prob, shuffle_rng)
            out = model(train.patches[idx], g)
            loss, parts = compute_losses(out, lab[idx], views[idx], weights, cfg.margin,
                                         cfg.label_smoothing, cfg.orth_inner_product, cfg.unit_features)
            values = {k: float(v.detach()) for k, v in parts.items()}
            values["total"] = float(loss.detach())
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingAborted(it, values)
            zero_grad(params)
            loss.backward()
            lr = cosine_lr(sched, it)
            grad_norm = sgd_step(params, lr, cfg.weight_decay, cfg.clip_norm, no_decay,
                                 cfg.momentum, buffers)
            if it % log_every == 0 or it == cfg.total_iters - 1:
                row = {"step": it, "lr": lr, "grad_norm": float(grad_norm), **values}
                curve.append(row)
                if log_fh is not None:
                    log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if ckpt_root is not None and (it + 1) % cfg.iters_per_epoch == 0:
                epoch = (it + 1) // cfg.iters_per_epoch
                save_checkpoint(model, ckpt_root / f"epoch_{epoch:03d}",
                                {"epoch": epoch, "train_ids": sorted(train.id_set())})
                _prune(ckpt_root, cfg.keep_checkpoints)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return model, curve


def shuffle_geometry(batch_geo: torch.Tensor, pool: torch.Tensor, prob: float,
                     rng: np.random.Generator) -> torch.Tensor:
    """Replace each row with a random row of ``pool`` with probability ``prob``."""
    hit = rng.random(len(batch_geo)) < prob
    src = rng.integers(0, len(pool), size=len(batch_geo))
    if not hit.any():
        return batch_geo
    out = batch_geo.clone()
    out[torch.from_numpy(hit)] = pool[torch.from_numpy(src[hit])]
    return out


def _prune(root: Path, keep: int) -> None:
    epochs = sorted(p for p in root.iterdir() if p.name.startswith("epoch_"))
    for old in epochs[:-keep] if keep > 0 else epochs:
        shutil.rmtree(old)


# -- embedding and evaluation ------------------------------------------------

@torch.no_grad()
def embed(model: GeoReidModel, data: CrossViewDataset, scheme: BinningScheme,
          corruption: CorruptionSpec | None = None, batch: int = 256,
          feature: str = "out") -> EmbeddingSet:
    """Embed every sample under its own (optionally corrupted) geometry.

    Metadata in the returned set keeps the true bins so per-bin metrics
    refer to the actual viewing geometry.
    """
    if data.patches.shape[-1] != model.cfg.d_in:
        raise ConfigError(f"dataset patch width {data.patches.shape[-1]} != model d_in {model.cfg.d_in}")
    true_bins = data.bins(scheme)
    used = corrupt(true_bins, corruption, scheme) if corruption is not None else true_bins
    geo = geometry_index(model, used)
    was_training = model.training
    model.eval()
    feats = []
    for s in range(0, len(data), batch):
        o = model(data.patches[s:s + batch], geo[s:s + batch])
        feats.append(getattr(o, feature))
    model.train(was_training)
    return EmbeddingSet(torch.cat(feats), list(data.ids), data.cameras, list(data.views), true_bins)


def evaluate(model: GeoReidModel, data: CrossViewDataset, scheme: BinningScheme, proto: ProtocolSpec,
             corruption: CorruptionSpec | None = None, train_ids: Sequence[int] | None = None,
             min_bin_count: int = 5, batch: int = 256, query_cells: Sequence[tuple[int, int]] | None = None
             ) -> RankingReport:
    """Retrieval report for ``data`` under ``proto``.

    ``query_cells`` restricts the queries to the listed (alt, angle) bins
    while the gallery stays complete.
    """
    if train_ids is not None:
        leaked = set(train_ids) & data.id_set()
        if leaked:
            warnings.warn(f"{len(leaked)} evaluation identities also occur in training", stacklevel=2)
    emb = embed(model, data, scheme, corruption, batch)
    if query_cells is None:
        return evaluate_embeddings(emb, proto, min_bin_count=min_bin_count)
    cells = {tuple(c) for c in query_cells}
    keep = [i for i, (v, b) in enumerate(zip(emb.views, emb.bins))
            if v != proto.query_view or b.cell in cells]
    return evaluate_embeddings(emb.subset(keep), proto, min_bin_count=min_bin_count)


def evaluate_checkpoint(directory: str | Path, data: CrossViewDataset, scheme: BinningScheme,
                        proto: ProtocolSpec, corruption: CorruptionSpec | None = None,
                        min_bin_count: int = 5) -> RankingReport:
    model, manifest = load_checkpoint(directory)
    return evaluate(model, data, scheme, proto, corruption, manifest.get("train_ids"), min_bin_count)


def train(cfg: RunConfig, out_dir: str | Path | None = None,
          data: tuple[CrossViewDataset, CrossViewDataset] | None = None):
    """Train, evaluate every configured protocol on the test split; returns (RunReport, model)."""
    t0 = time.perf_counter()
    train_set, test_set = data if data is not None else load_data(cfg)
    model, curve = train_model(cfg, train_set, test_set, out_dir)
    scheme = cfg.scheme()
    reports = {name: evaluate(model, test_set, scheme, ProtocolSpec.named(name),
                              train_ids=sorted(train_set.id_set()), min_bin_count=cfg.min_bin_count,
                              batch=cfg.eval_batch)
               for name in cfg.protocols}
    rep = RunReport(cfg.to_dict(), cfg.content_hash(), curve, reports, time.perf_counter() - t0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(model, out_dir / "checkpoint",
                        {"train_ids": sorted(train_set.id_set()), "run_config": cfg.to_dict()})
        cfg.save(out_dir / "config.json")
        (out_dir / "report.json").write_text(rep.dumps())
    return rep, model
