"""Multi-run analyses: sensitivity sweeps, ablations, corruption tables, spectra and dataset emission."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import torch

from ..analysis import SpectrumReport, covariance, spectrum
from ..dataset import CrossViewDataset
from ..errors import ConfigError, InputError
from ..evaluation import EmbeddingSet, ProtocolSpec, evaluate_embeddings
from ..geometry import CORRUPTION_KINDS, BinningScheme, CorruptionSpec
from ..model import GeoReidModel
from ..numerics import save_tns
from ..synth import SyntheticConfig, distortion_oracle, generate
from .config import RunConfig
from .training import embed, evaluate, load_data, train

SWEEP_AXES = {"rank": "rank", "prompt_len": "prompt_len", "prompt_alpha": "prompt_alpha_init",
              "hidden_dim": "predictor_hidden"}

ABLATION_ROWS = (("baseline", False, False), ("+gcpg", True, False), ("+giqt", False, True),
                 ("+both", True, True))


def write_rows(rows: Sequence[dict], path: str | Path) -> None:
    if not rows:
        raise InputError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _primary(cfg: RunConfig) -> str:
    return cfg.protocols[0]


def sweep(cfg: RunConfig, axis: str, values: Iterable, data=None) -> list[dict]:
    """Train and evaluate once per value of ``axis``; seed and data stay fixed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    data = data if data is not None else load_data(cfg)
    key = SWEEP_AXES[axis]
    rows = []
    for value in values:
        run_cfg = cfg.with_overrides({key: value})
        rep, _ = train(run_cfg, data=data)
        r = rep.reports[_primary(cfg)]
        rows.append({axis: value, "protocol": _primary(cfg), "rank1": r.rank1, "mAP": r.map})
    return rows


def ablate(cfg: RunConfig, retrain: bool = True, data=None) -> list[dict]:
    """Four rows: baseline, +GCPG, +GIQT, +both.

    With ``retrain`` each variant is trained with its components switched
    off; otherwise one full model is trained and components are disabled at
    inference only.
    """
    data = data if data is not None else load_data(cfg)
    _, test = data
    scheme = cfg.scheme()
    proto = ProtocolSpec.named(_primary(cfg))
    full_model = None
    if not retrain:
        _, full_model = train(cfg.with_overrides({"use_gcpg": True, "use_giqt": True}), data=data)
    rows = []
    for name, gcpg, giqt in ABLATION_ROWS:
        if retrain:
            _, model = train(cfg.with_overrides({"use_gcpg": gcpg, "use_giqt": giqt}), data=data)
        else:
            model = full_model
            model.set_ablation(gcpg, giqt)
        if not gcpg and not giqt:
            assert_geometry_invariant(model, test, scheme)
        r = evaluate(model, test, scheme, proto, min_bin_count=cfg.min_bin_count)
        rows.append({"variant": name, "gcpg": gcpg, "giqt": giqt, "protocol": proto.name,
                     "rank1": r.rank1, "mAP": r.map})
    if full_model is not None:
        full_model.set_ablation(True, True)
    return rows


def assert_geometry_invariant(model: GeoReidModel, data: CrossViewDataset, scheme: BinningScheme) -> None:
    """Embeddings must not change when every geometry bin is replaced."""
    a = embed(model, data, scheme).features
    b = embed(model, data, scheme, CorruptionSpec("wrong", seed=12345)).features
    c = embed(model, data, scheme, CorruptionSpec("biased_alt_shift")).features
    if not (torch.equal(a, b) and torch.equal(a, c)):
        raise AssertionError("geometry-ablated model still depends on geometry")


def corruption_table(model: GeoReidModel, data: CrossViewDataset, scheme: BinningScheme,
                     proto: ProtocolSpec, kinds: Sequence[str] = CORRUPTION_KINDS, seed: int = 0,
                     min_bin_count: int = 5) -> list[dict]:
    rows = []
    for kind in kinds:
        spec = CorruptionSpec(kind, seed)
        r = evaluate(model, data, scheme, proto, spec if kind != "none" else None,
                     min_bin_count=min_bin_count)
        rows.append({"corruption": kind, "protocol": proto.name, "rank1": r.rank1, "mAP": r.map})
    return rows


def view_covariances(emb: EmbeddingSet, views=("A", "G")):
    out = []
    for v in views:
        idx = [i for i, x in enumerate(emb.views) if x == v]
        if len(idx) < 2:
            raise InputError(f"need at least 2 samples of view {v}")
        out.append(covariance(emb.features[idx]))
    return out


def feature_spectrum(data: CrossViewDataset, scheme: BinningScheme, model: GeoReidModel | None = None,
                     ks: Sequence[int] = (8, 16), feature: str = "out") -> SpectrumReport:
    """Spectrum of Sigma_A - Sigma_G over model features, or over raw patch means without a model."""
    if model is None:
        emb = EmbeddingSet(data.patches.mean(dim=1), list(data.ids), data.cameras, list(data.views),
                           data.bins(scheme))
    else:
        emb = embed(model, data, scheme, feature=feature)
    sigma_a, sigma_g = view_covariances(emb)
    return spectrum(sigma_a, sigma_g, ks)


def raw_cosine_report(data: CrossViewDataset, scheme: BinningScheme, proto: ProtocolSpec = ProtocolSpec()):
    """Retrieval with cosine similarity on patch means (no model)."""
    emb = EmbeddingSet(data.patches.mean(dim=1), list(data.ids), data.cameras, list(data.views),
                       data.bins(scheme))
    return evaluate_embeddings(emb, proto)


def emit_synthetic(cfg: SyntheticConfig, out_dir: str | Path) -> dict:
    """Write train/test splits, the ground-truth factors and a raw-cosine calibration summary."""
    out_dir = Path(out_dir)
    train_set, test_set = generate(cfg)
    train_set.save(out_dir / "train")
    test_set.save(out_dir / "test")
    factors_dir = out_dir / "factors"
    factors_dir.mkdir(parents=True, exist_ok=True)
    for (a, g), (u, v) in sorted(distortion_oracle(cfg).items()):
        save_tns(torch.from_numpy(u), factors_dir / f"U_{a}_{g}.tns")
        save_tns(torch.from_numpy(v), factors_dir / f"V_{a}_{g}.tns")
    rep = raw_cosine_report(test_set, cfg.scheme)
    summary = {"config": cfg.to_dict(), "n_train": len(train_set), "n_test": len(test_set),
               "raw_cosine_a2g": {"rank1": rep.rank1, "mAP": rep.map}}
    (out_dir / "synthetic.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
