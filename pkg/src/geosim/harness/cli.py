"""Command-line entry point: ``geosim <command> [options]``.

Every command writes into ``--out`` and finishes by writing
``manifest.json`` there, listing the produced files with their SHA-256.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import torch

from .. import __version__
from ..analysis import write_spectrum_csv
from ..errors import ConfigError, GeosimError
from ..evaluation import ProtocolSpec, write_report
from ..geometry import CORRUPTION_KINDS, CorruptionSpec
from ..model import load_checkpoint
from ..synth import SyntheticConfig
from . import plots
from .config import PRESETS, RunConfig, parse_value, preset
from .runs import (SWEEP_AXES, ablate, corruption_table, emit_synthetic, feature_spectrum, sweep,
                   write_rows)
from .training import evaluate, load_data, train


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else preset(args.preset)
    if args.config and args.preset != "default":
        cfg = cfg.with_overrides(PRESETS[args.preset])
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v.strip())
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "rank", None) is not None:
        overrides["rank"] = args.rank
    if getattr(args, "protocol", None):
        overrides["protocols"] = list(args.protocol)
    return cfg.with_overrides(overrides) if overrides else cfg


def _checkpoint_context(args):
    """Model, its run config and the evaluation split for checkpoint-based commands."""
    model, manifest = load_checkpoint(args.checkpoint)
    if "run_config" in manifest:
        cfg = RunConfig.from_dict(manifest["run_config"])
    else:
        cfg = _run_config(args)
    if args.data:
        cfg = cfg.with_overrides({"dataset_path": args.data})
    if getattr(args, "protocol", None):
        cfg = cfg.with_overrides({"protocols": list(args.protocol)})
    _, test = load_data(cfg)
    return model, manifest, cfg, test


def _write_manifest(out: Path, command: str, started: float, extra: dict | None = None) -> None:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"command": command, "argv": sys.argv[1:], "version": __version__,
                "python": platform.python_version(), "torch": torch.__version__,
                "wall_clock_s": round(time.perf_counter() - started, 3), "files": files}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_train(args, out: Path) -> dict:
    cfg = _run_config(args)
    rep, _ = train(cfg, out)
    for name, r in rep.reports.items():
        write_report(r, out, f"eval_{name}")
        sch = cfg.scheme()
        plots.bin_delta_map(r, sch.n_alt_bins, sch.n_angle_bins, out / f"eval_{name}_bins.png")
        print(f"{name}: Rank-1 {100 * r.rank1:.2f}  mAP {100 * r.map:.2f}")
    plots.loss_curve(rep.loss_curve, out / "loss_curve.png")
    return {"config_hash": rep.config_hash}


def cmd_eval(args, out: Path) -> dict:
    model, manifest, cfg, test = _checkpoint_context(args)
    spec = CorruptionSpec(args.corruption, args.corruption_seed) if args.corruption != "none" else None
    sch = cfg.scheme()
    for name in cfg.protocols:
        r = evaluate(model, test, sch, ProtocolSpec.named(name), spec, manifest.get("train_ids"),
                     cfg.min_bin_count, cfg.eval_batch)
        write_report(r, out, f"eval_{name}")
        plots.bin_delta_map(r, sch.n_alt_bins, sch.n_angle_bins, out / f"eval_{name}_bins.png")
        print(f"{name}: Rank-1 {100 * r.rank1:.2f}  mAP {100 * r.map:.2f}")
    return {"checkpoint": str(args.checkpoint), "corruption": args.corruption}


def cmd_corrupt(args, out: Path) -> dict:
    model, _, cfg, test = _checkpoint_context(args)
    kinds = args.corruption or list(CORRUPTION_KINDS)
    rows = corruption_table(model, test, cfg.scheme(), ProtocolSpec.named(cfg.protocols[0]), kinds,
                            args.corruption_seed, cfg.min_bin_count)
    write_rows(rows, out / "corruption.csv")
    plots.bar_table(rows, "corruption", out / "corruption.png", "inference-time geometry corruption")
    for r in rows:
        print(f"{r['corruption']:>16}: Rank-1 {100 * r['rank1']:.2f}  mAP {100 * r['mAP']:.2f}")
    return {"checkpoint": str(args.checkpoint)}


def cmd_sweep(args, out: Path) -> dict:
    cfg = _run_config(args)
    values = [parse_value(v) for v in args.values.split(",")]
    rows = sweep(cfg, args.axis, values)
    write_rows(rows, out / f"sweep_{args.axis}.csv")
    plots.sweep_curve(rows, args.axis, out / f"sweep_{args.axis}.png")
    for r in rows:
        print(f"{args.axis}={r[args.axis]}: Rank-1 {100 * r['rank1']:.2f}  mAP {100 * r['mAP']:.2f}")
    return {"config_hash": cfg.content_hash(), "axis": args.axis}


def cmd_ablate(args, out: Path) -> dict:
    cfg = _run_config(args)
    rows = ablate(cfg, retrain=not args.inference_only)
    write_rows(rows, out / "ablation.csv")
    plots.bar_table(rows, "variant", out / "ablation.png", "component ablation")
    for r in rows:
        print(f"{r['variant']:>9}: Rank-1 {100 * r['rank1']:.2f}  mAP {100 * r['mAP']:.2f}")
    return {"config_hash": cfg.content_hash()}


def cmd_spectrum(args, out: Path) -> dict:
    if args.checkpoint:
        model, _, cfg, test = _checkpoint_context(args)
    else:
        model = None
        cfg = _run_config(args)
        if args.data:
            cfg = cfg.with_overrides({"dataset_path": args.data})
        _, test = load_data(cfg)
    ks = [int(k) for k in args.ks.split(",")]
    rep = feature_spectrum(test, cfg.scheme(), model, ks)
    write_spectrum_csv(rep, out / "spectrum.csv")
    plots.spectrum_energy(rep, out / "spectrum.png", ks)
    for k in ks:
        print(f"top-{k} cumulative energy: {rep.energy_at(k):.4f}")
    return {"source": "model" if model is not None else "raw", "top_k_energy": rep.top_k_energy}


def cmd_synth(args, out: Path) -> dict:
    d = {}
    for item in args.set or []:
        k, v = item.split("=", 1)
        d[k.strip().removeprefix("synthetic.")] = parse_value(v.strip())
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SyntheticConfig.from_dict(d)
    summary = emit_synthetic(cfg, out)
    raw = summary["raw_cosine_a2g"]
    print(f"wrote {summary['n_train']} train / {summary['n_test']} test samples; "
          f"raw cosine A->G Rank-1 {100 * raw['rank1']:.2f}  mAP {100 * raw['mAP']:.2f}")
    return {}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geosim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if config:
            p.add_argument("--config", type=Path, help="JSON or TOML run config")
            p.add_argument("--preset", default="default", choices=sorted(PRESETS))
            p.add_argument("--rank", type=int)
            p.add_argument("--protocol", action="append", choices=["a2g", "g2a", "a2a"])

    def from_checkpoint(p, required=True):
        p.add_argument("--checkpoint", type=Path, required=required)
        p.add_argument("--data", help="dataset directory with train/ and test/ (default: from the checkpoint)")

    p = sub.add_parser("train", help="train a model and evaluate it")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    from_checkpoint(p)
    p.add_argument("--corruption", default="none", choices=CORRUPTION_KINDS)
    p.add_argument("--corruption-seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("corrupt", help="evaluate a checkpoint under geometry corruptions")
    common(p)
    from_checkpoint(p)
    p.add_argument("--corruption", action="append", choices=CORRUPTION_KINDS,
                   help="kinds to run (default: all)")
    p.add_argument("--corruption-seed", type=int, default=0)
    p.set_defaults(fn=cmd_corrupt)

    p = sub.add_parser("sweep", help="sensitivity sweep over one hyperparameter")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="baseline / +GCPG / +GIQT / +both table")
    common(p)
    p.add_argument("--inference-only", action="store_true",
                   help="train one full model and switch components off at inference")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("spectrum", help="cumulative spectral energy of the cross-view covariance gap")
    common(p)
    from_checkpoint(p, required=False)
    p.add_argument("--ks", default="8,16")
    p.set_defaults(fn=cmd_spectrum)

    p = sub.add_parser("synth", help="write a synthetic benchmark to disk")
    common(p, config=False)
    p.set_defaults(fn=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    try:
        extra = args.fn(args, out)
    except GeosimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _write_manifest(out, args.command, started, extra)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
