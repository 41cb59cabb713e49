"""Command-line entry point: ``mtcae <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, load_config
from .dataio import (
    ChannelManifest,
    Standardizer,
    apply_standardizer,
    channel_views,
    fit_standardizer,
    load_features_csv,
    load_manifest,
    save_manifest,
    synth_generate,
    write_features_csv,
)
from .experiment import fit_pipeline, prepare_data, run_gradcheck, run_loso, write_model
from .metrics import compute_metrics
from .model import build_model, predict
from .sdae import pretrain_channels

log = logging.getLogger("mtcae")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    cfg = _load(args)
    if cfg.synth is None:
        raise ValueError("config has no [synth] section")
    dataset, manifest = synth_generate(cfg.synth)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_features_csv(dataset, out / "features.csv")
    save_manifest(manifest, out / "manifest.json")
    print(f"wrote {dataset.n_samples} x {dataset.n_features} features to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    dataset, manifest = prepare_data(cfg)
    std = fit_standardizer(dataset.features)
    views = channel_views(apply_standardizer(std, dataset.features), manifest)
    workers = cfg.run.pretrain_workers or None
    stacks = pretrain_channels(views, cfg.sdae, cfg.seed, 0, workers or _ncpu())
    model = build_model(manifest, stacks, cfg.finetune, np.random.default_rng([cfg.seed, 0xB1D, 0]),
                        alpha=cfg.sdae.alpha)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_model(model, out / "pretrained.mtca", manifest, std, cfg)
    _write_json(out / "pretrain_history.json",
                {"channels": manifest.names, "histories": [s.histories for s in stacks]})
    print(f"pretrained {len(stacks)} channels -> {out / 'pretrained.mtca'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    dataset, manifest = prepare_data(cfg)
    speakers = dataset.speakers()
    val_spk = cfg.run.validation_speaker or speakers[-1]
    if val_spk not in speakers:
        raise ValueError(f"validation speaker {val_spk!r} not in data")
    val_idx = np.flatnonzero(dataset.speaker_ids == val_spk)
    train_idx = np.flatnonzero(dataset.speaker_ids != val_spk)
    init = checkpoint.load_checkpoint(args.checkpoint) if args.checkpoint else None
    model, std, history, _ = fit_pipeline(dataset, manifest, train_idx, val_idx, cfg, 0,
                                          cfg.run.pretrain_workers or _ncpu(), init)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_model(model, out / "model.mtca", manifest, std, cfg,
                {"validation_speaker": val_spk, "best_epoch": history.best_epoch})
    _write_json(out / "train_history.json", history.to_dict())
    print(f"best epoch {history.best_epoch}, validation UA {history.best_val_ua}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.data:
        raise ValueError("eval needs --checkpoint and --data")
    cfg = _load(args)
    model = checkpoint.load_checkpoint(args.checkpoint)
    meta_path = Path(args.checkpoint + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    dataset = load_features_csv(args.data)
    if args.manifest:
        manifest = load_manifest(args.manifest, dataset.n_features)
    elif "manifest" in meta:
        manifest = ChannelManifest.from_dict(meta["manifest"], dataset.n_features)
    else:
        raise ValueError("no manifest: pass --manifest or keep the checkpoint's .meta.json")
    x = dataset.features
    if "standardizer" in meta:
        x = apply_standardizer(Standardizer.from_dict(meta["standardizer"]), x)
    gamma = meta.get("gamma", cfg.finetune.gamma)
    pred = predict(model, channel_views(x, manifest), gamma, meta.get("local_mean", False))
    metrics = compute_metrics(pred, dataset.labels, model.n_classes).to_dict()
    if args.out is not None:
        _write_json(Path(args.out) / "metrics.json", metrics)
    print(json.dumps(metrics))
    return 0


def cmd_loso(args) -> int:
    cfg = _load(args)
    if args.workers is not None:
        cfg.run.pretrain_workers = args.workers
    if args.parallel_folds:
        cfg.run.parallel_folds = True
    report = run_loso(cfg, cfg.out)
    print(f"aggregate UA {report.aggregate_ua}, pooled UA "
          f"{None if report.pooled_metrics is None else report.pooled_metrics.unweighted_accuracy}"
          f" -> {Path(cfg.out) / 'report.json'}")
    return 0 if report.complete else 1


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    report = run_gradcheck(seed=cfg.seed)
    print(json.dumps(report, indent=1))
    if args.out is not None:
        _write_json(Path(args.out) / "gradcheck.json", report)
    return 0 if report["passed"] else 1


def _ncpu() -> int:
    import os
    return os.cpu_count() or 1


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "loso": cmd_loso,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtcae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name in ("train", "eval"):
            p.add_argument("--checkpoint", help="model checkpoint (.mtca)")
        if name == "eval":
            p.add_argument("--data", help="feature CSV to evaluate")
            p.add_argument("--manifest", help="channel manifest (default: checkpoint sidecar)")
        if name == "loso":
            p.add_argument("--workers", type=int, help="processes for channel pretraining")
            p.add_argument("--parallel-folds", action="store_true")
    return parser


def command_dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        print(f"mtcae {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(command_dispatch())


if __name__ == "__main__":
    main()
