"""Leave-one-speaker-out runs, gradient checks and the JSON run report."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig
from .dataio import (
    ChannelManifest,
    Dataset,
    Fold,
    Standardizer,
    apply_standardizer,
    channel_views,
    fit_standardizer,
    load_features_csv,
    load_manifest,
    make_loso_folds,
    synth_generate,
)
from .metrics import Metrics, compute_metrics
from .model import (
    LOCAL_LAYERS as LOCAL_LAYER_NAMES,
    Architecture,
    MtcAeModel,
    Split,
    TrainConfig,
    backward,
    build_model,
    forward,
    predict,
    train,
)
from .nn_core import numeric_gradient, relative_errors
from .sdae import pretrain_channels

log = logging.getLogger(__name__)

REPORT_NAME = "report.json"
# settings that change how a run executes but never what it computes
EXECUTION_KEYS = ("pretrain_workers", "parallel_folds", "fold_workers")


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class FoldReport:
    index: int
    test_speaker: str
    validation_speaker: str
    status: str = "ok"
    error: str | None = None
    metrics: Metrics | None = None
    best_epoch: int | None = None
    history: dict | None = None
    pretrain_errors: list | None = None  # per channel: final error of each stage
    n_train: int = 0
    n_validation: int = 0
    n_test: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["metrics"] = None if self.metrics is None else self.metrics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FoldReport":
        d = dict(d)
        if d.get("metrics") is not None:
            d["metrics"] = Metrics.from_dict(d["metrics"])
        return cls(**d)


@dataclass
class RunReport:
    config: dict
    seed: int
    folds: list[FoldReport] = field(default_factory=list)
    pooled_metrics: Metrics | None = None
    aggregate_ua: float | None = None
    complete: bool = True
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "folds": [f.to_dict() for f in self.folds],
            "pooled_metrics": None if self.pooled_metrics is None
            else self.pooled_metrics.to_dict(),
            "aggregate_ua": self.aggregate_ua,
            "complete": self.complete,
            "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        pooled = d.get("pooled_metrics")
        return cls(d["config"], d["seed"], [FoldReport.from_dict(f) for f in d["folds"]],
                   None if pooled is None else Metrics.from_dict(pooled),
                   d.get("aggregate_ua"), d.get("complete", True), d.get("wall_clock_s", 0.0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))


def report_config(config: ExperimentConfig) -> dict:
    """Config echo for the report, without output paths and execution settings."""
    d = config.to_dict()
    d.pop("out")
    for key in EXECUTION_KEYS:
        d["run"].pop(key)
    return d


def summarize(folds: list[FoldReport]) -> tuple[Metrics | None, float | None]:
    """Pooled metrics over summed confusions and the mean of fold UAs."""
    done = [f for f in folds if f.status == "ok" and f.metrics is not None]
    if not done:
        return None, None
    pooled = Metrics.from_confusion(sum(f.metrics.confusion for f in done))
    return pooled, float(np.mean([f.metrics.unweighted_accuracy for f in done]))


# ---------------------------------------------------------------------------
# Data and per-fold pipeline
# ---------------------------------------------------------------------------


def prepare_data(config: ExperimentConfig) -> tuple[Dataset, ChannelManifest]:
    if config.data.features:
        dataset = load_features_csv(config.data.features)
        if not config.data.manifest:
            raise ValueError("data.manifest is required with data.features")
        manifest = load_manifest(config.data.manifest, dataset.n_features)
        return dataset, manifest
    if config.synth is None:
        raise ValueError("config names neither data.features nor a [synth] section")
    dataset, manifest = synth_generate(config.synth)
    if config.data.manifest:
        manifest = load_manifest(config.data.manifest, dataset.n_features)
    return dataset, manifest


def _cpu_workers(n: int) -> int:
    return n if n > 0 else (os.cpu_count() or 1)


def fit_pipeline(dataset: Dataset, manifest: ChannelManifest, train_idx, val_idx,
                 config: ExperimentConfig, fold: int = 0, workers: int = 1,
                 init_model: MtcAeModel | None = None):
    """Standardize, pretrain, build and fine-tune on one train/validation split.

    Returns ``(model, standardizer, history, pretrain_errors)``.
    """
    std = fit_standardizer(dataset.features[train_idx])
    x = apply_standardizer(std, dataset.features)
    views = channel_views(x, manifest)
    train_set = Split([v[train_idx] for v in views], dataset.labels[train_idx])
    val_set = Split([v[val_idx] for v in views], dataset.labels[val_idx])

    ft = dataclasses.replace(config.finetune, seed=config.seed)
    pretrain_errors = None
    if init_model is not None:
        model = init_model.copy()
    else:
        stacks = None
        if config.run.pretrain:
            stacks = pretrain_channels(train_set.channels, config.sdae, config.seed, fold,
                                       workers)
            pretrain_errors = [[h[-1] if h else None for h in s.histories] for s in stacks]
        model = build_model(manifest, stacks, ft,
                            np.random.default_rng([config.seed, 0xB1D, fold]),
                            sdae_hidden=config.sdae.hidden, alpha=config.sdae.alpha)
    best, history = train(model, train_set, val_set if len(val_set) else None, ft,
                          np.random.default_rng([config.seed, 0xF1E, fold]))
    return best, std, history, pretrain_errors


def write_model(model: MtcAeModel, path: Path, manifest: ChannelManifest,
                std: Standardizer, config: ExperimentConfig, extra: dict | None = None):
    """Checkpoint plus a ``.meta.json`` sidecar with the input transform."""
    checkpoint.save_checkpoint(model, path)
    meta = {"manifest": manifest.to_dict(), "standardizer": std.to_dict(),
            "gamma": config.finetune.gamma, "local_mean": config.finetune.local_mean}
    meta.update(extra or {})
    Path(str(path) + ".meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")


def run_fold(dataset: Dataset, manifest: ChannelManifest, fold: Fold, index: int,
             config: ExperimentConfig, out_dir: Path | None, workers: int) -> FoldReport:
    train_idx, val_idx, test_idx = fold.indices(dataset.speaker_ids)
    rep = FoldReport(index, fold.test_speaker, fold.validation_speaker,
                     n_train=len(train_idx), n_validation=len(val_idx), n_test=len(test_idx))
    try:
        model, std, history, pre_err = fit_pipeline(dataset, manifest, train_idx, val_idx,
                                                    config, index, workers)
        x_test = apply_standardizer(std, dataset.features[test_idx])
        pred = predict(model, channel_views(x_test, manifest), config.finetune.gamma,
                       config.finetune.local_mean)
        rep.metrics = compute_metrics(pred, dataset.labels[test_idx], model.n_classes)
        rep.best_epoch = history.best_epoch
        rep.history = history.to_dict()
        rep.pretrain_errors = pre_err
        if out_dir is not None and config.run.save_checkpoints:
            write_model(model, out_dir / f"fold{index:02d}.mtca", manifest, std, config,
                        {"test_speaker": fold.test_speaker, "best_epoch": history.best_epoch})
    except Exception as exc:  # recorded in the report; the run continues
        log.exception("fold %d (%s) failed", index, fold.test_speaker)
        rep.status = "failed"
        rep.error = f"{type(exc).__name__}: {exc}"
    return rep


def _fold_job(args):
    config_dict, index, out_dir = args
    config = ExperimentConfig.from_dict(config_dict)
    dataset, manifest = prepare_data(config)
    fold = make_loso_folds(dataset.speaker_ids).folds[index]
    return run_fold(dataset, manifest, fold, index, config,
                    None if out_dir is None else Path(out_dir), 1)


def run_loso(config: ExperimentConfig, out_dir=None) -> RunReport:
    """Full LOSO protocol; writes ``report.json`` (and checkpoints) to ``out_dir``."""
    start = time.perf_counter()
    dataset, manifest = prepare_data(config)
    plan = make_loso_folds(dataset.speaker_ids)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log.info("LOSO: %d utterances, %d features, %d channels, %d folds",
             dataset.n_samples, dataset.n_features, len(manifest), len(plan))

    if config.run.parallel_folds and len(plan) > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(config.to_dict(), k, None if out is None else str(out))
                for k in range(len(plan))]
        with ProcessPoolExecutor(max_workers=_cpu_workers(config.run.fold_workers),
                                 mp_context=mp.get_context("spawn")) as pool:
            folds = list(pool.map(_fold_job, jobs))
    else:
        workers = _cpu_workers(config.run.pretrain_workers)
        folds = []
        for k, fold in enumerate(plan):
            rep = run_fold(dataset, manifest, fold, k, config, out, workers)
            if rep.metrics is not None:
                log.info("fold %d (test %s): UA %.4f, best epoch %s", k, fold.test_speaker,
                         rep.metrics.unweighted_accuracy, rep.best_epoch)
            folds.append(rep)

    pooled, agg = summarize(folds)
    report = RunReport(report_config(config), config.seed, folds, pooled, agg,
                       all(f.status == "ok" for f in folds))
    report.wall_clock_s = time.perf_counter() - start
    if out is not None:
        (out / REPORT_NAME).write_text(report.to_json(), encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

TOY_ARCH = Architecture((8, 8, 8), layer1=8, layer2=8, bottleneck=4, local_hidden=6,
                        global_hidden=10, n_classes=4)


def toy_problem(seed: int = 0, batch: int = 16, arch: Architecture = TOY_ARCH):
    """Random toy model (non-zero biases) with a batch of inputs and labels."""
    rng = np.random.default_rng(seed)
    model = build_model(arch.channel_dims, None,
                        TrainConfig(bottleneck=arch.bottleneck, local_hidden=arch.local_hidden,
                                    global_hidden=arch.global_hidden),
                        rng, sdae_hidden=arch.layer1, alpha=arch.alpha)
    for name, view in model.blocks.items():
        if name.endswith(".bias"):
            view[...] = rng.normal(0.0, 0.1, view.shape)
    x = [rng.standard_normal((batch, d)) for d in arch.channel_dims]
    y = rng.integers(0, arch.n_classes, batch)
    return model, x, y


def reference_joint_loss(model: MtcAeModel, x, y, lam: float) -> np.longdouble:
    """Joint loss recomputed from scratch in extended precision.

    Independent of ``forward``/``dense_forward``; used as the finite-difference
    oracle so that rounding noise stays far below the checked tolerance.
    """
    ld = np.longdouble
    blocks = {k: v.astype(ld) for k, v in model.blocks.items()}
    alpha = ld(model.arch.alpha)

    def act(z):
        return np.where(z >= 0, z, alpha * np.expm1(np.minimum(z, 0)))

    def ce(z):
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(y)), y].mean()

    local_terms, bottlenecks = [], []
    for i, xi in enumerate(x):
        h = np.asarray(xi, dtype=ld)
        for name in LOCAL_LAYER_NAMES[:-1]:
            w, b = blocks[f"local{i:02d}.{name}.weight"], blocks[f"local{i:02d}.{name}.bias"]
            h = act(h @ w.T + b)
            if name == "bottleneck":
                bottlenecks.append(h)
        w, b = blocks[f"local{i:02d}.output.weight"], blocks[f"local{i:02d}.output.bias"]
        local_terms.append(ce(h @ w.T + b))
    g = act(np.concatenate(bottlenecks, axis=1) @ blocks["global.hidden.weight"].T
            + blocks["global.hidden.bias"])
    global_term = ce(g @ blocks["global.output.weight"].T + blocks["global.output.bias"])
    return ld(lam) * global_term + (ld(1) - ld(lam)) * sum(local_terms)


def joint_gradcheck(model: MtcAeModel, x, y, lam: float, eps: float = 1e-5):
    """Per-block max relative error of the joint-loss gradient, plus the raw arrays."""
    analytic = backward(model, forward(model, x), y, lam)
    numeric = numeric_gradient(lambda _p: reference_joint_loss(model, x, y, lam),
                               model.params, eps)
    err = relative_errors(analytic, numeric)
    per_block = {name: float(v.max()) for name, v in model.grad_views(err).items()}
    return per_block, analytic, numeric


def run_gradcheck(seed: int = 0, lambdas=(0.0, 0.1, 0.5, 1.0), eps: float = 1e-5,
                  tol: float = 1e-5) -> dict:
    model, x, y = toy_problem(seed)
    cases = []
    for lam in lambdas:
        per_block, analytic, _ = joint_gradcheck(model, x, y, lam, eps)
        g = model.grad_views(analytic)
        global_abs = max(float(np.abs(v).max()) for k, v in g.items() if k.startswith("global."))
        head_abs = max(float(np.abs(v).max()) for k, v in g.items()
                       if k.startswith("local") and (".hidden." in k or ".output." in k))
        max_err = max(per_block.values())
        cases.append({"lambda": lam, "max_relative_error": max_err, "passed": max_err < tol,
                      "global_grad_max_abs": global_abs, "local_head_grad_max_abs": head_abs,
                      "per_block": per_block})
    return {"seed": seed, "eps": eps, "tolerance": tol, "n_params": int(model.params.size),
            "passed": all(c["passed"] for c in cases), "cases": cases}
