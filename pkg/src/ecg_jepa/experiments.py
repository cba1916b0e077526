"""End-to-end experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import downstream as ds
from .config import ConfigError, ExperimentConfig, SynthRanges
from .ecg import (
    SIDECAR_NAME,
    EcgGroundTruth,
    EcgRecord,
    SyntheticEcgSpec,
    generate_synthetic,
    load_corpus,
    write_ecgb,
    write_sidecar,
)
from .model import JepaModel, ModelConfig
from .patching import patchify
from .training import (
    MaskParams,
    TrainConfig,
    TrainState,
    load_checkpoint,
    pretrain,
)

log = logging.getLogger(__name__)

HR_CLASS_THRESHOLD = 75.0


# --------------------------------------------------------------------------
# synthetic corpora


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


def synth_specs(count: int, ranges: SynthRanges, seed: int, balanced: bool = False,
                lead_count: int = 8) -> list[SyntheticEcgSpec]:
    """Per-record parameters drawn uniformly from ``ranges``.

    With ``balanced`` the heart-rate draw alternates between the two
    class buckets, below and at-or-above 75 bpm.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    hr_lo, hr_hi = ranges.heart_rate_bpm
    if balanced and not hr_lo < HR_CLASS_THRESHOLD <= hr_hi:
        raise ValueError(f"balanced corpus needs the heart-rate range to straddle {HR_CLASS_THRESHOLD:g} bpm")
    rng = np.random.default_rng([seed, 0])
    specs = []
    for i in range(count):
        lo, hi = hr_lo, hr_hi
        if balanced:
            lo, hi = (hr_lo, HR_CLASS_THRESHOLD) if i % 2 == 0 else (HR_CLASS_THRESHOLD, hr_hi)
        draw = {name: rng.uniform(*getattr(ranges, name)) for name in
                ("qrs_duration_ms", "rr_jitter_frac", "noise_std_mv", "baseline_wander_amp_mv")}
        hr = rng.uniform(lo, hi)
        if balanced and i % 2 == 0:
            hr = min(hr, np.nextafter(HR_CLASS_THRESHOLD, 0))
        specs.append(SyntheticEcgSpec(heart_rate_bpm=hr, lead_count=lead_count, **draw))
    return specs


def synth_corpus(count: int, ranges: SynthRanges, seed: int, balanced: bool = False,
                 lead_count: int = 8) -> tuple[list[EcgRecord], list[EcgGroundTruth]]:
    records, truths = [], []
    for i, spec in enumerate(synth_specs(count, ranges, seed, balanced, lead_count)):
        record, truth = generate_synthetic(spec, record_seed(seed, i))
        records.append(record)
        truths.append(truth)
    return records, truths


def write_corpus(out_dir, records: Sequence[EcgRecord], labels: Sequence[dict]) -> list[str]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for i, (record, label) in enumerate(zip(records, labels)):
            name = f"rec_{i:06d}.ecgb"
            write_ecgb(out_dir / name, record)
            names.append(name)
        write_sidecar(out_dir / SIDECAR_NAME, [{"record": n, **lab} for n, lab in zip(names, labels)])
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out_dir}: {exc}") from exc
    return names


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainRun:
    state: TrainState
    epoch_losses: list[float]


def pretrain_records(records: Sequence[EcgRecord], model_config: ModelConfig,
                     train_config: TrainConfig) -> PretrainRun:
    grids = [patchify(r, model_config.patch_len) for r in records]
    losses: list[float] = []
    state = pretrain(train_config, model_config, grids, on_epoch=lambda e, loss: losses.append(loss))
    return PretrainRun(state, losses)


def write_loss_log(path, losses: Sequence[float], config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses, 1):
            writer.writerow([epoch, repr(float(loss))])


def read_loss_log(path) -> list[float]:
    with open(path, encoding="utf-8") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    return [float(row["mean_loss"]) for row in csv.DictReader(rows)]


# --------------------------------------------------------------------------
# evaluation protocols


def labels_from(entries: Sequence[dict], key: str, task: str) -> np.ndarray:
    missing = [i for i, e in enumerate(entries) if key not in e]
    if missing:
        raise ValueError(f"label {key!r} missing for {len(missing)} records (first index {missing[0]})")
    values = [e[key] for e in entries]
    if task == "multiclass":
        return np.asarray(values, dtype=np.int64)
    return np.asarray(values, dtype=np.int64).reshape(len(values), -1)


def _summary(reports: list[ds.MetricsReport]) -> dict:
    """Mean and std across repetitions; repetitions without a defined AUC are skipped."""
    out = {}
    for name in ("macro_auc", "macro_f1"):
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        mean, std = ds.mean_std(values) if values else (None, None)
        out[f"{name}_mean"], out[f"{name}_std"] = mean, std
    return out


def probe_protocol(features, labels, task: str, config: ExperimentConfig, seeds: Sequence[int]) -> dict:
    """One held-out split and one probe per seed (split and head init share the seed)."""
    runs = []
    for seed in seeds:
        train_idx, test_idx = ds.train_test_split(len(labels), config.task.test_fraction, seed)
        probe = ds.train_linear_probe(features[train_idx], labels[train_idx], task,
                                      replace(config.probe, seed=seed))
        report = ds.evaluate(probe.scores(features[test_idx]), labels[test_idx], task)
        runs.append({"seed": seed, **report.to_dict()})
    return {"runs": runs, "summary": _summary([_report(r) for r in runs])}


def lowshot_protocol(features, labels, task: str, config: ExperimentConfig, seed: int) -> dict:
    train_idx, test_idx = ds.train_test_split(len(labels), config.task.test_fraction, seed)
    subsets = ds.lowshot_splits(train_idx, config.task.fraction, config.task.seeds, seed)
    runs = []
    for k, subset in enumerate(subsets):
        probe = ds.train_linear_probe(features[subset], labels[subset], task,
                                      replace(config.probe, seed=seed + k))
        report = ds.evaluate(probe.scores(features[test_idx]), labels[test_idx], task)
        runs.append({"seed": seed + k, "train_size": int(len(subset)), **report.to_dict()})
    return {"fraction": config.task.fraction, "runs": runs, "summary": _summary([_report(r) for r in runs])}


def finetune_protocol(model, records, labels, task: str, config: ExperimentConfig,
                      seeds: Sequence[int], lead_subset=None) -> dict:
    runs = []
    for seed in seeds:
        train_idx, test_idx = ds.train_test_split(len(labels), config.task.test_fraction, seed)
        result = ds.finetune(model, [records[i] for i in train_idx], labels[train_idx], task,
                             replace(config.finetune, seed=seed), lead_subset)
        scores = result.scores([records[i] for i in test_idx], lead_subset)
        runs.append({"seed": seed, **ds.evaluate(scores, labels[test_idx], task).to_dict()})
    return {"runs": runs, "summary": _summary([_report(r) for r in runs])}


def features_protocol(features, entries: Sequence[dict], config: ExperimentConfig, seed: int) -> dict:
    """Ridge regression of heart rate and QRS duration from pooled features."""
    train_idx, test_idx = ds.train_test_split(len(entries), config.task.test_fraction, seed)
    out = {}
    for key in ("heart_rate_bpm", "qrs_duration_ms"):
        targets = np.array([e[key] for e in entries], dtype=np.float64)
        result = ds.feature_regression(features, targets, train_idx, test_idx)
        out[key] = {"mae_mean": result.mae_mean, "mae_std": result.mae_std,
                    "baseline_mae": result.baseline_mae,
                    "ratio": result.mae_mean / result.baseline_mae}
    return out


def _report(run: dict) -> ds.MetricsReport:
    fields = ds.MetricsReport.__dataclass_fields__
    return ds.MetricsReport(**{k: v for k, v in run.items() if k in fields})


# --------------------------------------------------------------------------
# reports


def write_json(path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def fmt_pm(mean, std, digits: int = 3) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def classification_table(rows: Sequence[tuple[str, dict]]) -> str:
    """Rows of (name, summary) laid out as an AUC and F1 results table."""
    width = max(12, *(len(name) for name, _ in rows))
    lines = [f"{'Model':<{width}} | {'AUC':^15} | {'F1':^15}", "-" * (width + 36)]
    for name, s in rows:
        lines.append(f"{name:<{width}} | {fmt_pm(s['macro_auc_mean'], s['macro_auc_std']):^15} | "
                     f"{fmt_pm(s['macro_f1_mean'], s['macro_f1_std']):^15}")
    return "\n".join(lines) + "\n"


def features_table(rows: Sequence[tuple[str, dict]]) -> str:
    """Mean ± std of absolute errors, heart rate in bpm and QRS duration in ms."""
    width = max(12, *(len(name) for name, _ in rows))
    lines = [f"{'Model':<{width}} | {'HR (bpm)':^17} | {'QRS (ms)':^17}", "-" * (width + 40)]
    for name, f in rows:
        hr, qrs = f["heart_rate_bpm"], f["qrs_duration_ms"]
        lines.append(f"{name:<{width}} | {fmt_pm(hr['mae_mean'], hr['mae_std'], 2):^17} | "
                     f"{fmt_pm(qrs['mae_mean'], qrs['mae_std'], 2):^17}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# corpora for a config


def training_corpus(config: ExperimentConfig, seed: int, lead_count: int = 8):
    if config.data.train_dir is not None:
        records, _ = load_corpus(config.data.train_dir)
        return records
    records, _ = synth_corpus(config.data.synth_count, config.synth, seed, lead_count=lead_count)
    return records


def evaluation_corpus(config: ExperimentConfig, seed: int, lead_count: int = 8):
    """Records and label dicts; synthetic ones come from a seed disjoint from pretraining."""
    if config.data.eval_dir is not None:
        return load_corpus(config.data.eval_dir)
    records, truths = synth_corpus(config.data.eval_count, config.synth, seed + 1_000_003,
                                   config.data.balanced_eval, lead_count)
    return records, [t.to_dict() for t in truths]


def load_model(path, expected: ModelConfig | None = None) -> JepaModel:
    ckpt = load_checkpoint(path)
    if expected is not None and ckpt.model_config != expected:
        raise ConfigError([
            f"checkpoint {path} has model config {ckpt.model_config.to_dict()} "
            f"but the experiment expects {expected.to_dict()}"
        ])
    return ckpt.build_model()


# --------------------------------------------------------------------------
# ablations


MASK_RATIO_GRID = (
    ("random", 0.3, 0.4, 1),
    ("random", 0.4, 0.5, 1),
    ("random", 0.5, 0.6, 1),
    ("random", 0.6, 0.7, 1),
    ("random", 0.7, 0.8, 1),
    ("multiblock", 0.10, 0.15, 4),
    ("multiblock", 0.15, 0.20, 4),
    ("multiblock", 0.175, 0.225, 4),
)


def ablation_variants(suite: str, config: ExperimentConfig) -> list[tuple[str, ModelConfig, TrainConfig, int]]:
    """(name, model config, train config, lead count) for every arm of ``suite``."""
    m, t = config.model, config.train
    if suite == "cropa":
        return [("CroPA x", replace(m, use_cropa=False), t, 8), ("CroPA o", replace(m, use_cropa=True), t, 8)]
    if suite == "maskratio":
        return [
            (f"{kind} ({lo:g}, {hi:g}) x{freq}", m,
             replace(t, mask_strategy=kind, mask_params=MaskParams(lo, hi, freq)), 8)
            for kind, lo, hi, freq in MASK_RATIO_GRID
        ]
    if suite == "leads":
        return [("8-Lead", m, t, 8), ("12-Lead", m, t, 12)]
    raise ValueError(f"unknown ablation suite {suite!r}; choose cropa, maskratio or leads")


def run_ablation(suite: str, config: ExperimentConfig, seeds: Sequence[int]) -> dict:
    """Pretrain every arm on the same synthetic source and probe it on the same split."""
    rows = []
    for name, model_cfg, train_cfg, leads in ablation_variants(suite, config):
        reports = []
        for seed in seeds:
            train_records = training_corpus(config, seed, leads)
            run = pretrain_records(train_records, model_cfg, replace(train_cfg, seed=seed))
            records, entries = evaluation_corpus(config, seed, leads)
            features = ds.extract_representations(run.state.model, records, config.data.lead_subset)
            labels = labels_from(entries, config.task.label, config.task.task)
            result = probe_protocol(features, labels, config.task.task, config, [seed])
            reports.append({"seed": seed, "final_loss": run.epoch_losses[-1], **result["runs"][0]})
        rows.append({"name": name, "runs": reports, "summary": _summary([_report(r) for r in reports])})
    return {"suite": suite, "rows": rows}
