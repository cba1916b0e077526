"""Frozen-feature extraction, linear probes, fine-tuning, regression and metrics."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ecg import CANONICAL_LEADS, EcgRecord, round_half_away
from .model import Encoder, JepaModel
from .patching import patchify
from .training import (
    ADAM_BETAS,
    ADAM_EPS,
    epoch_order,
    lr_at,
    param_groups,
    scaled_finetune_lr,
    steps_per_epoch,
)

TASKS = ("multiclass", "multilabel")


def pooled_representation(reps):
    """Mean over the lead and time axes of a (..., L, N, D) grid."""
    if torch.is_tensor(reps):
        return reps.mean(dim=(-3, -2))
    return np.asarray(reps).mean(axis=(-3, -2))


def lead_positions(lead_ids: Sequence[str]) -> np.ndarray:
    """Positional lead index of each lead in the canonical 12-lead order."""
    return np.array([CANONICAL_LEADS.index(lead) for lead in lead_ids])


def _restrict(record: EcgRecord, lead_subset) -> EcgRecord:
    if lead_subset is None:
        return record
    unknown = [lead for lead in lead_subset if lead not in record.lead_ids]
    if unknown:
        raise ValueError(f"lead subset names leads absent from the record: {', '.join(unknown)}")
    ordered = sorted(set(lead_subset), key=CANONICAL_LEADS.index)
    return record.select(ordered)


def _encoder_of(model) -> Encoder:
    return model.student if isinstance(model, JepaModel) else model


def _record_batches(records, lead_subset, patch_len, batch_size):
    """Yield (patches tensor, lead positions) for consecutive records of equal shape."""
    chunk, key = [], None
    for record in records:
        r = _restrict(record, lead_subset)
        grid = patchify(r, patch_len).patches
        k = (r.lead_ids, grid.shape)
        if chunk and (k != key or len(chunk) == batch_size):
            yield np.stack(chunk), lead_positions(key[0])
            chunk = []
        chunk.append(grid)
        key = k
    if chunk:
        yield np.stack(chunk), lead_positions(key[0])


@torch.no_grad()
def extract_representations(model, records: Sequence[EcgRecord], lead_subset=None,
                            batch_size: int = 32) -> np.ndarray:
    """Pooled student features (n, D) with no masking, in record order."""
    encoder = _encoder_of(model)
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = []
    for patches, lead_pos in _record_batches(records, lead_subset, encoder.config.patch_len, batch_size):
        x = torch.as_tensor(patches, dtype=dtype)
        reps = encoder(x, lead_pos, np.arange(x.shape[2]))
        out.append(pooled_representation(reps).double().numpy())
    encoder.train(was_training)
    return np.concatenate(out)


# --------------------------------------------------------------------------
# heads and training

@dataclass(frozen=True)
class ProbeConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 32
    epochs: int = 10
    warmup_epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        _check_schedule(self, "probe", self.learning_rate)


def _check_schedule(cfg, section: str, lr: float) -> None:
    problems = []
    if not lr > 0:
        problems.append(f"{section}: learning rate must be > 0")
    if cfg.weight_decay < 0:
        problems.append(f"{section}.weight_decay must be >= 0")
    if cfg.batch_size < 1:
        problems.append(f"{section}.batch_size must be >= 1")
    if not 0 <= cfg.warmup_epochs < cfg.epochs:
        problems.append(f"{section}: need 0 <= warmup_epochs < epochs")
    if problems:
        raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class FinetuneConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 16
    epochs: int = 10
    warmup_epochs: int = 3
    seed: int = 0
    scale_lr: bool = True
    encoder_lr_scale: float = 1.0

    def __post_init__(self):
        _check_schedule(self, "finetune", self.base_lr)
        if self.encoder_lr_scale < 0:
            raise ValueError("finetune.encoder_lr_scale must be >= 0")

    @property
    def learning_rate(self) -> float:
        return scaled_finetune_lr(self.base_lr, self.batch_size) if self.scale_lr else self.base_lr


class LinearHead(nn.Module):
    """Affine map D -> C applied to features standardised with training statistics."""

    def __init__(self, mean: torch.Tensor, std: torch.Tensor, n_out: int, seed: int):
        super().__init__()
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)
        self.linear = nn.Linear(mean.shape[0], n_out, dtype=mean.dtype)
        gen = torch.Generator().manual_seed(seed)
        nn.init.trunc_normal_(self.linear.weight, std=0.01, generator=gen)
        nn.init.zeros_(self.linear.bias)

    def forward(self, features):
        return self.linear((features - self.mean) / self.std)


def _as_targets(labels, task):
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    labels = np.asarray(labels)
    if task == "multiclass":
        if labels.ndim != 1:
            raise ValueError("multiclass labels must be a 1-D array of class indices")
        classes = np.unique(labels)
        if classes.size < 2:
            raise ValueError(f"degenerate labels: only class {classes.tolist()} present, need >= 2")
        return torch.as_tensor(labels, dtype=torch.long), int(labels.max()) + 1
    if labels.ndim != 2:
        raise ValueError("multilabel labels must be an (n, C) multi-hot matrix")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("multilabel entries must be 0 or 1")
    if not any(np.unique(col).size == 2 for col in labels.T):
        raise ValueError("degenerate labels: no label column has both positives and negatives")
    return torch.as_tensor(labels, dtype=torch.float64), labels.shape[1]


def _loss(logits, targets, task):
    if task == "multiclass":
        return F.cross_entropy(logits, targets)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def _scores(logits, task):
    return logits.softmax(-1) if task == "multiclass" else logits.sigmoid()


def _standardiser(features: torch.Tensor):
    mean = features.mean(0)
    std = features.std(0, unbiased=False).clamp_min(1e-6)
    return mean, std


def _fit(forward, groups, n, targets, task, cfg, lr, encoder_lr_scale=1.0):
    """Shared minibatch loop; returns the mean training loss of every epoch.

    Groups flagged ``encoder`` run at ``encoder_lr_scale`` times the schedule.
    """
    optimizer = torch.optim.AdamW(groups, lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)
    spe = steps_per_epoch(n, cfg.batch_size)
    total, warmup = cfg.epochs * spe, cfg.warmup_epochs * spe
    epoch_losses, step = [], 0
    for epoch in range(cfg.epochs):
        order = torch.as_tensor(epoch_order(cfg.seed, epoch, n))
        losses = []
        for k in range(spe):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            loss = _loss(forward(idx), targets[idx], task)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            current = lr_at(step, total, warmup, lr)
            for group in optimizer.param_groups:
                group["lr"] = current * encoder_lr_scale if group.get("encoder") else current
            optimizer.step()
            losses.append(loss.item())
            step += 1
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


@dataclass
class ProbeResult:
    head: LinearHead
    task: str
    epoch_losses: list[float]

    @torch.no_grad()
    def scores(self, features) -> np.ndarray:
        x = torch.as_tensor(np.asarray(features), dtype=self.head.mean.dtype)
        return _scores(self.head(x), self.task).double().numpy()


def train_linear_probe(features, labels, task: str = "multiclass",
                       config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Fit one affine layer on frozen features with the AdamW/cosine schedule."""
    x = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    if not torch.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    targets, n_out = _as_targets(labels, task)
    if x.shape[0] != targets.shape[0]:
        raise ValueError(f"{x.shape[0]} feature rows but {targets.shape[0]} labels")
    head = LinearHead(*_standardiser(x), n_out, config.seed)
    groups = param_groups(head.named_parameters(), config.weight_decay)
    losses = _fit(lambda idx: head(x[idx]), groups, x.shape[0], targets, task, config,
                  config.learning_rate)
    return ProbeResult(head, task, losses)


class FinetuneModel(nn.Module):
    def __init__(self, encoder: Encoder, head: LinearHead, lead_pos):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.lead_pos = np.asarray(lead_pos)

    def features(self, patches):
        reps = self.encoder(patches, self.lead_pos, np.arange(patches.shape[2]))
        return pooled_representation(reps)

    def forward(self, patches):
        return self.head(self.features(patches))


@dataclass
class FinetuneResult:
    model: FinetuneModel
    task: str
    epoch_losses: list[float]

    @torch.no_grad()
    def scores(self, records, lead_subset=None, batch_size: int = 32) -> np.ndarray:
        self.model.eval()
        dtype = self.model.head.mean.dtype
        out = []
        for patches, _ in _record_batches(records, lead_subset, self.model.encoder.config.patch_len,
                                          batch_size):
            out.append(_scores(self.model(torch.as_tensor(patches, dtype=dtype)), self.task))
        return torch.cat(out).double().numpy()


def finetune(model, records: Sequence[EcgRecord], labels, task: str = "multiclass",
             config: FinetuneConfig = FinetuneConfig(), lead_subset=None) -> FinetuneResult:
    """Train a copy of the student encoder together with a fresh linear head.

    The encoder runs without stochastic depth so that a zero encoder
    learning rate reproduces the linear probe exactly.
    """
    encoder = copy.deepcopy(_encoder_of(model)).double()
    encoder.eval()
    targets, n_out = _as_targets(labels, task)
    grids = list(_record_batches(records, lead_subset, encoder.config.patch_len, len(records)))
    if len(grids) != 1:
        raise ValueError("fine-tuning needs records of identical shape")
    patches, lead_pos = grids[0]
    data = torch.as_tensor(patches, dtype=torch.float64)
    with torch.no_grad():
        init = torch.cat([
            pooled_representation(encoder(data[i:i + 32], lead_pos, np.arange(data.shape[2])))
            for i in range(0, data.shape[0], 32)
        ])
    head = LinearHead(*_standardiser(init), n_out, config.seed)
    ft = FinetuneModel(encoder, head, lead_pos)
    groups = param_groups(head.named_parameters(), config.weight_decay)
    for group in param_groups(encoder.named_parameters(), config.weight_decay):
        group["encoder"] = True
        groups.append(group)
    losses = _fit(lambda idx: ft(data[idx]), groups, data.shape[0], targets, task, config,
                  config.learning_rate, config.encoder_lr_scale)
    return FinetuneResult(ft, task, losses)


# --------------------------------------------------------------------------
# metrics

def midranks(x) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    start = 0
    while start < len(x):
        stop = start + 1
        while stop < len(x) and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def binary_auc(scores, positives) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg) + 0.5 P(tie)."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = midranks(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class MetricsReport:
    per_class_auc: list[float | None]
    macro_auc: float | None
    per_class_f1: list[float]
    macro_f1: float | None
    n_samples: int
    excluded_classes: list[int] = field(default_factory=list)
    mae_mean: float | None = None
    mae_std: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(scores, labels, task: str = "multiclass") -> MetricsReport:
    """Per-class one-vs-rest AUC and F1 with their unweighted means.

    ``scores`` are class probabilities (n, C). Multi-label predictions use
    a 0.5 threshold, multi-class predictions the arg-max. Classes lacking
    positives or negatives get no AUC and are listed in
    ``excluded_classes``. F1 of a class that is neither present nor
    predicted is 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] < 2:
        raise ValueError(f"scores must be an (n >= 2, C) matrix, got shape {scores.shape}")
    n, c = scores.shape
    if task == "multiclass":
        if labels.shape != (n,):
            raise ValueError(f"expected {n} class indices, got shape {labels.shape}")
        truth = labels[:, None] == np.arange(c)[None, :]
        pred = scores.argmax(1)[:, None] == np.arange(c)[None, :]
    elif task == "multilabel":
        if labels.shape != (n, c):
            raise ValueError(f"expected labels of shape {(n, c)}, got {labels.shape}")
        truth = labels.astype(bool)
        pred = scores >= 0.5
    else:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    aucs, excluded, f1s = [], [], []
    for k in range(c):
        pos = truth[:, k]
        if pos.all() or not pos.any():
            aucs.append(None)
            excluded.append(k)
        else:
            aucs.append(binary_auc(scores[:, k], pos))
        tp = int((pred[:, k] & pos).sum())
        denom = 2 * tp + int((pred[:, k] & ~pos).sum()) + int((~pred[:, k] & pos).sum())
        f1s.append(2 * tp / denom if denom else 0.0)
    valid = [a for a in aucs if a is not None]
    return MetricsReport(
        per_class_auc=aucs,
        macro_auc=float(np.mean(valid)) if valid else None,
        per_class_f1=f1s,
        macro_f1=float(np.mean(f1s)),
        n_samples=n,
        excluded_classes=excluded,
    )


# --------------------------------------------------------------------------
# regression on ECG features

@dataclass
class RegressionResult:
    weights: np.ndarray
    intercept: float
    abs_errors: np.ndarray
    baseline_abs_errors: np.ndarray

    @property
    def mae_mean(self) -> float:
        return float(self.abs_errors.mean())

    @property
    def mae_std(self) -> float:
        return float(self.abs_errors.std())

    @property
    def baseline_mae(self) -> float:
        return float(self.baseline_abs_errors.mean())

    def predict(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.intercept


def fit_ridge(features, targets, ridge: float = 1e-6) -> tuple[np.ndarray, float]:
    """Closed-form least squares with an intercept; ``ridge`` penalises the weights only.

    Solving on centred data is the same as augmenting the design with a
    column of ones and leaving that column unpenalised.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("regression targets contain NaN or infinite values")
    x_mean, y_mean = x.mean(0), y.mean()
    xc = x - x_mean
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, xc.T @ (y - y_mean))
    return w, float(y_mean - x_mean @ w)


def feature_regression(features, targets, train_idx, test_idx, ridge: float = 1e-6) -> RegressionResult:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    w, b = fit_ridge(x[train_idx], y[train_idx], ridge)
    pred = x[test_idx] @ w + b
    baseline = np.full(len(test_idx), y[train_idx].mean())
    return RegressionResult(w, b, np.abs(pred - y[test_idx]), np.abs(baseline - y[test_idx]))


# --------------------------------------------------------------------------
# splits

def train_test_split(n: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_test = max(1, round_half_away(test_fraction * n))
    if n_test >= n:
        raise ValueError(f"cannot hold out {n_test} of {n} samples")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def lowshot_splits(train_idx, fraction: float, n_seeds: int, seed: int = 0) -> list[np.ndarray]:
    """``n_seeds`` independent uniform subsets of size round(fraction * n)."""
    train_idx = np.asarray(train_idx)
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    size = round_half_away(fraction * len(train_idx))
    if size == 0:
        raise ValueError(f"fraction {fraction} of {len(train_idx)} samples selects nothing")
    return [
        np.sort(np.random.default_rng([seed, 11, k]).choice(train_idx, size=size, replace=False))
        for k in range(n_seeds)
    ]


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
