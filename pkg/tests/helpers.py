"""Shared oracles for the test-suite."""

import itertools

import numpy as np
import torch

from ecg_jepa.model import JepaModel, ModelConfig
from ecg_jepa.patching import MaskPlan

TINY = ModelConfig(
    encoder_layers=1, encoder_heads=2, encoder_dim=8,
    predictor_layers=1, predictor_heads=2, predictor_dim=8,
    patch_len=8, drop_path_rate=0.0, use_cropa=True,
)


def tiny_batch(seed=0, batch=2, leads=2, n=4, t=8):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, leads, n, t, generator=gen, dtype=torch.float64)


def finite_difference_check(model: JepaModel, batch, plan: MaskPlan, h=1e-5):
    """Central differences of the JEPA loss against autograd for every trainable tensor.

    Returns (max relative error, number of scalar parameters checked).
    Relative error is |a - n| / max(|a|, |n|), except that pairs where both
    magnitudes are below 1e-7 are compared absolutely.
    """
    model.zero_grad()
    loss = model.loss(batch, plan)
    loss.backward()
    worst, count = 0.0, 0
    params = list(model.student.named_parameters()) + list(model.predictor.named_parameters())
    with torch.no_grad():
        for name, p in params:
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = model.loss(batch, plan).item()
                flat[k] = orig - h
                down = model.loss(batch, plan).item()
                flat[k] = orig
                numeric = (up - down) / (2 * h)
                a = analytic[k].item()
                scale = max(abs(a), abs(numeric))
                err = abs(a - numeric) / scale if scale > 1e-7 else abs(a - numeric) * 1e7
                worst = max(worst, err)
                count += 1
    return worst, count


def brute_force_cropa(lead_index, time_index):
    m = len(lead_index)
    out = np.zeros((m, m), dtype=bool)
    for i, j in itertools.product(range(m), repeat=2):
        out[i, j] = lead_index[i] == lead_index[j] or time_index[i] == time_index[j]
    return out


def pair_count_auc(scores, positives):
    """Exhaustive Mann-Whitney: fraction of (pos, neg) pairs ordered correctly, ties count 1/2."""
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


CRITERION_LINES: list[str] = []


def criterion(number: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then assert it."""
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
    CRITERION_LINES.append(line)
    print(line)
    assert ok, line
