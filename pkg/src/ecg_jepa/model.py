"""Student/teacher encoders, per-lead predictor, latent loss and EMA.

Tokens are laid out lead-major: token ``l * K + k`` is lead ``l`` at the
``k``-th supplied time position. Positional rows always use the true
(lead, time) coordinates, so the student's visible tokens line up with the
teacher's full grid.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .patching import MaskPlan


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 12
    encoder_heads: int = 16
    encoder_dim: int = 768
    predictor_layers: int = 6
    predictor_heads: int = 12
    predictor_dim: int = 384
    patch_len: int = 50
    drop_path_rate: float = 0.1
    use_cropa: bool = True

    def __post_init__(self):
        problems = []
        if self.encoder_dim % self.encoder_heads:
            problems.append("encoder_dim must be divisible by encoder_heads")
        if self.predictor_dim % self.predictor_heads:
            problems.append("predictor_dim must be divisible by predictor_heads")
        if self.encoder_dim % 4:
            # two sinusoidal halves, each of even width
            problems.append("encoder_dim must be divisible by 4")
        if self.predictor_dim % 2:
            problems.append("predictor_dim must be even")
        if not 0 <= self.drop_path_rate < 1:
            problems.append("drop_path_rate must lie in [0, 1)")
        for name in ("encoder_layers", "predictor_layers", "patch_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# positional tables

def sinusoidal_rows(positions, dim: int) -> np.ndarray:
    """Column 2k is sin(p / 10000^(2k/dim)), column 2k+1 the matching cos."""
    if dim % 2:
        raise ValueError(f"sinusoidal dimension must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    angle = pos * freq
    out = np.empty((pos.shape[0], dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def sinusoidal_table_1d(count: int, dim: int) -> np.ndarray:
    return sinusoidal_rows(np.arange(count), dim)


def sinusoidal_rows_2d(lead_index, time_index, dim: int) -> np.ndarray:
    """Time embedding in the first half of the columns, lead embedding in the second."""
    if dim % 2 or (dim // 2) % 2:
        raise ValueError(f"2-D sinusoidal dimension must be divisible by 4, got {dim}")
    return np.hstack([sinusoidal_rows(time_index, dim // 2), sinusoidal_rows(lead_index, dim // 2)])


def sinusoidal_table_2d(leads: int, times: int, dim: int) -> np.ndarray:
    lead_index, time_index = np.divmod(np.arange(leads * times), times)
    return sinusoidal_rows_2d(lead_index, time_index, dim)


def cropa_mask(lead_index, time_index) -> np.ndarray:
    """Boolean (tokens x tokens) matrix: True where a query may attend a key.

    A token sees every token of its own lead and every token sharing its
    time position, which traces a cross over the lead x time grid.
    """
    lead = np.asarray(lead_index)
    time = np.asarray(time_index)
    if lead.shape != time.shape or lead.ndim != 1:
        raise ValueError(f"index lists must be 1-D and equally long, got {lead.shape} and {time.shape}")
    return (lead[:, None] == lead[None, :]) | (time[:, None] == time[None, :])


# --------------------------------------------------------------------------
# transformer pieces

class DropPath(nn.Module):
    """Drops whole residual branches per sample while training."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x, generator=None):
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        noise = torch.rand(shape, generator=generator, dtype=x.dtype, device=x.device)
        return x * (noise < keep).to(x.dtype) / keep


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, allow=None):
        b, m, d = x.shape
        qkv = self.qkv(x).reshape(b, m, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if allow is not None:
            scores = scores.masked_fill(~allow, float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, m, d))


class Block(nn.Module):
    """Pre-norm transformer block with stochastic depth on both branches."""

    def __init__(self, dim: int, heads: int, drop_path: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.drop_path = DropPath(drop_path)

    def forward(self, x, allow=None, generator=None):
        x = x + self.drop_path(self.attn(self.norm1(x), allow), generator)
        x = x + self.drop_path(self.mlp(self.norm2(x)), generator)
        return x


def _init_weights(module: nn.Module, generator: torch.Generator | None) -> None:
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            nn.init.trunc_normal_(sub.weight, std=0.02, generator=generator)
            nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.LayerNorm):
            nn.init.ones_(sub.weight)
            nn.init.zeros_(sub.bias)


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.encoder_dim
        self.patch_embed = nn.Linear(config.patch_len, dim)
        self.blocks = nn.ModuleList(
            Block(dim, config.encoder_heads, config.drop_path_rate) for _ in range(config.encoder_layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward_tokens(self, tokens, lead_index, time_index, generator=None):
        """``tokens`` is (B, M, t); returns (B, M, D)."""
        lead_index = np.asarray(lead_index)
        time_index = np.asarray(time_index)
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.patch_len:
            raise ValueError(
                f"expected tokens of shape (B, M, {self.config.patch_len}), got {tuple(tokens.shape)}"
            )
        if tokens.shape[1] != len(lead_index) or len(lead_index) != len(time_index):
            raise ValueError(
                f"{tokens.shape[1]} tokens but {len(lead_index)} lead and {len(time_index)} time indices"
            )
        pos = sinusoidal_rows_2d(lead_index, time_index, self.config.encoder_dim)
        x = self.patch_embed(tokens) + torch.as_tensor(pos, dtype=tokens.dtype, device=tokens.device)
        allow = None
        if self.config.use_cropa:
            allow = torch.as_tensor(cropa_mask(lead_index, time_index), device=tokens.device)
        for block in self.blocks:
            x = block(x, allow, generator)
        return self.norm(x)

    def forward(self, patches, lead_pos, time_pos, generator=None):
        """``patches`` is (B, L, K, t) with lead positions (L,) and time positions (K,)."""
        if patches.ndim != 4:
            raise ValueError(f"expected patches of shape (B, L, K, t), got {tuple(patches.shape)}")
        b, n_leads, k, t = patches.shape
        if len(lead_pos) != n_leads or len(time_pos) != k:
            raise ValueError(
                f"patch grid is {n_leads}x{k} but got {len(lead_pos)} lead and {len(time_pos)} time positions"
            )
        lead_index = np.repeat(np.asarray(lead_pos), k)
        time_index = np.tile(np.asarray(time_pos), n_leads)
        out = self.forward_tokens(patches.reshape(b, n_leads * k, t), lead_index, time_index, generator)
        return out.reshape(b, n_leads, k, -1)


class Predictor(nn.Module):
    """Fills masked time positions of one lead at a time from its visible latents."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.predictor_dim
        self.embed = nn.Linear(config.encoder_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.blocks = nn.ModuleList(
            Block(dim, config.predictor_heads, config.drop_path_rate)
            for _ in range(config.predictor_layers)
        )
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, config.encoder_dim)

    def forward(self, student_reps, plan: MaskPlan, generator=None):
        """``student_reps`` is (B, L, Q, D); returns (B, L, N, D)."""
        b, n_leads, q, d = student_reps.shape
        if q != len(plan.visible):
            raise ValueError(f"plan has {len(plan.visible)} visible positions but reps carry {q}")
        x = self.embed(student_reps.reshape(b * n_leads, q, d))
        fill = self.mask_token.expand(b * n_leads, len(plan.masked), -1)
        seq = torch.cat([x, fill], dim=1)
        # reorder [visible..., masked...] into time order
        order = np.argsort(np.array(plan.visible + plan.masked))
        seq = seq[:, torch.as_tensor(order)]
        pos = sinusoidal_table_1d(plan.n, self.config.predictor_dim)
        seq = seq + torch.as_tensor(pos, dtype=seq.dtype, device=seq.device)
        for block in self.blocks:
            seq = block(seq, None, generator)
        out = self.proj(self.norm(seq))
        return out.reshape(b, n_leads, plan.n, -1)


def normalize_targets(teacher_out):
    """Per-token layer normalisation without affine parameters."""
    return F.layer_norm(teacher_out, teacher_out.shape[-1:])


def smooth_l1(d, beta: float = 1.0):
    ad = d.abs()
    return torch.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)


def jepa_loss(predicted, target, plan: MaskPlan, beta: float = 1.0):
    """Smooth-L1 averaged over masked time positions of every lead and feature.

    Shapes are (..., L, N, D); visible positions never contribute.
    """
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    if predicted.shape[-2] != plan.n:
        raise ValueError(f"plan covers {plan.n} positions but tensors carry {predicted.shape[-2]}")
    masked = torch.as_tensor(plan.masked, device=predicted.device)
    d = predicted.index_select(-2, masked) - target.index_select(-2, masked)
    return smooth_l1(d, beta).mean()


# --------------------------------------------------------------------------
# EMA

@dataclass(frozen=True)
class EmaSchedule:
    ema0: float = 0.996
    ema1: float = 1.0
    total_iterations: int = 1

    def __post_init__(self):
        if not 0 <= self.ema0 <= self.ema1 <= 1:
            raise ValueError(f"need 0 <= ema0 <= ema1 <= 1, got ({self.ema0}, {self.ema1})")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")


def ema_beta(i: int, schedule: EmaSchedule) -> float:
    """Momentum rising linearly from ema0 at i=0 to ema1 at the final iteration."""
    if not 0 <= i <= schedule.total_iterations:
        raise ValueError(f"iteration {i} outside [0, {schedule.total_iterations}]")
    return schedule.ema0 + i * (schedule.ema1 - schedule.ema0) / schedule.total_iterations


@torch.no_grad()
def ema_update(teacher: Mapping[str, torch.Tensor], student: Mapping[str, torch.Tensor], beta: float) -> None:
    """In place: every teacher tensor becomes beta * teacher + (1 - beta) * student."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if teacher.keys() != student.keys():
        diff = sorted(set(teacher) ^ set(student))
        raise ValueError(f"teacher/student parameter names differ: {diff}")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"{name}: teacher shape {tuple(t.shape)} != student shape {tuple(s.shape)}")
        if beta == 0.0:
            t.copy_(s)
        elif beta != 1.0:
            t.mul_(beta).add_(s, alpha=1.0 - beta)


# --------------------------------------------------------------------------
# full model

class JepaModel(nn.Module):
    """Holds the student, its EMA teacher and the predictor.

    ``state_dict()`` is the parameter set: names are prefixed ``student.``,
    ``teacher.`` and ``predictor.``; the mask token is
    ``predictor.mask_token``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        self.student = Encoder(config)
        self.predictor = Predictor(config)
        _init_weights(self.student, gen)
        _init_weights(self.predictor, gen)
        nn.init.trunc_normal_(self.predictor.mask_token, std=0.02, generator=gen)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.to(dtype)

    def train(self, mode: bool = True):
        super().train(mode)
        # the teacher never uses stochastic depth
        self.teacher.eval()
        return self

    def encode(self, patches, lead_pos, time_pos, which: str = "student", generator=None):
        if which == "teacher":
            with torch.no_grad():
                out = self.teacher(patches, lead_pos, time_pos)
        elif which == "student":
            out = self.student(patches, lead_pos, time_pos, generator)
        else:
            raise ValueError(f"which must be 'student' or 'teacher', got {which!r}")
        _check_finite(out, f"{which} encoder output")
        return out

    def predict(self, student_reps, plan: MaskPlan, generator=None):
        out = self.predictor(student_reps, plan, generator)
        _check_finite(out, "predictor output")
        return out

    def loss(self, patches, plan: MaskPlan, lead_pos=None, generator=None):
        """JEPA objective on a (B, L, N, t) batch under one shared mask plan."""
        n_leads, n = patches.shape[1], patches.shape[2]
        if plan.n != n:
            raise ValueError(f"plan covers {plan.n} subintervals but batch has {n}")
        lead_pos = np.arange(n_leads) if lead_pos is None else np.asarray(lead_pos)
        target = normalize_targets(self.encode(patches, lead_pos, np.arange(n), "teacher"))
        visible = torch.as_tensor(plan.visible)
        reps = self.encode(patches.index_select(2, visible), lead_pos, np.array(plan.visible),
                           "student", generator)
        predicted = self.predict(reps, plan, generator)
        return jepa_loss(predicted, target, plan)

    def update_teacher(self, beta: float) -> None:
        ema_update(dict(self.teacher.named_parameters()), dict(self.student.named_parameters()), beta)


def _check_finite(x, what: str) -> None:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise FloatingPointError(f"{what} has {bad} non-finite values out of {x.numel()}")
