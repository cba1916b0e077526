"""Pretraining loop, learning-rate schedules and the checkpoint file format."""

from __future__ import annotations

import base64
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import EmaSchedule, JepaModel, ModelConfig, ema_beta
from .patching import PatchGrid, sample_mask

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class MaskParams:
    ratio_lo: float = 0.6
    ratio_hi: float = 0.7
    freq: int = 1


@dataclass(frozen=True)
class EmaParams:
    ema0: float = 0.996
    ema1: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-5
    weight_decay: float = 0.05
    batch_size: int = 128
    epochs: int = 100
    warmup_epochs: int = 5
    mask_strategy: str = "random"
    mask_params: MaskParams = field(default_factory=MaskParams)
    ema: EmaParams = field(default_factory=EmaParams)
    seed: int = 0
    base_lr_scaling: bool = False

    def __post_init__(self):
        problems = []
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            problems.append("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.mask_strategy not in ("random", "multiblock"):
            problems.append(f"mask_strategy must be 'random' or 'multiblock', got {self.mask_strategy!r}")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "mask_params" in d:
            d["mask_params"] = MaskParams(**d["mask_params"])
        if "ema" in d:
            d["ema"] = EmaParams(**d["ema"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr`` followed by cosine decay to 0."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"need 0 <= warmup_steps < total_steps, got {warmup_steps}, {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def scaled_finetune_lr(base_lr: float, batch_size: int) -> float:
    if not base_lr > 0 or batch_size < 1:
        raise ValueError(f"need base_lr > 0 and batch_size >= 1, got {base_lr}, {batch_size}")
    return base_lr * batch_size / 256


def param_groups(named_params, weight_decay: float) -> list[dict]:
    """Weight matrices decay; biases, norm parameters and the mask token do not."""
    decay, no_decay = [], []
    for name, p in named_params:
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def make_optimizer(named_params, weight_decay: float) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        param_groups(named_params, weight_decay), lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS
    )


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return math.ceil(n_items / batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffled item order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def stack_grids(grids: Sequence[PatchGrid], dtype=torch.float32) -> torch.Tensor:
    shapes = {g.patches.shape for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"all grids in a batch must share (L, N, t); got {sorted(shapes)}")
    return torch.as_tensor(np.stack([g.patches for g in grids]), dtype=dtype)


class TrainState:
    """Everything the loop mutates: model, optimizer, step counter and RNGs."""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig, dataset_size: int,
                 dtype=torch.float32):
        self.model_config = model_config
        self.train_config = train_config
        self.dtype = dtype
        self.model = JepaModel(model_config, seed=train_config.seed, dtype=dtype)
        self.optimizer = make_optimizer(self._trainable(), train_config.weight_decay)
        self.steps_per_epoch = steps_per_epoch(dataset_size, train_config.batch_size)
        self.total_steps = train_config.epochs * self.steps_per_epoch
        self.warmup_steps = train_config.warmup_epochs * self.steps_per_epoch
        self.ema = EmaSchedule(train_config.ema.ema0, train_config.ema.ema1, self.total_steps)
        self.step = 0
        self.mask_rng = np.random.default_rng([train_config.seed, 1])
        self.drop_gen = torch.Generator().manual_seed(train_config.seed + 2)
        self.epoch_losses: list[float] = []

    def _trainable(self):
        for prefix in ("student", "predictor"):
            for name, p in getattr(self.model, prefix).named_parameters():
                yield f"{prefix}.{name}", p

    def trainable_names(self) -> list[str]:
        """Parameter names in optimizer order (decay group first)."""
        named = list(self._trainable())
        decay = [n for n, p in named if p.ndim >= 2]
        return decay + [n for n, p in named if p.ndim < 2]


def pretrain_step(state: TrainState, batch, update_teacher: bool = True) -> float:
    """One optimisation step on a (B, L, N, t) batch; returns the loss."""
    if not torch.is_tensor(batch):
        batch = stack_grids(batch, state.dtype)
    cfg = state.train_config
    mp = cfg.mask_params
    plan = sample_mask(cfg.mask_strategy, batch.shape[2], state.mask_rng, mp.ratio_lo, mp.ratio_hi, mp.freq)
    state.model.train()
    loss = state.model.loss(batch, plan, generator=state.drop_gen)
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss.item()} at step {state.step} (masked={plan.masked})"
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    set_lr(state.optimizer, lr_at(state.step, state.total_steps, state.warmup_steps, cfg.learning_rate))
    state.optimizer.step()
    if update_teacher:
        state.model.update_teacher(ema_beta(min(state.step + 1, state.total_steps), state.ema))
    state.step += 1
    return loss.item()


def pretrain(train_config: TrainConfig, model_config: ModelConfig, dataset: Sequence[PatchGrid],
             on_epoch: Callable[[int, float], None] | None = None, dtype=torch.float32) -> TrainState:
    """Run ``epochs`` passes over ``dataset`` with a freshly shuffled order each epoch."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    data = stack_grids(dataset, dtype)
    state = TrainState(model_config, train_config, len(dataset), dtype)
    run_epochs(state, data, on_epoch)
    return state


def run_epochs(state: TrainState, data: torch.Tensor, on_epoch=None) -> None:
    """Continue training from ``state.step`` to the end of the schedule."""
    cfg = state.train_config
    spe = state.steps_per_epoch
    while state.step < state.total_steps:
        epoch, first = divmod(state.step, spe)
        order = torch.as_tensor(epoch_order(cfg.seed, epoch, data.shape[0]))
        losses = []
        for k in range(first, spe):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            losses.append(pretrain_step(state, data[idx]))
        mean = float(np.mean(losses))
        state.epoch_losses.append(mean)
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)


# --------------------------------------------------------------------------
# checkpoint files

CKPT_MAGIC = b"EJPA"
CKPT_VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {0: ("<f4", torch.float32), 1: ("<f8", torch.float64)}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, torch.Tensor]

    @property
    def step(self) -> int:
        return self.metadata["step"]

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.metadata["model_config"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.metadata["train_config"])

    def build_model(self) -> JepaModel:
        dtype = _CODE_DTYPES[self.metadata.get("dtype", 0)][1]
        model = JepaModel(self.model_config, dtype=dtype)
        params = {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}
        model.load_state_dict(params)
        model.eval()
        return model


def checkpoint_from_state(state: TrainState) -> Checkpoint:
    tensors = {f"model.{k}": v.detach().clone() for k, v in state.model.state_dict().items()}
    names = state.trainable_names()
    opt_state = state.optimizer.state_dict()["state"]
    for idx, name in enumerate(names):
        for key, value in opt_state.get(idx, {}).items():
            tensors[f"optim.{name}.{key}"] = value.detach().clone().to(state.dtype).reshape(value.shape)
    metadata = {
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "step": state.step,
        "total_steps": state.total_steps,
        "steps_per_epoch": state.steps_per_epoch,
        "epoch_losses": list(state.epoch_losses),
        "dtype": _DTYPE_CODES[state.dtype],
        "rng": {
            "mask": state.mask_rng.bit_generator.state,
            "drop_path": base64.b64encode(state.drop_gen.get_state().numpy().tobytes()).decode("ascii"),
        },
    }
    return Checkpoint(metadata, tensors)


def restore_state(ckpt: Checkpoint) -> TrainState:
    """Rebuild a TrainState that continues exactly where the checkpoint stopped."""
    meta = ckpt.metadata
    dtype = _CODE_DTYPES[meta.get("dtype", 0)][1]
    cfg = ckpt.train_config
    dataset_size = meta["steps_per_epoch"] * cfg.batch_size
    state = TrainState(ckpt.model_config, cfg, dataset_size, dtype)
    state.steps_per_epoch = meta["steps_per_epoch"]
    state.total_steps = meta["total_steps"]
    state.warmup_steps = cfg.warmup_epochs * state.steps_per_epoch
    state.ema = EmaSchedule(cfg.ema.ema0, cfg.ema.ema1, state.total_steps)
    state.model.load_state_dict(
        {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    )
    opt = state.optimizer.state_dict()
    opt["state"] = {}
    for idx, name in enumerate(state.trainable_names()):
        entry = {k.rsplit(".", 1)[1]: v for k, v in ckpt.tensors.items()
                 if k.startswith(f"optim.{name}.") and k.count(".") == name.count(".") + 2}
        if entry:
            entry["step"] = entry["step"].to(torch.float32)
            opt["state"][idx] = entry
    state.optimizer.load_state_dict(opt)
    state.step = meta["step"]
    state.epoch_losses = list(meta["epoch_losses"])
    state.mask_rng.bit_generator.state = meta["rng"]["mask"]
    raw = np.frombuffer(base64.b64decode(meta["rng"]["drop_path"]), dtype=np.uint8).copy()
    state.drop_gen.set_state(torch.from_numpy(raw))
    return state


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<Q", len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name, tensor in ckpt.tensors.items():
        if tensor.dtype not in _DTYPE_CODES:
            raise TypeError(f"{name}: unsupported dtype {tensor.dtype}")
        encoded = name.encode("utf-8")
        arr = tensor.detach().cpu().contiguous().numpy()
        payload = arr.astype(_CODE_DTYPES[_DTYPE_CODES[tensor.dtype]][0], copy=False).tobytes()
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<B", _DTYPE_CODES[tensor.dtype]),
                  struct.pack("<Q", len(payload)), payload]
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            for part in parts:
                fh.write(part)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"{self.path}: truncated file (needed {n} bytes at offset {self.pos}, size {len(self.data)})"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(data, path)
    magic = r.take(4) if len(data) >= 4 else data
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    (meta_len,) = r.unpack("<Q")
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (code,) = r.unpack("<B")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {code}")
        (nbytes,) = r.unpack("<Q")
        np_dtype, torch_dtype = _CODE_DTYPES[code]
        arr = np.frombuffer(r.take(nbytes), dtype=np_dtype).reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np_dtype[1:], copy=True))
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(metadata, tensors)
