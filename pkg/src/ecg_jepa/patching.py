"""Patch grids and time-aligned mask sampling.

A mask only names temporal subintervals; the same indices are hidden in
every lead so the model cannot copy a masked patch from a neighbouring
lead at the same instant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ecg import EcgRecord, round_half_away


@dataclass(frozen=True)
class PatchGrid:
    """``patches`` has shape (L, N, t)."""

    patches: np.ndarray

    def __post_init__(self):
        if self.patches.ndim != 3 or min(self.patches.shape) < 1:
            raise ValueError(f"patch grid must be (L, N, t) with positive sizes, got {self.patches.shape}")

    @property
    def lead_count(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_count(self) -> int:
        return self.patches.shape[1]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[2]


@dataclass(frozen=True)
class MaskPlan:
    n: int
    masked: tuple[int, ...]
    visible: tuple[int, ...]

    def __post_init__(self):
        masked, visible = set(self.masked), set(self.visible)
        if masked & visible:
            raise ValueError("masked and visible sets overlap")
        if masked | visible != set(range(self.n)):
            raise ValueError("masked and visible must partition range(n)")
        if not masked or not visible:
            raise ValueError("a mask plan needs at least one masked and one visible index")
        object.__setattr__(self, "masked", tuple(sorted(masked)))
        object.__setattr__(self, "visible", tuple(sorted(visible)))

    @classmethod
    def from_masked(cls, n: int, masked) -> MaskPlan:
        masked = set(int(i) for i in masked)
        return cls(n, tuple(sorted(masked)), tuple(i for i in range(n) if i not in masked))


def patchify(record: EcgRecord, patch_len: int) -> PatchGrid:
    """Split every lead into ``floor(T / patch_len)`` patches; the tail is dropped."""
    if patch_len < 1:
        raise ValueError(f"patch_len must be >= 1, got {patch_len}")
    if record.sample_count < patch_len:
        raise ValueError(
            f"record has {record.sample_count} samples, fewer than patch_len {patch_len}"
        )
    n = record.sample_count // patch_len
    patches = record.samples[:, : n * patch_len].reshape(record.lead_count, n, patch_len)
    return PatchGrid(patches)


def _check_ratio(n, ratio_lo, ratio_hi):
    if n < 2:
        raise ValueError(f"need n >= 2 subintervals, got {n}")
    if not 0 < ratio_lo <= ratio_hi < 1:
        raise ValueError(f"mask ratio must satisfy 0 < lo <= hi < 1, got ({ratio_lo}, {ratio_hi})")


def _draw_length(n, ratio_lo, ratio_hi, rng):
    r = rng.uniform(ratio_lo, ratio_hi)
    return min(max(round_half_away(r * n), 1), n - 1)


def sample_random_mask(n: int, ratio_lo: float, ratio_hi: float, rng: np.random.Generator) -> MaskPlan:
    _check_ratio(n, ratio_lo, ratio_hi)
    m = _draw_length(n, ratio_lo, ratio_hi, rng)
    masked = rng.choice(n, size=m, replace=False)
    return MaskPlan.from_masked(n, masked)


def draw_blocks(
    n: int, ratio_lo: float, ratio_hi: float, freq: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Up to ``freq`` contiguous blocks as (start, length); blocks may overlap.

    Blocks are added in order; a block that would hide everything together
    with the blocks before it is redrawn until at least one subinterval stays
    visible. If no admissible block turns up within ``_MAX_REDRAWS`` draws
    the block is dropped.
    """
    _check_ratio(n, ratio_lo, ratio_hi)
    if freq < 1:
        raise ValueError(f"freq must be >= 1, got {freq}")
    blocks: list[tuple[int, int]] = []
    covered: set[int] = set()
    for _ in range(freq):
        for _attempt in range(_MAX_REDRAWS):
            b = _draw_length(n, ratio_lo, ratio_hi, rng)
            s = int(rng.integers(0, n - b + 1))
            candidate = covered | set(range(s, s + b))
            if len(candidate) < n:
                blocks.append((s, b))
                covered = candidate
                break
    return blocks


def sample_multiblock_mask(
    n: int, ratio_lo: float, ratio_hi: float, freq: int, rng: np.random.Generator
) -> MaskPlan:
    """Union of the blocks from :func:`draw_blocks`."""
    blocks = draw_blocks(n, ratio_lo, ratio_hi, freq, rng)
    return MaskPlan.from_masked(n, [i for s, b in blocks for i in range(s, s + b)])


_MAX_REDRAWS = 1000


def sample_mask(strategy: str, n: int, rng: np.random.Generator, ratio_lo: float,
                ratio_hi: float, freq: int = 1) -> MaskPlan:
    if strategy == "random":
        return sample_random_mask(n, ratio_lo, ratio_hi, rng)
    if strategy == "multiblock":
        return sample_multiblock_mask(n, ratio_lo, ratio_hi, freq, rng)
    raise ValueError(f"unknown mask strategy {strategy!r}")


def split_visible(grid: PatchGrid, plan: MaskPlan) -> np.ndarray:
    """Visible patches, shape (L, Q, t), in ascending time order for every lead."""
    if plan.n != grid.patch_count:
        raise ValueError(f"mask plan covers {plan.n} subintervals but grid has {grid.patch_count}")
    return grid.patches[:, list(plan.visible), :]


def count_runs(indices) -> int:
    """Number of maximal runs of consecutive integers."""
    idx = sorted(indices)
    return sum(1 for k, i in enumerate(idx) if k == 0 or i != idx[k - 1] + 1)
