"""Checkpoint averaging baselines and the binary-mask average.

All sums run left to right in ascending step order so results are
bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import rng as keyed_rng
from .trajectory import Checkpoint, TrajectoryWindow


class DegenerateSelectionError(ValueError):
    pass


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.int8)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask bits must be a 1-d array of 0/1")
        object.__setattr__(self, "bits", bits)

    @property
    def selected_count(self) -> int:
        return int(self.bits.sum())

    @property
    def indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]

    @classmethod
    def from_indices(cls, k: int, indices) -> BinaryMask:
        bits = np.zeros(k, dtype=np.int8)
        bits[list(indices)] = 1
        return cls(bits)

    def __len__(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class AveragedWeights:
    weights: np.ndarray
    provenance: str
    mask: BinaryMask | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def _mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.array(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        acc += v
    return acc / len(vectors)


def apply_mask(window: TrajectoryWindow, mask: BinaryMask, provenance: str = "mask") -> AveragedWeights:
    """Mean of the checkpoints whose mask bit is set."""
    if len(mask) != len(window):
        raise ValueError(f"mask length {len(mask)} != window length {len(window)}")
    if mask.selected_count < 1:
        raise DegenerateSelectionError("mask selects no checkpoint")
    chosen = [window.checkpoints[i].weights for i in mask.indices]
    return AveragedWeights(_mean(chosen), provenance, mask)


def uniform_average(window: TrajectoryWindow) -> AveragedWeights:
    if len(window) == 0:
        raise ValueError("empty window")
    mask = BinaryMask(np.ones(len(window), dtype=np.int8))
    return apply_mask(window, mask, "uniform")


def ema_average(stream: Sequence[Checkpoint], decay: float = 0.9, every: int = 1) -> AveragedWeights:
    """EMA started at the first checkpoint, updated at checkpoints whose step is a multiple of ``every``."""
    if not stream:
        raise ValueError("empty stream")
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    if every < 1:
        raise ValueError("every must be positive")
    ema = np.array(stream[0].weights, dtype=np.float64)
    used = [stream[0].step]
    for cp in stream[1:]:
        if cp.step % every == 0:
            ema = decay * ema + (1.0 - decay) * cp.weights
            used.append(cp.step)
    return AveragedWeights(ema, "ema", meta={"decay": decay, "every": every, "steps": used})


def _check_budget(k: int, K: int) -> None:
    if not 1 <= K <= k:
        raise ValueError(f"budget K={K} must satisfy 1 <= K <= k={k}")


def lawa_select(k: int, K: int) -> BinaryMask:
    """Equally spaced selection ``ceil(k*j/K) - 1`` for ``j = 1..K``; always keeps the newest."""
    _check_budget(k, K)
    return BinaryMask.from_indices(k, [-(-k * j // K) - 1 for j in range(1, K + 1)])


def random_select(k: int, K: int, seed: int) -> BinaryMask:
    """Uniform K-subset via a partial Fisher-Yates shuffle."""
    _check_budget(k, K)
    gen = keyed_rng.keyed(keyed_rng.RANDOM_SELECT, seed)
    perm = list(range(k))
    for i in range(K):
        j = int(gen.integers(i, k))
        perm[i], perm[j] = perm[j], perm[i]
    return BinaryMask.from_indices(k, perm[:K])


def swa_average(stream: Sequence[Checkpoint], start_fraction: float = 0.75, every: int = 1) -> AveragedWeights:
    """Uniform mean of checkpoints with ``step >= floor(start_fraction * T)`` and ``step % every == 0``."""
    if not stream:
        raise ValueError("empty stream")
    if not 0.0 <= start_fraction <= 1.0:
        raise ValueError("start_fraction must lie in [0, 1]")
    start = int(np.floor(start_fraction * stream[-1].step))
    chosen = [cp for cp in stream if cp.step >= start and cp.step % every == 0]
    if not chosen:
        raise DegenerateSelectionError(f"no checkpoint at step >= {start} on cadence {every}")
    return AveragedWeights(
        _mean([cp.weights for cp in chosen]),
        "swa",
        meta={"start_step": start, "every": every, "steps": [cp.step for cp in chosen]},
    )
