"""SGD driver, checkpoint windows and the on-disk window format."""
from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as keyed_rng
from .nn import DatasetSplit, MlpSpec, loss, loss_and_grad, mlp_init

log = logging.getLogger(__name__)

MAGIC = b"SEWACKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")
DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step}: loss={value!r}")
        self.step = step
        self.value = value


class CheckpointFormatError(ValueError):
    pass


class MagicMismatchError(CheckpointFormatError):
    pass


class VersionMismatchError(CheckpointFormatError):
    pass


class TruncatedCheckpointError(CheckpointFormatError):
    pass


class ManifestDimensionError(CheckpointFormatError):
    pass


@dataclass(frozen=True)
class ConstantLR:
    alpha: float

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"learning rate must be >= 0, got {self.alpha}")

    def __call__(self, step: int, total: int) -> float:
        return self.alpha


@dataclass(frozen=True)
class CosineLR:
    """Constant ``alpha_max`` until ``start_step``, then cosine decay to ``alpha_min`` at the last step."""

    alpha_max: float
    alpha_min: float
    start_step: int

    def __post_init__(self):
        if not self.alpha_max >= self.alpha_min >= 0:
            raise ValueError("cosine schedule needs alpha_max >= alpha_min >= 0")
        if self.start_step < 0:
            raise ValueError("start_step must be >= 0")

    def __call__(self, step: int, total: int) -> float:
        if step < self.start_step:
            return self.alpha_max
        span = max(total - 1 - self.start_step, 1)
        frac = min((step - self.start_step) / span, 1.0)
        return self.alpha_min + 0.5 * (self.alpha_max - self.alpha_min) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class SgdConfig:
    steps: int
    lr: ConstantLR | CosineLR
    batch_size: int = 1
    seed: int = 0
    capture_every: int = 1
    report_every: int | None = None
    full_batch: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.batch_size < 1 or self.capture_every < 1:
            raise ValueError("batch_size and capture_every must be positive")
        if isinstance(self.lr, CosineLR) and self.lr.start_step >= self.steps:
            raise ValueError("cosine start_step must be < steps")
        if self.report_every is not None and self.report_every % self.capture_every:
            raise ValueError(
                f"report_every={self.report_every} is not a multiple of capture_every={self.capture_every}"
            )


@dataclass(frozen=True)
class Checkpoint:
    step: int
    weights: np.ndarray
    train_loss: float


@dataclass(frozen=True)
class TrajectoryWindow:
    checkpoints: tuple[Checkpoint, ...]
    k: int

    def __post_init__(self):
        cps = self.checkpoints
        if len(cps) > self.k:
            raise ValueError(f"window holds {len(cps)} checkpoints, k={self.k}")
        steps = [c.step for c in cps]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("checkpoint steps must be strictly increasing")
        if len({c.weights.shape for c in cps}) > 1:
            raise ValueError("checkpoints disagree on dimension")

    def __len__(self) -> int:
        return len(self.checkpoints)

    @property
    def dim(self) -> int:
        return self.checkpoints[0].weights.shape[0]

    @property
    def steps(self) -> list[int]:
        return [c.step for c in self.checkpoints]

    def matrix(self) -> np.ndarray:
        """Checkpoint weights stacked as rows, oldest first."""
        return np.stack([c.weights for c in self.checkpoints])


def sample_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Sample indices used at SGD step ``step`` (uniform, with replacement)."""
    return keyed_rng.keyed(keyed_rng.SGD_BATCH, seed, step).integers(0, n, size=batch_size)


def sgd_train(
    spec: MlpSpec,
    data: DatasetSplit,
    cfg: SgdConfig,
    w0: np.ndarray | None = None,
) -> tuple[np.ndarray, list[Checkpoint]]:
    """Run ``cfg.steps`` SGD updates and capture checkpoints.

    A checkpoint is captured after every ``capture_every``-th update and always
    after the last one. Its ``train_loss`` is the full-data loss at that point.
    """
    data.check(spec)
    w = mlp_init(spec, cfg.seed) if w0 is None else np.array(w0, dtype=np.float64)
    stream: list[Checkpoint] = []
    for t in range(cfg.steps):
        if cfg.full_batch:
            batch = data
        else:
            batch = data.subset(sample_indices(cfg.seed, t, data.n, cfg.batch_size))
        value, grad = loss_and_grad(w, spec, batch)
        if not (value <= DIVERGENCE_LIMIT):
            raise DivergenceError(t, value)
        alpha = cfg.lr(t, cfg.steps)
        if alpha:
            w = w - alpha * grad
        step = t + 1
        if step % cfg.capture_every == 0 or step == cfg.steps:
            full = loss(w, spec, data)
            if not (full <= DIVERGENCE_LIMIT):
                raise DivergenceError(step, full)
            stream.append(Checkpoint(step, w.copy(), full))
            if cfg.report_every and step % cfg.report_every == 0:
                log.info("step %d train_loss %.6g", step, full)
    return w, stream


def window_collect(stream: Sequence[Checkpoint], k: int) -> TrajectoryWindow:
    if not stream:
        raise ValueError("cannot build a window from an empty stream")
    if k < 1:
        raise ValueError("k must be positive")
    return TrajectoryWindow(tuple(stream[-k:]), k)


def atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(step: int, weights: np.ndarray) -> bytes:
    values = np.ascontiguousarray(weights, dtype="<f8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, step, values.shape[0]) + values.tobytes()


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> tuple[int, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise TruncatedCheckpointError(f"{source}: {len(blob)} bytes is shorter than the header")
    magic, version, step, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MagicMismatchError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{source}: version {version}, expected {FORMAT_VERSION}")
    payload = len(blob) - _HEADER.size
    if payload != 8 * dim:
        raise TruncatedCheckpointError(
            f"{source}: header declares {dim} floats, payload holds {payload / 8:g}"
        )
    values = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return step, values


def save_checkpoint(path, step: int, weights: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, encode_checkpoint(step, weights))


def load_checkpoint(path) -> tuple[int, np.ndarray]:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


def save_window(window: TrajectoryWindow, path) -> None:
    """Write ``manifest.json`` plus one ``ckpt_NNNNNN.bin`` per checkpoint."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = [f"ckpt_{i:06d}.bin" for i in range(len(window))]
    for name, cp in zip(files, window.checkpoints):
        atomic_write(root / name, encode_checkpoint(cp.step, cp.weights))
    manifest = {
        "version": FORMAT_VERSION,
        "dim": window.dim,
        "k": window.k,
        "steps": window.steps,
        "train_losses": [float(c.train_loss) for c in window.checkpoints],
        "files": files,
    }
    atomic_write(root / "manifest.json", json.dumps(manifest, indent=1).encode("utf-8"))


def load_window(path) -> TrajectoryWindow:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{root}: manifest version {manifest.get('version')!r}")
    dim = manifest["dim"]
    cps = []
    for name, step, tl in zip(manifest["files"], manifest["steps"], manifest["train_losses"]):
        fstep, values = load_checkpoint(root / name)
        if values.shape[0] != dim:
            raise ManifestDimensionError(f"{root / name}: dim {values.shape[0]}, manifest says {dim}")
        if fstep != step:
            raise CheckpointFormatError(f"{root / name}: step {fstep}, manifest says {step}")
        cps.append(Checkpoint(step, values, float(tl)))
    return TrajectoryWindow(tuple(cps), manifest["k"])
