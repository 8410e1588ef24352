"""Synthetic and CSV datasets with a seeded 80/20 train/test split."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import rng as keyed_rng
from .nn import DatasetSplit

TRAIN_FRACTION = 0.8


def split_train_test(X: np.ndarray, y: np.ndarray, seed: int,
                     train_fraction: float = TRAIN_FRACTION) -> tuple[DatasetSplit, DatasetSplit]:
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    perm = keyed_rng.keyed(keyed_rng.DATASET, seed, 1).permutation(n)
    cut = min(max(int(round(train_fraction * n)), 1), n - 1)
    return DatasetSplit(X[perm[:cut]], y[perm[:cut]]), DatasetSplit(X[perm[cut:]], y[perm[cut:]])


def make_blobs(n: int, p: int, classes: int, noise: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian clusters around class centres drawn from ``N(0, 4^2 I)``."""
    if classes < 2:
        raise ValueError(f"blobs need classes >= 2, got {classes}")
    if n < 2 or p < 1 or noise < 0:
        raise ValueError("blobs need n >= 2, p >= 1 and noise >= 0")
    gen = keyed_rng.keyed(keyed_rng.DATASET, seed, 0)
    centres = 4.0 * gen.standard_normal((classes, p))
    y = gen.integers(0, classes, size=n)
    X = centres[y] + noise * gen.standard_normal((n, p))
    return X, y


def make_spirals(n: int, noise: float, seed: int, turns: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved spirals in the plane, radius growing to 1."""
    if n < 2 or noise < 0:
        raise ValueError("spirals need n >= 2 and noise >= 0")
    gen = keyed_rng.keyed(keyed_rng.DATASET, seed, 0)
    y = gen.integers(0, 2, size=n)
    r = np.sqrt(gen.random(n))
    angle = 2.0 * np.pi * turns * r + np.pi * y
    X = np.column_stack([r * np.cos(angle), r * np.sin(angle)])
    X += noise * gen.standard_normal((n, 2))
    return X, y


def load_csv(path, label_column: str) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV with a header row; ``label_column`` holds integer class labels."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if label_column not in header:
            raise ValueError(f"{path}: no column named {label_column!r}")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    j = header.index(label_column)
    labels = table[:, j]
    if not np.all(labels == np.round(labels)):
        raise ValueError(f"{path}: labels in {label_column!r} must be integers")
    return np.delete(table, j, axis=1), labels.astype(np.int64)


def gen_dataset(kind: str, params: dict, seed: int) -> tuple[DatasetSplit, DatasetSplit]:
    """Build ``(train, test)`` for ``kind`` in {blobs, spirals, csv}; ``seed`` drives the split."""
    if kind == "blobs":
        X, y = make_blobs(params["n"], params["p"], params["classes"], params["noise"], seed)
    elif kind == "spirals":
        X, y = make_spirals(params["n"], params["noise"], seed)
    elif kind == "csv":
        X, y = load_csv(params["path"], params["label_column"])
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return split_train_test(X, y, seed)


def carve_validation(train: DatasetSplit, fraction: float, seed: int) -> tuple[DatasetSplit, DatasetSplit | None]:
    """Split ``fraction`` of ``train`` off as a validation set (``None`` when fraction is 0)."""
    if fraction == 0:
        return train, None
    if not 0 < fraction < 1:
        raise ValueError("validation fraction must lie in [0, 1)")
    perm = keyed_rng.keyed(keyed_rng.DATASET, seed, 2).permutation(train.n)
    cut = max(1, int(round(fraction * train.n)))
    if cut >= train.n:
        raise ValueError("validation split leaves no training data")
    return train.subset(np.sort(perm[cut:])), train.subset(np.sort(perm[:cut]))
