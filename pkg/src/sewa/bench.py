"""End-to-end experiment pipeline: train, collect the window, average, evaluate, report."""
from __future__ import annotations

import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .averagers import (
    AveragedWeights,
    apply_mask,
    ema_average,
    lawa_select,
    random_select,
    swa_average,
)
from .config import ExperimentConfig, MethodConfig
from .data import carve_validation, gen_dataset
from .masking import final_mask, history_csv, optimize_mask
from .nn import DatasetSplit, MlpSpec, accuracy, loss
from .trajectory import TrajectoryWindow, atomic_write, save_checkpoint, save_window, sgd_train, window_collect

log = logging.getLogger(__name__)

SUMMARY_HEADER = "method,K,seed,eval_loss,eval_acc"


@dataclass(frozen=True)
class MethodRow:
    method: str
    K: int | None
    seed: int
    eval_loss: float
    eval_acc: float
    mask: tuple[int, ...] | None = None


@dataclass
class SeedOutcome:
    seed: int
    rows: list[MethodRow] = field(default_factory=list)
    error: str | None = None


def prepare_data(cfg: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit | None, DatasetSplit]:
    """``(fit, val, test)``; ``val`` is carved from the training split (or ``None``)."""
    ds = cfg.dataset
    train, test = gen_dataset(ds.kind, ds.model_dump(exclude={"kind", "seed"}), ds.seed)
    fit, val = carve_validation(train, cfg.val_fraction, ds.seed)
    return fit, val, test


def method_label(m: MethodConfig) -> str:
    return m.name if m.K is None else f"{m.name}_K{m.K}"


def averaged_for(m: MethodConfig, stream, window: TrajectoryWindow, spec: MlpSpec,
                 fit: DatasetSplit, val: DatasetSplit | None, seed: int, out_dir: Path | None
                 ) -> list[AveragedWeights]:
    """All averaged models a method produces for one seed (several for multi-draw random)."""
    k = len(window)
    if m.name == "sgd_final":
        return [AveragedWeights(window.checkpoints[-1].weights.copy(), "sgd_final")]
    if m.name == "uniform":
        return [apply_mask(window, lawa_select(k, k), "uniform")]
    if m.name == "swa":
        return [swa_average(stream, m.start_fraction, m.every)]
    if m.name == "ema":
        return [ema_average(stream, m.decay, m.every)]
    if m.name == "lawa":
        return [apply_mask(window, lawa_select(k, m.K), "lawa")]
    if m.name == "random":
        return [apply_mask(window, random_select(k, m.K, seed * 1000 + d), "random") for d in range(m.draws)]
    # sewa
    objective = val if m.gs.objective == "val" else fit
    gs = m.gs.gs(m.K, seed)
    history, probs = optimize_mask(window, spec, objective, gs)
    mask = final_mask(probs, gs)
    if out_dir is not None:
        label = method_label(m)
        atomic_write(out_dir / f"{label}_history.csv", history_csv(history).encode())
        payload = {"K": m.K, "indices": mask.indices, "steps": [window.steps[i] for i in mask.indices],
                   "s": [float(v) for v in probs.s]}
        atomic_write(out_dir / f"{label}_mask.json", (json.dumps(payload, indent=1) + "\n").encode())
    return [apply_mask(window, mask, "sewa")]


def run_seed(cfg: ExperimentConfig, seed: int, persist: bool = True) -> SeedOutcome:
    out = SeedOutcome(seed)
    spec = cfg.model.spec()
    fit, val, test = prepare_data(cfg)
    _, stream = sgd_train(spec, fit, cfg.train.sgd(seed))
    window = window_collect(stream, cfg.window_k)
    seed_dir = Path(cfg.output_dir) / f"seed_{seed}" if persist else None
    if seed_dir is not None:
        save_window(window, seed_dir / "window")
    for m in cfg.methods:
        models = averaged_for(m, stream, window, spec, fit, val, seed, seed_dir)
        losses, accs = [], []
        for d, avg in enumerate(models):
            if seed_dir is not None:
                suffix = f"_d{d}" if len(models) > 1 else ""
                save_checkpoint(seed_dir / f"avg_{method_label(m)}{suffix}.bin", window.steps[-1], avg.weights)
            losses.append(loss(avg.weights, spec, test))
            accs.append(accuracy(avg.weights, spec, test))
        mask = tuple(int(b) for b in models[0].mask.bits) if (m.name == "sewa" and models[0].mask) else None
        out.rows.append(MethodRow(m.name, m.K, seed, float(np.mean(losses)), float(np.mean(accs)), mask))
    return out


def _run_seed_safe(cfg: ExperimentConfig, seed: int) -> SeedOutcome:
    try:
        return run_seed(cfg, seed)
    except Exception as exc:  # one failing seed must not stop the others
        log.error("seed %d failed: %s: %s", seed, type(exc).__name__, exc)
        return SeedOutcome(seed, error=f"{type(exc).__name__}: {exc}")


def worker_count(cfg: ExperimentConfig) -> int:
    env = os.environ.get("SEWA_WORKERS")
    if env:
        return max(1, int(env))
    if cfg.workers:
        return cfg.workers
    return max(1, min(len(cfg.seeds), os.cpu_count() or 1))


def run_experiment(cfg: ExperimentConfig) -> list[SeedOutcome]:
    """Run every seed, write ``results.csv``, ``summary.csv`` and ``table.txt`` under ``output_dir``."""
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    workers = min(worker_count(cfg), len(cfg.seeds))
    if workers == 1:
        outcomes = [_run_seed_safe(cfg, s) for s in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_seed_safe, [cfg] * len(cfg.seeds), cfg.seeds))
    rows = [r for o in outcomes for r in o.rows]
    if rows:
        emit_summary(rows, cfg.output_dir)
    return outcomes


def _fmt(value: float) -> str:
    return repr(float(value))


def _k(K: int | None) -> str:
    return "" if K is None else str(K)


def aggregate(rows: list[MethodRow]) -> list[dict]:
    """Mean and standard error (n-1 denominator; 0 for a single seed) per ``(method, K)``."""
    groups: dict[tuple, list[MethodRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.K), []).append(r)
    stats = []
    for (method, K), members in groups.items():
        losses = np.array([r.eval_loss for r in members])
        accs = np.array([r.eval_acc for r in members])
        n = len(members)

        def se(x):
            return float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0

        stats.append({
            "method": method, "K": K, "n": n,
            "mean_loss": float(np.mean(losses)), "stderr_loss": se(losses),
            "mean_acc": float(np.mean(accs)), "stderr_acc": se(accs),
        })
    return stats


def summary_csv(rows: list[MethodRow]) -> str:
    out = io.StringIO()
    out.write(SUMMARY_HEADER + "\n")
    for r in rows:
        out.write(f"{r.method},{_k(r.K)},{r.seed},{_fmt(r.eval_loss)},{_fmt(r.eval_acc)}\n")
    for s in aggregate(rows):
        out.write(f"{s['method']},{_k(s['K'])},mean,{_fmt(s['mean_loss'])},{_fmt(s['mean_acc'])}\n")
        out.write(f"{s['method']},{_k(s['K'])},stderr,{_fmt(s['stderr_loss'])},{_fmt(s['stderr_acc'])}\n")
    return out.getvalue()


def results_csv(rows: list[MethodRow]) -> str:
    out = io.StringIO()
    out.write(SUMMARY_HEADER + ",mask\n")
    for r in rows:
        mask = "" if r.mask is None else "".join(map(str, r.mask))
        out.write(f"{r.method},{_k(r.K)},{r.seed},{_fmt(r.eval_loss)},{_fmt(r.eval_acc)},{mask}\n")
    return out.getvalue()


def table_txt(rows: list[MethodRow]) -> str:
    stats = sorted(aggregate(rows), key=lambda s: (s["mean_loss"], s["method"], s["K"] or 0))
    lines = [f"{'method':<10} {'K':>4} {'seeds':>5} {'mean_loss':>12} {'stderr':>10} {'mean_acc':>9} {'stderr':>8}"]
    for s in stats:
        lines.append(
            f"{s['method']:<10} {_k(s['K']):>4} {s['n']:>5} {s['mean_loss']:>12.6f} {s['stderr_loss']:>10.6f}"
            f" {s['mean_acc']:>9.4f} {s['stderr_acc']:>8.4f}"
        )
    return "\n".join(lines) + "\n"


def emit_summary(rows: list[MethodRow], output_dir) -> None:
    """Write ``summary.csv``, ``results.csv`` and ``table.txt`` atomically."""
    if not rows:
        raise ValueError("no rows to summarize")
    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    atomic_write(root / "summary.csv", summary_csv(rows).encode())
    atomic_write(root / "results.csv", results_csv(rows).encode())
    atomic_write(root / "table.txt", table_txt(rows).encode())
