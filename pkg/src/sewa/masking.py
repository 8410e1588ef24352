"""Learning which checkpoints to average.

Each checkpoint ``i`` in a window gets a Bernoulli selection probability
``s[i]``. The expected loss of the masked average is minimised over
``{eps <= s <= 1 - eps, sum(s) <= K}`` with a Gumbel-softmax relaxation of the
mask, and the ``K`` most probable checkpoints are averaged at the end.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import expit, log_expit

from . import rng as keyed_rng
from .averagers import BinaryMask
from .nn import DatasetSplit, MlpSpec, loss, loss_and_grad
from .trajectory import TrajectoryWindow

DEFAULT_EPS = 1e-6
MAX_ENUMERATION_K = 20


class EnumerationTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class MaskProbs:
    s: np.ndarray
    K: float
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        object.__setattr__(self, "s", s)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ValueError("selection probabilities must be a finite 1-d array")
        if np.any(s < self.eps) or np.any(s > 1.0 - self.eps):
            raise ValueError(f"selection probabilities must lie in [{self.eps}, {1 - self.eps}]")
        if s.sum() > self.K + 1e-9:
            raise ValueError(f"sum of probabilities {s.sum()} exceeds budget {self.K}")

    def __len__(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class GumbelDraws:
    """Uniforms ``u[i, c]`` for checkpoint ``i``; column 1 is "selected", column 0 "not selected"."""

    u: np.ndarray

    @property
    def g(self) -> np.ndarray:
        return -np.log(-np.log(self.u))

    def __len__(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class RelaxedMask:
    values: np.ndarray
    temperature: float
    draws: GumbelDraws
    logits: np.ndarray = field(repr=False)


def _as_array(s) -> np.ndarray:
    return s.s if isinstance(s, MaskProbs) else np.asarray(s, dtype=np.float64)


def _as_matrix(window) -> np.ndarray:
    return window.matrix() if isinstance(window, TrajectoryWindow) else np.asarray(window, dtype=np.float64)


def gumbel_sample(seed: int, index: int, k: int = 1) -> GumbelDraws:
    gen = keyed_rng.keyed(keyed_rng.GUMBEL, seed, index)
    return GumbelDraws(keyed_rng.open_uniform(gen, (k, 2)))


def gs_relax(s, draws: GumbelDraws, t: float) -> RelaxedMask:
    """Two-category Gumbel-softmax, evaluated as a sigmoid of the logit gap over ``t``."""
    if not t > 0:
        raise ValueError("temperature must be positive")
    p = _as_array(s)
    g = draws.g
    z = ((np.log(p) + g[:, 1]) - (np.log1p(-p) + g[:, 0])) / t
    return RelaxedMask(expit(z), t, draws, z)


def _normalized_coefficients(z: np.ndarray) -> np.ndarray:
    """``m / sum(m)`` for ``m = sigmoid(z)``, computed in log space."""
    logm = log_expit(z)
    e = np.exp(logm - logm.max())
    return e / e.sum()


def relaxed_average(window, m) -> np.ndarray:
    """Average of the checkpoints weighted by ``m / sum(m)``."""
    W = _as_matrix(window)
    if isinstance(m, RelaxedMask):
        coef = _normalized_coefficients(m.logits)
    else:
        m = np.asarray(m, dtype=np.float64)
        coef = m / m.sum()
    if coef.shape[0] != W.shape[0]:
        raise ValueError(f"{coef.shape[0]} mask entries for {W.shape[0]} checkpoints")
    return _combine(W, W - W[-1], coef)


def _combine(W, D, coef):
    # offsets from the newest checkpoint: identical checkpoints reproduce it exactly
    return W[-1] + coef @ D


@dataclass(frozen=True)
class ConstantTemperature:
    t: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("temperature must be positive")

    def __call__(self, iteration: int) -> float:
        return self.t


@dataclass(frozen=True)
class GeometricTemperature:
    t0: float = 1.0
    t_min: float = 0.1
    factor: float = 0.95

    def __post_init__(self):
        if not (self.t0 > 0 and self.t_min > 0 and 0 < self.factor <= 1):
            raise ValueError("geometric temperature needs t0, t_min > 0 and factor in (0, 1]")

    def __call__(self, iteration: int) -> float:
        return max(self.t_min, self.t0 * self.factor**iteration)


@dataclass(frozen=True)
class GsConfig:
    K: int
    temperature: Callable[[int], float] = GeometricTemperature()
    M: int = 8
    step_size: float = 0.5
    iterations: int = 200
    seed: int = 0
    eval_batch: int | None = None
    eps: float = DEFAULT_EPS
    output: str = "topk"

    def __post_init__(self):
        if self.K < 1 or self.M < 1 or self.iterations < 1:
            raise ValueError("K, M and iterations must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.output not in ("topk", "bernoulli"):
            raise ValueError(f"unknown output mode {self.output!r}")


def eval_subset(data: DatasetSplit, cfg: GsConfig) -> DatasetSplit:
    """Fixed seeded subset of ``eval_batch`` samples, or all of ``data``."""
    if cfg.eval_batch is None or cfg.eval_batch >= data.n:
        return data
    gen = keyed_rng.keyed(keyed_rng.EVAL_SUBSET, cfg.seed)
    return data.subset(np.sort(gen.choice(data.n, size=cfg.eval_batch, replace=False)))


def _pathwise(s, W, spec, data, t, M, seed, want_grad):
    k = W.shape[0]
    losses = np.empty(M)
    grads = np.zeros((M, k)) if want_grad else None
    dz_ds = (1.0 / s + 1.0 / (1.0 - s)) / t
    D = W - W[-1]
    for j in range(M):
        relaxed = gs_relax(s, gumbel_sample(seed, j, k), t)
        coef = _normalized_coefficients(relaxed.logits)
        wbar = _combine(W, D, coef)
        if not want_grad:
            losses[j] = loss(wbar, spec, data)
            continue
        losses[j], gw = loss_and_grad(wbar, spec, data)
        # d wbar / d z_i = coef_i (1 - m_i) (w_i - wbar)
        dL_dz = coef * (1.0 - relaxed.values) * (D @ gw - (wbar - W[-1]) @ gw)
        grads[j] = dL_dz * dz_ds
    return losses, grads


def _resolve_t(cfg: GsConfig, temperature: float | None) -> float:
    return cfg.temperature(0) if temperature is None else float(temperature)


def objective_samples(s, window, spec: MlpSpec, data: DatasetSplit, cfg: GsConfig, seed: int,
                      temperature: float | None = None) -> np.ndarray:
    """Per-sample losses ``L(w(GS(s, u_j, t)))`` for ``j < M``."""
    W = _as_matrix(window)
    losses, _ = _pathwise(_as_array(s), W, spec, eval_subset(data, cfg), _resolve_t(cfg, temperature),
                          cfg.M, seed, False)
    return losses


def objective_mc(s, window, spec: MlpSpec, data: DatasetSplit, cfg: GsConfig, seed: int,
                 temperature: float | None = None) -> float:
    """Monte Carlo estimate of the relaxed objective with ``cfg.M`` keyed Gumbel draws."""
    return float(objective_samples(s, window, spec, data, cfg, seed, temperature).mean())


def objective_grad_samples(s, window, spec: MlpSpec, data: DatasetSplit, cfg: GsConfig, seed: int,
                           temperature: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    W = _as_matrix(window)
    return _pathwise(_as_array(s), W, spec, eval_subset(data, cfg), _resolve_t(cfg, temperature),
                     cfg.M, seed, True)


def objective_grad(s, window, spec: MlpSpec, data: DatasetSplit, cfg: GsConfig, seed: int,
                   temperature: float | None = None) -> np.ndarray:
    """Exact derivative of :func:`objective_mc` w.r.t. ``s`` under the same draws."""
    return objective_grad_samples(s, window, spec, data, cfg, seed, temperature)[1].mean(axis=0)


def _mask_weights(W: np.ndarray, bits: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(bits)
    if idx.size == 0:
        return W[-1]
    acc = np.array(W[idx[0]])
    for i in idx[1:]:
        acc += W[i]
    return acc / idx.size


def pge_samples(s, window, spec: MlpSpec, data: DatasetSplit, M: int, seed: int) -> np.ndarray:
    """Per-sample score-function estimates ``L(w(m)) * grad_s log p(m|s)``, shape ``(M, k)``.

    The empty mask averages to the newest checkpoint.
    """
    p = _as_array(s)
    W = _as_matrix(window)
    k = W.shape[0]
    cache: dict[bytes, float] = {}
    out = np.empty((M, k))
    for j in range(M):
        u = keyed_rng.open_uniform(keyed_rng.keyed(keyed_rng.BERNOULLI, seed, j), k)
        bits = (u < p).astype(np.int8)
        key = bits.tobytes()
        if key not in cache:
            cache[key] = loss(_mask_weights(W, bits), spec, data)
        out[j] = cache[key] * np.where(bits == 1, 1.0 / p, -1.0 / (1.0 - p))
    return out


def pge_grad(s, window, spec: MlpSpec, data: DatasetSplit, M: int, seed: int) -> np.ndarray:
    return pge_samples(s, window, spec, data, M, seed).mean(axis=0)


def _mask_table(k: int) -> np.ndarray:
    codes = np.arange(2**k)
    return ((codes[:, None] >> np.arange(k)) & 1).astype(np.int8)


def mask_losses(window, spec: MlpSpec, data: DatasetSplit) -> np.ndarray:
    """Loss of every discrete mask; entry ``c`` has bit ``i`` of ``c`` as ``m_i``."""
    W = _as_matrix(window)
    k = W.shape[0]
    if k > MAX_ENUMERATION_K:
        raise EnumerationTooLargeError(
            f"enumerating k={k} checkpoints needs 2^{k} = {2**k} loss evaluations "
            f"(limit k <= {MAX_ENUMERATION_K})"
        )
    return np.array([loss(_mask_weights(W, bits), spec, data) for bits in _mask_table(k)])


def _mask_probabilities(p: np.ndarray) -> np.ndarray:
    bits = _mask_table(p.shape[0])
    return np.exp(np.where(bits == 1, np.log(p), np.log1p(-p)).sum(axis=1))


def empty_mask_limit_weights(s) -> np.ndarray:
    """``P(no gap positive and checkpoint i has the largest gap)`` under Gumbel noise.

    The gap ``log(s/(1-s)) + g1 - g0`` is logistic; as the temperature goes to
    zero the relaxed average of an all-negative draw collapses onto the
    checkpoint with the largest gap. The entries sum to ``prod(1 - s)``.
    """
    p = _as_array(s)
    loc = np.log(p) - np.log1p(-p)
    out = np.empty_like(p)
    for i in range(p.shape[0]):
        others = np.delete(loc, i)

        def integrand(x, i=i, others=others):
            a = x - loc[i]
            return np.exp(-a - 2 * np.logaddexp(0.0, -a) + log_expit(x - others).sum())

        out[i] = integrate.quad(integrand, -np.inf, 0.0, epsabs=0.0, epsrel=1e-12, limit=200)[0]
    return out


def exact_expected_loss(s, window, spec: MlpSpec, data: DatasetSplit, empty_mask: str = "last",
                        losses: np.ndarray | None = None) -> float:
    """Expected loss of the discrete masked average by full enumeration.

    ``empty_mask="last"`` averages the empty mask to the newest checkpoint.
    ``empty_mask="relaxed_limit"`` gives it the zero-temperature limit of the
    relaxed average instead, which is what the Gumbel-softmax objective
    converges to.
    """
    p = _as_array(s)
    W = _as_matrix(window)
    if losses is None:
        losses = mask_losses(W, spec, data)
    probs = _mask_probabilities(p)
    if empty_mask == "last":
        return float(probs @ losses)
    if empty_mask != "relaxed_limit":
        raise ValueError(f"unknown empty_mask mode {empty_mask!r}")
    single = np.array([loss(W[i], spec, data) for i in range(W.shape[0])])
    return float(probs[1:] @ losses[1:] + empty_mask_limit_weights(p) @ single)


def exact_expected_grad(s, window, spec: MlpSpec, data: DatasetSplit,
                        losses: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the enumerated expectation (empty mask -> newest checkpoint)."""
    p = _as_array(s)
    if losses is None:
        losses = mask_losses(window, spec, data)
    probs = _mask_probabilities(p)
    bits = _mask_table(p.shape[0])
    score = np.where(bits == 1, 1.0 / p, -1.0 / (1.0 - p))
    return (probs * losses) @ score


def project_feasible(s_raw, K: float, eps: float = DEFAULT_EPS) -> MaskProbs:
    """Euclidean projection onto ``{eps <= s <= 1 - eps, sum(s) <= K}``."""
    s_raw = np.asarray(s_raw, dtype=np.float64)
    if not np.all(np.isfinite(s_raw)):
        raise ValueError("cannot project non-finite probabilities")
    k = s_raw.shape[0]
    if k * eps > K:
        raise ValueError(f"infeasible: k*eps = {k * eps} exceeds budget K = {K}")
    out = np.clip(s_raw, eps, 1.0 - eps)
    if out.sum() <= K:
        return MaskProbs(out, K, eps)
    # sum(clip(s - lam)) is non-increasing in lam; keep the side with sum <= K
    lo, hi = 0.0, float(s_raw.max() - eps)
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        if np.clip(s_raw - mid, eps, 1.0 - eps).sum() > K:
            lo = mid
        else:
            hi = mid
    return MaskProbs(np.clip(s_raw - hi, eps, 1.0 - eps), K, eps)


def extract_topk(s, K: int) -> BinaryMask:
    """Ones at the ``K`` largest probabilities; ties go to the smaller index."""
    p = _as_array(s)
    if not 1 <= K <= p.shape[0]:
        raise ValueError(f"K={K} must satisfy 1 <= K <= {p.shape[0]}")
    return BinaryMask.from_indices(p.shape[0], np.argsort(-p, kind="stable")[:K])


def sample_bernoulli_mask(s, seed: int) -> BinaryMask:
    """Independent Bernoulli draw; an empty draw falls back to the most probable checkpoint."""
    p = _as_array(s)
    u = keyed_rng.open_uniform(keyed_rng.keyed(keyed_rng.BERNOULLI, seed, 2**62), p.shape[0])
    bits = (u < p).astype(np.int8)
    if not bits.any():
        bits[int(np.argmax(p))] = 1
    return BinaryMask(bits)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    temperature: float
    objective: float
    s: np.ndarray


def _iteration_seed(seed: int, iteration: int) -> int:
    return int(keyed_rng.keyed(keyed_rng.GUMBEL, seed, 2**63, iteration).integers(2**63))


def optimize_mask(window, spec: MlpSpec, data: DatasetSplit, cfg: GsConfig) -> tuple[list[HistoryRow], MaskProbs]:
    """Projected gradient descent on the relaxed objective.

    Each row of the returned history records the probabilities at which the
    objective was evaluated in that iteration.
    """
    W = _as_matrix(window)
    k = W.shape[0]
    if k < 1:
        raise ValueError("empty window")
    if cfg.K > k:
        raise ValueError(f"budget K={cfg.K} exceeds window length {k}")
    data = eval_subset(data, cfg)
    probs = project_feasible(np.full(k, min(cfg.K / k, 1.0 - cfg.eps)), cfg.K, cfg.eps)
    history = []
    for it in range(cfg.iterations):
        t = cfg.temperature(it)
        losses, grads = _pathwise(probs.s, W, spec, data, t, cfg.M, _iteration_seed(cfg.seed, it), True)
        history.append(HistoryRow(it, t, float(losses.mean()), probs.s.copy()))
        nxt = project_feasible(probs.s - cfg.step_size * grads.mean(axis=0), cfg.K, cfg.eps)
        delta = float(np.max(np.abs(nxt.s - probs.s)))
        probs = nxt
        if delta < 1e-8:
            break
    return history, probs


def final_mask(probs: MaskProbs, cfg: GsConfig) -> BinaryMask:
    if cfg.output == "bernoulli":
        return sample_bernoulli_mask(probs, cfg.seed)
    return extract_topk(probs, cfg.K)


def history_csv(history: list[HistoryRow]) -> str:
    k = history[0].s.shape[0] if history else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "temperature", "objective"] + [f"s_{i}" for i in range(k)])
    for row in history:
        writer.writerow(
            [row.iteration, f"{row.temperature:.17g}", f"{row.objective:.17g}"]
            + [f"{v:.17g}" for v in row.s]
        )
    return buf.getvalue()
