"""Generalization-bound calculators and empirical stability probes.

The calculators are pure functions of :class:`BoundInputs`. The probes run
coupled gradient trajectories and report per-step measurements next to the
matching theoretical quantity.
"""
from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import rng as keyed_rng
from .nn import DatasetSplit, DimensionMismatchError, MlpSpec, loss_and_grad
from .trajectory import ConstantLR, SgdConfig, sample_indices, sgd_train


class BoundOverflowError(OverflowError):
    """A bound term is not representable as a finite float64."""

    def __init__(self, term: str, log_value: float):
        super().__init__(f"term {term} overflows float64 (log value {log_value:.6g})")
        self.term = term
        self.log_value = log_value


class StabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BoundInputs:
    alpha: float
    L: float
    beta: float
    c: float
    n: int
    T: int
    k: int
    s: float

    def __post_init__(self):
        for name in ("alpha", "L", "beta", "c"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"s must lie in [0, 1], got {self.s!r}")
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if self.T < 1 or self.k < 1:
            raise ValueError("T and k must be positive")
        if self.k > self.T:
            raise ValueError(f"k={self.k} exceeds T={self.T}")


def convex_bound(b: BoundInputs) -> float:
    """``2 alpha L^2 s (T - k/2) / n``; warns when ``alpha > 2/beta``."""
    if b.alpha > 2.0 / b.beta:
        warnings.warn(
            f"alpha={b.alpha} exceeds 2/beta={2.0 / b.beta}; the convex bound assumes otherwise",
            StabilityWarning,
            stacklevel=2,
        )
    return 2.0 * b.alpha * b.L**2 * b.s * (b.T - b.k / 2.0) / b.n


def _log_base(b: BoundInputs) -> float:
    """log of ``2 c s L^2 (1 + k e^{c beta}) / k`` (requires s > 0)."""
    cb = b.c * b.beta
    return (
        math.log(2.0 * b.c * b.s * b.L**2)
        + float(np.logaddexp(0.0, math.log(b.k) + cb))
        - math.log(b.k)
    )


def _finite_exp(term: str, log_value: float) -> float:
    if log_value > 709.78:
        raise BoundOverflowError(term, log_value)
    return math.exp(log_value)


def _log_t0(b: BoundInputs) -> float:
    cb = b.c * b.beta
    return (b.k / (cb + b.k)) * _log_base(b) + (cb / (cb + b.k)) * math.log(b.T)


def optimal_t0(b: BoundInputs, verify: bool = False) -> float:
    """Closed-form burn-in step minimizing :func:`t0_objective`.

    With ``verify=True`` the result is also compared against
    :func:`grid_minimizer_t0` and a ``StabilityWarning`` is issued if the two
    disagree by more than 1%.
    """
    if b.s == 0:
        return 0.0
    t0 = _finite_exp("t0", _log_t0(b))
    if verify:
        grid = grid_minimizer_t0(b)
        if abs(grid - t0) > 0.01 * t0:
            warnings.warn(f"grid minimizer {grid:.6g} differs from closed form {t0:.6g}", StabilityWarning)
    return t0


def nonconvex_bound(b: BoundInputs) -> float:
    """``(1 + 1/(c beta)) / (n - 1) * t0`` evaluated in log space."""
    if b.s == 0:
        return 0.0
    cb = b.c * b.beta
    log_value = math.log1p(1.0 / cb) - math.log(b.n - 1) + _log_t0(b)
    return _finite_exp("(2csL^2(1+ke^{cb})/k)^{k/(cb+k)} T^{cb/(cb+k)}", log_value)


def t0_objective(t: np.ndarray | float, b: BoundInputs) -> np.ndarray | float:
    """``t/n + (2 s L^2 (1 + k e^{c beta}) / ((n - 1) beta)) (T / t)^{c beta / k}``."""
    cb = b.c * b.beta
    t = np.asarray(t, dtype=np.float64)
    log_a = (
        math.log(2.0 * b.s * b.L**2) + float(np.logaddexp(0.0, math.log(b.k) + cb))
        - math.log(b.n - 1) - math.log(b.beta)
    ) if b.s > 0 else -np.inf
    return t / b.n + np.exp(log_a + (cb / b.k) * (math.log(b.T) - np.log(t)))


def exact_minimizer_t0(b: BoundInputs) -> float:
    """Stationary point of :func:`t0_objective` (differs from the closed form by ``n/(n-1)`` inside the power)."""
    if b.s == 0:
        return 0.0
    cb = b.c * b.beta
    return math.exp(_log_t0(b) + (b.k / (cb + b.k)) * math.log(b.n / (b.n - 1)))


def grid_minimizer_t0(b: BoundInputs, points: int = 20001, decades: float = 6.0) -> float:
    """Minimize :func:`t0_objective` on a log-spaced grid centred on the closed form, then refine once."""
    centre = math.log10(optimal_t0(b))
    grid = np.logspace(centre - decades / 2, centre + decades / 2, points)
    best = int(np.argmin(t0_objective(grid, b)))
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, points - 1)]
    fine = np.linspace(lo, hi, points)
    return float(fine[int(np.argmin(t0_objective(fine, b)))])


# ---------------------------------------------------------------- table


@dataclass(frozen=True)
class TableRow:
    setting: str
    method: str
    formula: str
    value: float | None
    formula_squared: str | None = None
    value_squared: float | None = None
    t_exponent: float | None = None


def bounds_table(b: BoundInputs) -> list[TableRow]:
    """Rows of the comparison table for the convex and non-convex settings.

    Convex entries are given both with ``L`` (as the table prints them) and
    with ``L^2`` (as the convex theorem states them). Non-convex entries are
    orders ``T^e / n``; only the SeWA row carries a full constant.
    """
    a, L, T, n, k, s = b.alpha, b.L, b.T, b.n, b.k, b.s
    cb = b.c * b.beta
    fwa = 2 * a * L * (T - k / 2) / n
    fwa2 = 2 * a * L**2 * (T - k / 2) / n
    rows = [
        TableRow("convex", "SGD", "2aLT/n", 2 * a * L * T / n, "2aL^2T/n", 2 * a * L**2 * T / n),
        TableRow("convex", "SWA", "aLT/n", a * L * T / n, "aL^2T/n", a * L**2 * T / n),
        TableRow("convex", "FWA", "2aL(T-k/2)/n", fwa, "2aL^2(T-k/2)/n", fwa2),
        TableRow("convex", "EMA", "-", None, "-", None),
        TableRow("convex", "SeWA", "2aLs(T-k/2)/n", s * fwa, "2aL^2s(T-k/2)/n", s * fwa2),
    ]
    for method, denom, label in (("SGD", 1.0, "1"), ("SWA", 2.0, "2"), ("FWA", float(k), "k")):
        e = cb / (denom + cb)
        rows.append(TableRow("non-convex", method, f"O(T^(cb/({label}+cb))/n)", T**e / n, t_exponent=e))
    rows.append(TableRow("non-convex", "EMA", "-", None))
    rows.append(
        TableRow("non-convex", "SeWA", "O_s(T^(cb/(k+cb))/n)", nonconvex_bound(b), t_exponent=cb / (k + cb))
    )
    return rows


def _fmt(value: float | None) -> str:
    return "-" if value is None else repr(float(value))


def table_csv(rows: list[TableRow]) -> str:
    out = io.StringIO()
    out.write("setting,method,formula,value,formula_L2,value_L2,t_exponent\n")
    for r in rows:
        out.write(
            f"{r.setting},{r.method},{r.formula},{_fmt(r.value)},"
            f"{r.formula_squared or ''},{'' if r.formula_squared is None else _fmt(r.value_squared)},"
            f"{'' if r.t_exponent is None else repr(r.t_exponent)}\n"
        )
    return out.getvalue()


def table_text(rows: list[TableRow]) -> str:
    lines = [f"{'Setting':<11} {'Algorithm':<9} {'Bound':<24} {'Value':>13}   {'With L^2':<18} {'Value':>13}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        v = "-" if r.value is None else f"{r.value:.6g}"
        v2 = "" if r.formula_squared is None else ("-" if r.value_squared is None else f"{r.value_squared:.6g}")
        lines.append(
            f"{r.setting:<11} {r.method:<9} {r.formula:<24} {v:>13}   {r.formula_squared or '':<18} {v2:>13}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- probes


@dataclass
class ProbeResult:
    series: np.ndarray  # (steps, 2): step, value
    summary: dict = field(default_factory=dict)
    bound_value: float = float("nan")

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64).reshape(-1, 2)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("step,value\n")
        for step, value in self.series:
            out.write(f"{int(step)},{float(value)!r}\n")
        return out.getvalue()

    def summary_csv(self) -> str:
        keys = sorted(self.summary)
        head = ",".join(keys + ["bound_value"])
        vals = ",".join([repr(float(self.summary[k])) for k in keys] + [repr(float(self.bound_value))])
        return head + "\n" + vals + "\n"


@dataclass(frozen=True)
class ConvexQuadratic:
    """``F(w) = 0.5 * sum_i lam_i w_i^2`` with ``0 <= lam_i <= beta``."""

    eigenvalues: tuple[float, ...]

    @classmethod
    def isotropic(cls, beta: float, dim: int) -> ConvexQuadratic:
        return cls((float(beta),) * dim)

    @classmethod
    def random(cls, beta: float, dim: int, seed: int) -> ConvexQuadratic:
        lam = keyed_rng.keyed(keyed_rng.PROBE, seed, 0).uniform(0.0, beta, dim)
        lam[0] = beta
        return cls(tuple(float(v) for v in lam))

    @property
    def beta(self) -> float:
        return max(self.eigenvalues)

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)


@dataclass(frozen=True)
class ConvexLogistic:
    """Linear logistic regression (with bias) over ``data``; single-sample steps."""

    data: DatasetSplit

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec((self.data.p, 1), "identity", "logistic_binary")

    @property
    def beta(self) -> float:
        return logistic_constants(self.data)[1]


@dataclass(frozen=True)
class NonconvexMlp:
    spec: MlpSpec
    data: DatasetSplit


Problem = Union[ConvexQuadratic, ConvexLogistic, NonconvexMlp]


def logistic_constants(data: DatasetSplit) -> tuple[float, float]:
    """Lipschitz and smoothness estimates ``(L, beta)`` for per-sample logistic loss with a bias input."""
    sq = (data.features**2).sum(axis=1) + 1.0
    return float(np.sqrt(sq.max())), float(sq.max() / 4.0)


def _problem_dim(problem: Problem) -> int:
    if isinstance(problem, ConvexQuadratic):
        return problem.dim
    return problem.spec.n_params


def _step_grad(problem: Problem, w: np.ndarray, batch_idx) -> np.ndarray:
    if isinstance(problem, ConvexQuadratic):
        return np.asarray(problem.eigenvalues) * w
    return loss_and_grad(w, problem.spec, problem.data.subset(batch_idx))[1]


def _power_curvature(problem: Problem, point: np.ndarray, batch_idx, v0: np.ndarray,
                     iters: int, h: float) -> float:
    """Largest ``||H v_j|| / ||v_j||`` over power iterations from ``v0`` with finite-difference HVPs.

    For a symmetric Hessian this ratio is nondecreasing along the iteration, so
    starting at the separation direction bounds the local secant curvature.
    """
    v = v0 / np.linalg.norm(v0)
    best = 0.0
    for _ in range(iters):
        hv = (_step_grad(problem, point + h * v, batch_idx) - _step_grad(problem, point - h * v, batch_idx)) / (2 * h)
        norm = float(np.linalg.norm(hv))
        best = max(best, norm)
        if norm == 0.0:
            break
        v = hv / norm
    return best


def expansiveness_probe(
    problem: Problem,
    alpha: float,
    steps: int,
    seed: int,
    separation: float = 1e-3,
    curvature_probes: int = 1000,
    power_iters: int = 8,
) -> ProbeResult:
    """Track ``||w_{t+1} - w'_{t+1}|| / ||w_t - w'_t||`` for paired gradient steps.

    Both iterates take the same single-sample step at each iteration. The
    reported ``bound_value`` is 1 for the convex problems (when
    ``alpha <= 2/beta``) and ``1 + alpha * beta_hat`` for the MLP, where
    ``beta_hat`` is the largest curvature seen by ``curvature_probes``
    finite-difference Hessian-vector power iterations on the probed segments.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not separation > 0:
        raise ValueError("zero initial separation")
    gen = keyed_rng.keyed(keyed_rng.PROBE, seed, 1)
    dim = _problem_dim(problem)
    if isinstance(problem, NonconvexMlp):
        from .nn import mlp_init

        w = mlp_init(problem.spec, seed) + 0.1 * gen.normal(size=dim)
    else:
        w = gen.normal(size=dim)
    direction = gen.normal(size=dim)
    w2 = w + separation * direction / np.linalg.norm(direction)

    n = None if isinstance(problem, ConvexQuadratic) else problem.data.n
    probe_at = set()
    if isinstance(problem, NonconvexMlp) and curvature_probes:
        probe_at = {int(j * steps // curvature_probes) for j in range(min(curvature_probes, steps))}
    beta_hat = 0.0
    rows = []
    for t in range(steps):
        gap = w - w2
        dist = float(np.linalg.norm(gap))
        if dist == 0.0:
            break
        idx = None if n is None else sample_indices(seed, t, n, 1)
        if t in probe_at:
            h = 1e-5 * max(1.0, float(np.linalg.norm(w)))
            beta_hat = max(beta_hat, _power_curvature(problem, 0.5 * (w + w2), idx, gap, power_iters, h))
        w = w - alpha * _step_grad(problem, w, idx)
        w2 = w2 - alpha * _step_grad(problem, w2, idx)
        rows.append((t + 1, float(np.linalg.norm(w - w2)) / dist))

    series = np.array(rows) if rows else np.empty((0, 2))
    ratios = series[:, 1] if rows else np.array([np.nan])
    if isinstance(problem, NonconvexMlp):
        bound = 1.0 + alpha * beta_hat
    else:
        bound = 1.0 if alpha <= 2.0 / problem.beta else 1.0 + alpha * problem.beta
    summary = {"max_ratio": float(np.max(ratios)), "mean_ratio": float(np.mean(ratios)), "steps": len(rows)}
    if isinstance(problem, NonconvexMlp):
        summary["beta_hat"] = beta_hat
    return ProbeResult(series, summary, bound)


def perturbed_dataset(data: DatasetSplit, index: int, replacement=None, seed: int = 0) -> DatasetSplit:
    """Copy of ``data`` with sample ``index`` replaced.

    ``replacement`` is an ``(x, y)`` pair; when omitted, ``x`` is drawn from a
    Gaussian matching the per-feature mean and spread of ``data`` and ``y``
    uniformly from the observed labels.
    """
    if not 0 <= index < data.n:
        raise IndexError(f"perturb_index {index} outside [0, {data.n})")
    X = data.features.copy()
    y = data.labels.copy()
    if replacement is None:
        gen = keyed_rng.keyed(keyed_rng.PROBE, seed, 2, index)
        x_new = data.features.mean(axis=0) + data.features.std(axis=0) * gen.standard_normal(data.p)
        labels = np.unique(data.labels)
        y_new = labels[int(gen.integers(0, labels.size))]
    else:
        x_new, y_new = replacement
        x_new = np.asarray(x_new, dtype=np.float64)
        if x_new.shape != (data.p,):
            raise DimensionMismatchError(f"replacement has shape {x_new.shape}, data has {data.p} features")
    X[index] = x_new
    y[index] = y_new
    return DatasetSplit(X, y)


def first_hit_step(seed: int, perturb_index: int, n: int, batch_size: int, steps: int) -> int | None:
    """First SGD update index whose mini-batch contains ``perturb_index``."""
    for t in range(steps):
        if perturb_index in sample_indices(seed, t, n, batch_size):
            return t
    return None


def divergence_probe(
    spec: MlpSpec,
    data: DatasetSplit,
    perturb_index: int,
    cfg: SgdConfig,
    k: int,
    replacement=None,
) -> ProbeResult:
    """Coupled runs on ``S`` and ``S'`` sharing the sample-index sequence.

    The series holds the trailing-window divergence at every capture. The
    ceiling ``(2 alpha L / n)(T - k/2)`` is reported for linear logistic models
    trained at a constant rate; otherwise ``bound_value`` is NaN.
    """
    data.check(spec)
    if k < 1:
        raise ValueError("k must be positive")
    other = perturbed_dataset(data, perturb_index, replacement, seed=cfg.seed)
    _, run_a = sgd_train(spec, data, cfg)
    _, run_b = sgd_train(spec, other, cfg)
    dists = np.array([np.linalg.norm(a.weights - b.weights) for a, b in zip(run_a, run_b)])
    cumulative = np.concatenate([[0.0], np.cumsum(dists)])
    rows = []
    for j, cp in enumerate(run_a):
        lo = max(0, j + 1 - k)
        rows.append((cp.step, (cumulative[j + 1] - cumulative[lo]) / (j + 1 - lo)))

    hit = first_hit_step(cfg.seed, perturb_index, data.n, cfg.batch_size, cfg.steps)
    bound = float("nan")
    if spec.n_layers == 1 and spec.loss_kind == "logistic_binary" and isinstance(cfg.lr, ConstantLR):
        L = max(logistic_constants(data)[0], logistic_constants(other)[0])
        bound = (2.0 * cfg.lr.alpha * L / data.n) * (cfg.steps - k / 2.0)
    summary = {
        "final": float(rows[-1][1]),
        "max": float(max(r[1] for r in rows)),
        "first_hit": float("nan") if hit is None else float(hit),
    }
    return ProbeResult(np.array(rows), summary, bound)
