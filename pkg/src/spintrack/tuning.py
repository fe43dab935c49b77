"""Empirical tuning of the analysis: global-fit weights and window length.

Both loops minimise the trace of the conditional covariance of the
confirming estimate given the predictive one.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .estimator import (
    ConditioningError,
    EnsembleError,
    FitError,
    RankError,
    WeightParams,
    track_ensemble,
)
from .trajectory_sim import MeasurementTrace

__all__ = [
    "WeightParams",
    "TUNED_WEIGHTS",
    "SWEEP_CANDIDATES",
    "SWEEP_T_E",
    "OptimizationResult",
    "SweepRow",
    "SweepResult",
    "SweepWarning",
    "tracking_objective",
    "optimize_weights",
    "sweep_delta_t",
]

log = logging.getLogger(__name__)

# Weights found once on the default synthetic ensemble at delta_t = 270 us.
TUNED_WEIGHTS = WeightParams(amp=150.0, width=40.0, imbalance_slope=0.0)
SWEEP_CANDIDATES = (90.0, 150.0, 210.0, 270.0, 330.0, 390.0, 450.0)
# every candidate window fits inside the 1 ms record at these times
SWEEP_T_E = (460.0, 500.0, 540.0)

_PENALIZED = (FitError, RankError, ConditioningError, EnsembleError, np.linalg.LinAlgError, ValueError)


class SweepWarning(UserWarning):
    pass


def _trace_stderr(gamma: np.ndarray, n: int) -> float:
    # Gaussian sampling variance of a covariance estimate; three degrees of
    # freedom go to the mean and the regression on F1
    dof = max(n - 3, 1)
    var = 2.0 * (gamma[0, 0] ** 2 + gamma[1, 1] ** 2 + 2.0 * gamma[0, 1] ** 2) / dof
    return math.sqrt(var)


def tracking_objective(
    ensemble: Sequence[MeasurementTrace],
    g: float,
    t_es: Sequence[float],
    delta_t: float,
    weights: WeightParams | None = None,
) -> tuple[float, float]:
    """Mean ``Tr(Gamma_cond)`` over ``t_es`` and its standard error."""
    rep = track_ensemble(ensemble, g, list(t_es), delta_t, weights)
    if len(rep.points) != len(t_es):
        raise EnsembleError("some t_e had no usable windows")
    values = [p.trace_cond for p in rep.points]
    ses = [_trace_stderr(p.gamma_cond, p.n_traces) for p in rep.points]
    k = len(values)
    return float(np.mean(values)), math.sqrt(sum(s * s for s in ses)) / k


# -- weight optimisation -----------------------------------------------------------


@dataclass
class OptimizationResult:
    params: WeightParams
    value: float
    history: list[float]
    evaluations: int
    restarts: int
    converged: bool


def _to_params(x: np.ndarray, base: WeightParams, free: Sequence[str]) -> WeightParams:
    vals = {"amp": base.amp, "width": base.width, "imbalance_slope": base.imbalance_slope}
    for name, u in zip(free, x):
        # squares keep amp and slope non-negative, the log keeps width positive
        vals[name] = float(math.exp(u)) if name == "width" else float(u * u)
    return WeightParams(**vals)


def _from_params(p: WeightParams, free: Sequence[str]) -> np.ndarray:
    return np.array([math.log(p.width) if n == "width" else math.sqrt(getattr(p, n)) for n in free])


def optimize_weights(
    ensemble: Sequence[MeasurementTrace] | None,
    g: float | None = None,
    t_es: Sequence[float] = (500.0,),
    delta_t: float = 270.0,
    init: WeightParams | None = None,
    free: Sequence[str] = ("amp", "width", "imbalance_slope"),
    max_evals: int = 200,
    xtol: float = 1e-4,
    step: float = 0.5,
    objective: Callable[[WeightParams], float] | None = None,
    seed: int = 0,
) -> OptimizationResult:
    """Nelder-Mead search over the weight parameters.

    ``objective`` replaces the tracking pipeline (for tests); otherwise the
    ensemble must hold at least 50 traces. Failing evaluations count as
    ``+inf``. The simplex works on ``sqrt(amp)``, ``log(width)`` and
    ``sqrt(slope)``, so ``xtol`` is close to a relative tolerance. One
    restart from a perturbed optimum follows the first run.
    """
    init = init or WeightParams()
    free = tuple(free)
    if not free or any(n not in ("amp", "width", "imbalance_slope") for n in free):
        raise ValueError(f"invalid free parameters {free}")
    if objective is None:
        if ensemble is None or len(ensemble) < 50 or g is None:
            raise ValueError("optimize_weights needs g and an ensemble of at least 50 traces")

        def objective(w: WeightParams) -> float:
            return tracking_objective(ensemble, g, t_es, delta_t, w)[0]

    history: list[float] = []
    best = [math.inf, init]

    def wrapped(x):
        p = _to_params(x, init, free)
        try:
            val = float(objective(p))
        except _PENALIZED as exc:
            log.info("weights %s penalized: %s", p, exc)
            val = math.inf
        if not math.isfinite(val):
            val = math.inf
        if val < best[0]:
            best[0], best[1] = val, p
        history.append(best[0])
        return val

    def run(x0, budget, rng):
        dim = len(x0)
        simplex = np.vstack([x0] + [x0 + step * e for e in np.eye(dim)])
        if rng is not None:
            simplex[1:] += 0.1 * step * rng.standard_normal((dim, dim))
        res = minimize(
            wrapped, x0, method="Nelder-Mead",
            options={"initial_simplex": simplex, "xatol": xtol, "fatol": math.inf,
                     "maxfev": budget, "adaptive": dim > 2},
        )
        return res

    x0 = _from_params(init, free)
    first = run(x0, max(2 * max_evals // 3, len(free) + 2), None)
    restarts = 0
    converged = bool(first.success)
    remaining = max_evals - len(history)
    if remaining > len(free) + 1:
        restarts = 1
        first_best = best[0]
        second = run(_from_params(best[1], free), remaining, np.random.default_rng(seed))
        agree = math.isfinite(first_best) and abs(best[0] - first_best) <= 1e-3 * max(abs(first_best), 1e-300)
        converged = bool(second.success) and (agree or converged)
    return OptimizationResult(
        params=best[1], value=best[0], history=history,
        evaluations=len(history), restarts=restarts, converged=converged,
    )


# -- window-length sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    delta_t: float
    trace_gamma_cond: float
    stderr: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    skipped: list[float] = field(default_factory=list)

    @property
    def argmin(self) -> float:
        if not self.rows:
            raise ValueError("empty sweep")
        return min(self.rows, key=lambda r: r.trace_gamma_cond).delta_t

    @property
    def interior_minimum(self) -> bool:
        """Both end candidates strictly worse than the best one."""
        if len(self.rows) < 3:
            return False
        vals = [r.trace_gamma_cond for r in self.rows]
        i = int(np.argmin(vals))
        return 0 < i < len(vals) - 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta_t_us", "trace_gamma_cond", "stderr"])
        for r in self.rows:
            w.writerow([repr(r.delta_t), repr(r.trace_gamma_cond), repr(r.stderr)])
        return buf.getvalue()


def _sweep_one(args):
    ensemble, g, t_es, dt, weights = args
    try:
        val, se = tracking_objective(ensemble, g, t_es, dt, weights)
    except _PENALIZED as exc:
        return dt, None, str(exc)
    return dt, (val, se), None


def sweep_delta_t(
    ensemble: Sequence[MeasurementTrace],
    g: float,
    t_es: float | Sequence[float] = SWEEP_T_E,
    candidates: Sequence[float] = SWEEP_CANDIDATES,
    weights: WeightParams | None = None,
    jobs: int = 1,
) -> SweepResult:
    """``Tr(Gamma_cond)`` for each candidate window length, sorted by length."""
    if not len(candidates):
        raise ValueError("no candidates")
    t_es = [float(t_es)] if np.ndim(t_es) == 0 else [float(t) for t in t_es]
    t_first = min(tr.times[0] for tr in ensemble)
    t_last = max(tr.times[-1] for tr in ensemble)
    todo, skipped = [], []
    for dt in sorted(set(float(c) for c in candidates)):
        if any(t - dt < t_first or t + dt > t_last for t in t_es):
            warnings.warn(f"delta_t={dt} us: windows exceed the trace span, skipped", SweepWarning, stacklevel=2)
            skipped.append(dt)
        else:
            todo.append((ensemble, g, t_es, dt, weights))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, todo))
    else:
        results = [_sweep_one(a) for a in todo]
    rows = []
    for dt, out, err in results:
        if out is None:
            warnings.warn(f"delta_t={dt} us: evaluation failed ({err}), skipped", SweepWarning, stacklevel=2)
            skipped.append(dt)
            continue
        rows.append(SweepRow(dt, out[0], out[1]))
    return SweepResult(rows=rows, skipped=sorted(skipped))
