"""Phase-space estimates of the precessing spin from Faraday-rotation records.

The chain is: a weighted global fit of the free-induction-decay model for
the classical parameters (Larmor frequency, coherence time, baseline), then
two linear least-squares estimates of ``(Fy, Fz)`` at an estimation time
``t_e`` from disjoint windows before and after it, and finally ensemble
statistics of the confirming estimate conditioned on the predictive one.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .trajectory_sim import MeasurementTrace

log = logging.getLogger(__name__)

Side = Literal["predictive", "confirming"]

T2_BOUNDS = (10.0, 1e5)


class FitError(RuntimeError):
    """The global fit did not produce a usable set of classical parameters."""

    def __init__(self, message: str, last=None, residual_norm: float = float("nan")):
        super().__init__(message)
        self.last = last
        self.residual_norm = residual_norm


class FitBoundaryWarning(UserWarning):
    pass


class RankError(np.linalg.LinAlgError):
    pass


class ConditioningError(np.linalg.LinAlgError):
    pass


class EnsembleError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightParams:
    """Empirical weights of the global fit.

    ``W = (1 + amp * exp(-width * |t - t_e| / T2)) / (1 + imbalance_slope * |phi|)``
    """

    amp: float = 0.0
    width: float = 1.0
    imbalance_slope: float = 0.0

    def __post_init__(self):
        if self.amp < 0 or self.imbalance_slope < 0:
            raise ValueError("amp and imbalance_slope must be non-negative")
        if not self.width > 0:
            raise ValueError("width must be positive")

    @property
    def is_uniform(self) -> bool:
        return self.amp == 0.0 and self.imbalance_slope == 0.0

    def __call__(self, times, angles, t_e: float, t2: float) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        angles = np.asarray(angles, dtype=float)
        near = 1.0 + self.amp * np.exp(-self.width * np.abs(times - t_e) / t2)
        return near / (1.0 + self.imbalance_slope * np.abs(angles))


@dataclass(frozen=True)
class FidModelParams:
    g: float
    omega_l: float
    t2: float
    phi0: float

    def __post_init__(self):
        if not self.t2 > 0:
            raise ValueError("t2 must be positive")
        if not self.g > 0:
            raise ValueError("g must be positive")


@dataclass(frozen=True)
class GlobalFit:
    params: FidModelParams
    f_ref: np.ndarray  # (Fy, Fz) at the reference time
    t_ref: float
    iterations: int
    residual_norm: float
    at_bound: bool = False


@dataclass(frozen=True)
class PhaseEstimate:
    f: np.ndarray
    t_e: float
    window: tuple[float, float]
    side: Side
    n_points: int


# -- global fit -----------------------------------------------------------------


def _design(tr: np.ndarray, omega: float, t2: float):
    env = np.exp(-tr / t2)
    c = np.cos(omega * tr)
    s = np.sin(omega * tr)
    a = np.column_stack([c * env, -s * env, np.ones_like(tr)])
    d_omega = np.column_stack([-tr * s * env, -tr * c * env, np.zeros_like(tr)])
    d_t2 = a * (tr / t2**2)[:, None]
    d_t2[:, 2] = 0.0
    return a, d_omega, d_t2


def _project(a: np.ndarray, y: np.ndarray, sw: np.ndarray):
    aw = a * sw[:, None]
    yw = y * sw
    coef, *_ = np.linalg.lstsq(aw, yw, rcond=None)
    return coef, yw - aw @ coef, aw


def _varpro_fit(tr, y, sw, omega0, t2_0, max_iter=200, rtol=1e-9, fix_t2=None):
    """Damped Gauss-Newton on (omega, T2) with the linear coefficients profiled out."""
    theta = np.array([omega0, t2_0 if fix_t2 is None else fix_t2], dtype=float)
    lo, hi = T2_BOUNDS
    n_free = 1 if fix_t2 is not None else 2

    def evaluate(th):
        a, da_w, da_t = _design(tr, th[0], th[1])
        coef, resid, aw = _project(a, y, sw)
        return coef, resid, aw, da_w, da_t

    coef, resid, aw, da_w, da_t = evaluate(theta)
    cost = float(resid @ resid)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # Kaufman Jacobian: -P_perp dA c
        q, _ = np.linalg.qr(aw)
        cols = [da_w @ coef, da_t @ coef][:n_free]
        jac = np.empty((tr.size, n_free))
        for j, col in enumerate(cols):
            v = col * sw
            jac[:, j] = -(v - q @ (q.T @ v))
        jtj = jac.T @ jac
        grad = jac.T @ resid
        accepted = False
        for _ in range(30):
            damp = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-300))
            try:
                step = -np.linalg.solve(damp, grad)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = theta.copy()
            trial[:n_free] += step
            if n_free == 2:
                trial[1] = min(max(trial[1], lo), hi)
            t_coef, t_resid, t_aw, t_dw, t_dt = evaluate(trial)
            t_cost = float(t_resid @ t_resid)
            if t_cost <= cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            # no downhill step at any damping: stationary to working precision
            converged = True
            break
        change = np.max(np.abs(trial - theta) / np.maximum(np.abs(theta), 1e-300))
        small_gain = cost - t_cost <= 1e-15 * max(cost, 1e-300)
        theta, coef, resid, aw, da_w, da_t, cost = trial, t_coef, t_resid, t_aw, t_dw, t_dt, t_cost
        lam = max(lam / 10, 1e-12)
        if change < rtol or (small_gain and change < 1e-6):
            converged = True
            break
    return theta, coef, resid, cost, it, converged


def initial_omega(times: np.ndarray, angles: np.ndarray) -> float:
    """Larmor frequency guess from the peak of a zero-padded periodogram."""
    y = angles - angles.mean()
    dt = float(np.median(np.diff(times)))
    n = 1 << (int(np.ceil(np.log2(times.size))) + 4)
    spec = np.abs(np.fft.rfft(y, n))
    spec[0] = 0.0
    k = int(np.argmax(spec))
    return 2.0 * math.pi * k / (n * dt)


def fit_global(
    trace: MeasurementTrace,
    g: float,
    t_e: float,
    weights: WeightParams | None = None,
    init: FidModelParams | None = None,
    max_iter: int = 200,
    significance: float = 100.0,
) -> GlobalFit:
    """Weighted nonlinear least squares of the FID model over the whole trace.

    The amplitudes ``(Fy, Fz)`` at ``t_e`` and the baseline are linear and are
    profiled out; the damped Gauss-Newton iteration runs on
    ``(omega_L, T2)``. With non-uniform ``weights`` an unweighted pass fixes
    the T2 entering the time weighting.
    """
    times, angles = trace.times, trace.angles
    if times.size < 20:
        raise FitError(f"need at least 20 points, got {times.size}")
    if not times[0] <= t_e <= times[-1]:
        raise FitError(f"t_e={t_e} outside the trace span [{times[0]}, {times[-1]}]")
    weights = weights or WeightParams()
    tr = times - t_e
    omega0 = init.omega_l if init else initial_omega(times, angles)
    t2_0 = init.t2 if init else 0.5 * (times[-1] - times[0])

    sw = np.ones_like(tr)
    theta, coef, resid, cost, iters, ok = _varpro_fit(tr, angles, sw, omega0, t2_0, max_iter)
    if not weights.is_uniform:
        w = weights(times, angles, t_e, theta[1])
        sw = np.sqrt(w / w.mean())
        theta, coef, resid, cost, it2, ok = _varpro_fit(tr, angles, sw, theta[0], theta[1], max_iter)
        iters += it2

    params_last = (theta[0], theta[1], coef)
    if not ok:
        raise FitError(
            f"global fit did not converge in {max_iter} iterations",
            last=params_last,
            residual_norm=math.sqrt(cost),
        )

    # a sinusoid must explain far more than a constant baseline does
    yw = angles * sw
    base = yw - sw * (yw @ sw) / (sw @ sw)
    dof = max(times.size - 5, 1)
    noise = cost / dof
    gain = (float(base @ base) - cost) / max(noise, 1e-300)
    if not gain > significance:
        raise FitError(
            f"no significant oscillation (chi2 gain {gain:.1f})",
            last=params_last,
            residual_norm=math.sqrt(cost),
        )

    t2 = float(theta[1])
    at_bound = t2 <= T2_BOUNDS[0] * (1 + 1e-9) or t2 >= T2_BOUNDS[1] * (1 - 1e-9)
    if at_bound:
        warnings.warn(f"T2 pinned to bound ({t2:.3g} us)", FitBoundaryWarning, stacklevel=2)
    params = FidModelParams(g=g, omega_l=float(theta[0]), t2=t2, phi0=float(coef[2]))
    f_ref = np.array([coef[1], coef[0]]) / g
    return GlobalFit(params, f_ref, t_e, iters, math.sqrt(cost), at_bound)


# -- windowed linear estimates -----------------------------------------------------


def window_mask(times: np.ndarray, t_e: float, delta_t: float, side: Side) -> np.ndarray:
    if side == "predictive":
        return (times >= t_e - delta_t) & (times < t_e)
    if side == "confirming":
        return (times > t_e) & (times <= t_e + delta_t)
    raise ValueError(f"unknown side {side!r}")


def fit_phase_point(
    trace: MeasurementTrace,
    params: FidModelParams,
    t_e: float,
    delta_t: float,
    side: Side,
) -> PhaseEstimate:
    """Closed-form least-squares ``(Fy, Fz)`` at ``t_e`` with classical parameters fixed.

    All points in the window carry equal weight.
    """
    mask = window_mask(trace.times, t_e, delta_t, side)
    n = int(mask.sum())
    window = (t_e - delta_t, t_e) if side == "predictive" else (t_e, t_e + delta_t)
    if n < 2:
        raise RankError(f"{side} window {window} holds {n} points")
    tr = trace.times[mask] - t_e
    env = np.exp(-tr / params.t2)
    a = params.g * np.column_stack(
        [-np.sin(params.omega_l * tr) * env, np.cos(params.omega_l * tr) * env]
    )
    y = trace.angles[mask] - params.phi0
    normal = a.T @ a
    if np.linalg.cond(normal) > 1e12:
        raise RankError(f"{side} window {window} too short to separate Fy and Fz")
    f = np.linalg.solve(normal, a.T @ y)
    return PhaseEstimate(f=f, t_e=t_e, window=window, side=side, n_points=n)


def phase_point_variance(
    times: np.ndarray, params: FidModelParams, t_e: float, noise_var: float
) -> np.ndarray:
    """Covariance of the window estimate for white angle noise ``noise_var``."""
    tr = np.asarray(times, dtype=float) - t_e
    env = np.exp(-tr / params.t2)
    a = params.g * np.column_stack(
        [-np.sin(params.omega_l * tr) * env, np.cos(params.omega_l * tr) * env]
    )
    return noise_var * np.linalg.inv(a.T @ a)


# -- ensemble statistics -----------------------------------------------------------


def cross_cov(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample cross-covariance with 1/(n-1) normalization, rows are samples."""
    du = u - u.mean(axis=0)
    dv = v - v.mean(axis=0)
    return du.T @ dv / (u.shape[0] - 1)


def conditional_covariance(f1, f2, max_cond: float = 1e12):
    """Error covariance of the best linear prediction of ``f2`` from ``f1``.

    Returns ``(gamma_cond, a, residuals)`` with ``a = G21 G1^-1`` and
    ``residuals = f2 - f1 a^T``.
    """
    f1 = np.atleast_2d(np.asarray(f1, dtype=float))
    f2 = np.atleast_2d(np.asarray(f2, dtype=float))
    if f1.shape != f2.shape:
        raise ValueError("f1 and f2 must have the same shape")
    if f1.shape[0] < 3:
        raise ValueError("need at least 3 samples")
    g1 = cross_cov(f1, f1)
    g2 = cross_cov(f2, f2)
    g21 = cross_cov(f2, f1)
    scale = max(float(np.max(np.abs(f1))), 1e-300)
    if np.all(np.ptp(f1, axis=0) <= 1e-12 * scale):
        # f1 has no spread beyond rounding: the best prediction is the mean of f2
        a = np.zeros((f2.shape[1], f1.shape[1]))
        return 0.5 * (g2 + g2.T), a, f2 - f1 @ a.T
    if not np.all(np.isfinite(g1)) or np.linalg.cond(g1) > max_cond:
        raise ConditioningError("covariance of the predictive estimates is singular")
    a = np.linalg.solve(g1.T, g21.T).T
    cond = g2 - a @ g21.T
    cond = 0.5 * (cond + cond.T)
    residuals = f2 - f1 @ a.T
    return cond, a, residuals


def polar_decompose(gamma, mean_f) -> tuple[float, float, float]:
    """Radial and azimuthal variances for ``(Fy, Fz) = rho (-sin psi, cos psi)``."""
    gamma = np.asarray(gamma, dtype=float)
    fy, fz = np.asarray(mean_f, dtype=float)
    if math.hypot(fy, fz) == 0.0:
        raise ValueError("mean spin vector is zero, direction undefined")
    psi = math.atan2(-fy, fz)
    rho_hat = np.array([-math.sin(psi), math.cos(psi)])
    psi_hat = np.array([-math.cos(psi), -math.sin(psi)])
    return float(rho_hat @ gamma @ rho_hat), float(psi_hat @ gamma @ psi_hat), psi


def db_below(benchmark: float, variance: float) -> float:
    """How far ``variance`` lies below ``benchmark``, in dB (positive when below)."""
    return 10.0 * math.log10(benchmark / variance)


def benchmarks(mean_length: float, mean_atoms: float) -> tuple[float, float]:
    """Standard quantum limit for the azimuth and Poisson limit for the radius."""
    return 0.5 * mean_length, float(mean_atoms)


# -- ensemble tracking --------------------------------------------------------------


@dataclass
class TrackingPoint:
    t_e: float
    mean_f1: np.ndarray
    gamma_f1: np.ndarray
    gamma_f2: np.ndarray
    gamma_f2f1: np.ndarray
    gamma_cond: np.ndarray
    var_rho: float
    var_psi: float
    psi: float
    sql: float
    poisson: float
    db_rho: float
    db_psi: float
    n_traces: int
    trace_ids: np.ndarray
    residuals: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    full_windows: bool
    confirming_full: bool = True

    @property
    def trace_cond(self) -> float:
        return float(np.trace(self.gamma_cond))


@dataclass
class TrackingReport:
    delta_t: float
    points: list[TrackingPoint]
    failed_traces: int = 0
    benchmark_source: str = "truth"

    def steady_state(self, t_min: float = 270.0) -> dict[str, float]:
        """Average dB margins over ``t_e >= t_min`` with complete windows."""
        pts = [p for p in self.points if p.t_e >= t_min and p.full_windows]
        if not pts:
            return {"db_psi_steady": float("nan"), "db_rho_steady": float("nan"), "n_points": 0}
        return {
            "db_psi_steady": float(np.mean([p.db_psi for p in pts])),
            "db_rho_steady": float(np.mean([p.db_rho for p in pts])),
            "n_points": len(pts),
        }

    def sql_crossing(self) -> float | None:
        """Probing time at which var(F_psi) first drops below the SQL.

        Only points with a complete confirming window count. The time is
        interpolated linearly in the dB margin between the last point above
        the SQL and the first point below it; ``None`` if it never drops.
        """
        pts = [p for p in self.points if p.confirming_full]
        for i, p in enumerate(pts):
            if p.db_psi > 0:
                if i == 0:
                    return p.t_e
                a = pts[i - 1]
                return a.t_e + (p.t_e - a.t_e) * (-a.db_psi) / (p.db_psi - a.db_psi)
        return None

    def magnified(self, point: TrackingPoint, factor: float = 100.0) -> np.ndarray:
        """``<F1> + factor * residual`` per repetition, the phase-space picture."""
        return point.mean_f1 + factor * point.residuals


def _truth_at(trace: MeasurementTrace, t_e: float) -> tuple[float, float]:
    tt = trace.truth
    length = np.hypot(tt.fy, tt.fz)
    return (
        float(np.interp(t_e, trace.times, length)),
        float(np.interp(t_e, trace.times, tt.atoms)),
    )


def estimate_trace(
    trace: MeasurementTrace,
    g: float,
    t_es: Sequence[float],
    delta_t: float,
    weights: WeightParams | None = None,
    min_points: int = 4,
):
    """Predictive and confirming estimates of one trace at every ``t_e``.

    Returns a dict ``t_e -> (f1, f2, fitted_length)``; entries whose windows
    hold fewer than ``min_points`` points are absent. Raises :class:`FitError`
    when the global fit fails.
    """
    weights = weights or WeightParams()
    out = {}
    cached = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FitBoundaryWarning)
        for t_e in t_es:
            p_mask = window_mask(trace.times, t_e, delta_t, "predictive")
            c_mask = window_mask(trace.times, t_e, delta_t, "confirming")
            if p_mask.sum() < min_points or c_mask.sum() < min_points:
                continue
            if cached is None or not weights.is_uniform:
                init = cached.params if cached is not None else None
                cached = fit_global(trace, g, t_e, weights, init=init)
            params = cached.params
            e1 = fit_phase_point(trace, params, t_e, delta_t, "predictive")
            e2 = fit_phase_point(trace, params, t_e, delta_t, "confirming")
            out[t_e] = (e1.f, e2.f, cached)
    return out


def _estimate_safe(args):
    tr, g, t_es, delta_t, weights, min_points = args
    try:
        return estimate_trace(tr, g, t_es, delta_t, weights, min_points), None
    except (FitError, RankError) as exc:
        return None, str(exc)


def track_ensemble(
    traces: Sequence[MeasurementTrace],
    g: float,
    t_es: Sequence[float],
    delta_t: float,
    weights: WeightParams | None = None,
    max_fail_fraction: float = 0.1,
    min_points: int = 4,
    jobs: int = 1,
) -> TrackingReport:
    """Predictive/confirming tracking statistics over an ensemble of traces.

    ``jobs > 1`` spreads the per-trace fits over processes; the reduction
    runs in trace order, so the report does not depend on ``jobs``.
    """
    args = [(tr, g, tuple(t_es), delta_t, weights, min_points) for tr in traces]
    if jobs > 1 and len(traces) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_estimate_safe, args, chunksize=max(1, len(args) // (4 * jobs))))
    else:
        outcomes = [_estimate_safe(a) for a in args]
    per_trace = {}
    failed = 0
    for tr, (est, err) in zip(traces, outcomes):
        if est is None:
            log.info("trace %s excluded: %s", tr.trace_id, err)
            failed += 1
        else:
            per_trace[tr.trace_id] = (tr, est)
    if failed > max_fail_fraction * len(traces):
        raise EnsembleError(f"{failed} of {len(traces)} traces failed the fits")
    use_truth = all(tr.truth is not None for tr, _ in per_trace.values())

    points = []
    for t_e in t_es:
        rows = [(tid, tr, est[t_e]) for tid, (tr, est) in per_trace.items() if t_e in est]
        if len(rows) < 3:
            continue
        f1 = np.array([r[2][0] for r in rows])
        f2 = np.array([r[2][1] for r in rows])
        cond, a, resid = conditional_covariance(f1, f2)
        mean_f1 = f1.mean(axis=0)
        var_rho, var_psi, psi = polar_decompose(cond, mean_f1)
        if use_truth:
            lengths, atoms = zip(*(_truth_at(r[1], t_e) for r in rows))
            sql, poisson = benchmarks(float(np.mean(lengths)), float(np.mean(atoms)))
        else:
            # fitted amplitude at t_e and its extrapolation to the first pulse
            lengths = [np.hypot(*r[2][0]) for r in rows]
            starts = [
                np.hypot(*r[2][2].f_ref) * math.exp((r[2][2].t_ref - r[1].times[0]) / r[2][2].params.t2)
                for r in rows
            ]
            sql, poisson = benchmarks(float(np.mean(lengths)), float(np.mean(starts)))
        t_first = min(tr.times[0] for _, tr, _ in rows)
        t_last = max(tr.times[-1] for _, tr, _ in rows)
        full = t_e - delta_t >= t_first and t_e + delta_t <= t_last
        points.append(
            TrackingPoint(
                t_e=t_e,
                mean_f1=mean_f1,
                gamma_f1=cross_cov(f1, f1),
                gamma_f2=cross_cov(f2, f2),
                gamma_f2f1=cross_cov(f2, f1),
                gamma_cond=cond,
                var_rho=var_rho,
                var_psi=var_psi,
                psi=psi,
                sql=sql,
                poisson=poisson,
                db_rho=db_below(poisson, var_rho) if var_rho > 0 else float("inf"),
                db_psi=db_below(sql, var_psi) if var_psi > 0 else float("inf"),
                n_traces=len(rows),
                trace_ids=np.array([r[0] for r in rows]),
                residuals=resid,
                f1=f1,
                f2=f2,
                full_windows=full,
                confirming_full=t_e + delta_t <= t_last,
            )
        )
    return TrackingReport(
        delta_t=delta_t,
        points=points,
        failed_traces=failed,
        benchmark_source="truth" if use_truth else "fit",
    )


def default_te_grid(start: float = 30.0, stop: float = 990.0, step: float = 40.0) -> list[float]:
    return [float(t) for t in np.arange(start, stop + 0.5 * step, step)]


# -- gain check -------------------------------------------------------------------


@dataclass
class GainReport:
    gamma: dict[str, float]
    delta: dict[str, float]
    gamma_stderr: dict[str, float]
    n_points: int
    excluded: int

    @property
    def max_deviation(self) -> float:
        return max(abs(v - 1.0) for v in self.gamma.values())


def fit_free_window(
    trace: MeasurementTrace, g: float, t_e: float, delta_t: float, side: Side,
    init: FidModelParams | None = None,
) -> np.ndarray:
    """``(Fy, Fz)`` at ``t_e`` from one window with every FID parameter free."""
    mask = window_mask(trace.times, t_e, delta_t, side)
    sub = MeasurementTrace(trace.times[mask], trace.angles[mask])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FitBoundaryWarning)
        fit = fit_global(sub, g, float(np.clip(t_e, sub.times[0], sub.times[-1])), init=init)
    if fit.t_ref != t_e:
        # move the estimate to t_e along the fitted decaying rotation
        p = fit.params
        dt = t_e - fit.t_ref
        c, s = math.cos(p.omega_l * dt), math.sin(p.omega_l * dt)
        fy, fz = fit.f_ref
        damp = math.exp(-dt / p.t2)
        return damp * np.array([fy * c + fz * s, fz * c - fy * s])
    return fit.f_ref


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise ValueError("regressor has zero spread")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    icpt = ym - slope * xm
    resid = y - icpt - slope * x
    dof = max(x.size - 2, 1)
    se = math.sqrt((resid @ resid) / dof / sxx)
    return float(slope), float(icpt), se


def fit_gain_check(
    traces: Sequence[MeasurementTrace],
    g: float,
    t_es: float | Sequence[float],
    delta_t: float,
    weights: WeightParams | None = None,
) -> GainReport:
    """Regress fixed-parameter window estimates on all-free window fits.

    One regression ``F_fix = gamma * F_ind + delta`` per component and side;
    ``delta`` is reported in units of the mean atom-number scale of the data.
    """
    if np.ndim(t_es) == 0:
        t_es = [float(t_es)]
    fixed = {k: [] for k in ("y1", "z1", "y2", "z2")}
    free = {k: [] for k in fixed}
    excluded = 0
    for tr in traces:
        try:
            est = estimate_trace(tr, g, t_es, delta_t, weights)
        except (FitError, RankError):
            excluded += 1
            continue
        for t_e, (f1, f2, gfit) in est.items():
            try:
                i1 = fit_free_window(tr, g, t_e, delta_t, "predictive", init=gfit.params)
                i2 = fit_free_window(tr, g, t_e, delta_t, "confirming", init=gfit.params)
            except (FitError, RankError):
                excluded += 1
                continue
            for key, fx, fi in (("y1", f1[0], i1[0]), ("z1", f1[1], i1[1]),
                                ("y2", f2[0], i2[0]), ("z2", f2[1], i2[1])):
                fixed[key].append(fx)
                free[key].append(fi)
    gamma, delta, se = {}, {}, {}
    n = len(fixed["y1"])
    if n < 3:
        raise EnsembleError("too few successful fits for the gain regression")
    scale = max(np.max(np.abs(np.concatenate([np.asarray(v) for v in fixed.values()]))), 1e-300)
    for key in fixed:
        x = np.asarray(free[key])
        y = np.asarray(fixed[key])
        gamma[key], d, se[key] = _ols(x, y)
        delta[key] = float(d / scale)
    return GainReport(gamma=gamma, delta=delta, gamma_stderr=se, n_points=n, excluded=excluded)
