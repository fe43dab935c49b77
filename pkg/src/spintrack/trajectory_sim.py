"""Monte Carlo generation of Faraday-rotation records.

Each repetition draws an atom number, a Larmor frequency and a polarimeter
baseline, prepares a coherent spin state and then runs the pulse train:
precession, a sampled rotation angle, Gaussian conditioning with back-action,
scattering from the V and H pulses and gradient dephasing.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .spin_core import (
    MEAN_DAMPING,
    VAR_DAMPING,
    CoherentSpinStateSpec,
    GaussianSpinState,
    ProbeCoupling,
    StateValidityError,
    check_state,
    condition,
    make_css,
    measure,
    precess,
    scatter_channel,
)

log = logging.getLogger(__name__)

# |gamma| / 2pi for the f=1 ground state of 87Rb, MHz per gauss
GYRO_F1_MHZ_PER_G = 0.7


def larmor_omega_from_field(field_mg: float) -> float:
    """Larmor angular frequency in rad/us for a field given in milligauss."""
    return 2.0 * math.pi * GYRO_F1_MHZ_PER_G * field_mg * 1e-3


# Experimental operating point of the tracking run. The coupling g is tuned so
# that shot noise, back-action and scattering reproduce the measured noise
# margins; the calibrated single-atom coupling is about 7e-8 rad/spin.
REFERENCE_ATOMS = 1.88e6
REFERENCE_PHOTONS_V = 2.74e6
REFERENCE_PHOTONS_H = 1.49e6
REFERENCE_ETA = 3e-10
REFERENCE_P_RETURN = 0.7
REFERENCE_PUMP_EFFICIENCY = 0.98
TUNED_G = 1.1e-7


@dataclass(frozen=True)
class PulseTrainConfig:
    coupling: ProbeCoupling
    css: CoherentSpinStateSpec
    pulse_interval: float = 3.0
    pulse_count: int = 334
    larmor_omega: float = 2.0 * math.pi / 38.0
    t2_gradient: float = 20000.0
    omega_jitter_rms: float = 2e-4
    phi0_offset: float = 0.0
    phi0_drift_rms: float = 0.0
    readout_scale: float = 1.0
    backaction: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.pulse_interval > 0:
            raise ValueError("pulse_interval must be positive")
        if self.pulse_count < 1:
            raise ValueError("pulse_count must be at least 1")
        if not self.t2_gradient > 0:
            raise ValueError("t2_gradient must be positive")
        if self.readout_scale < 0:
            raise ValueError("readout_scale must be non-negative")

    @property
    def times(self) -> np.ndarray:
        return self.pulse_interval * np.arange(self.pulse_count)

    @property
    def readout_var_angle(self) -> float:
        """Shot-noise variance of one rotation angle, rad^2."""
        if self.coupling.photons_v == 0:
            return 0.0
        return self.readout_scale / (2.0 * self.coupling.sx)

    def noiseless(self) -> "PulseTrainConfig":
        """Same train with every random and dissipative ingredient switched off."""
        return replace(
            self,
            coupling=replace(self.coupling, eta=0.0),
            css=replace(self.css, atoms_poisson=False, projection_noise=False),
            omega_jitter_rms=0.0,
            phi0_drift_rms=0.0,
            readout_scale=0.0,
            backaction=False,
        )


def reference_config(seed: int = 0, **overrides) -> "PulseTrainConfig":
    """Pulse train at the experimental operating point; keyword overrides win."""
    coupling = ProbeCoupling(
        g=overrides.pop("g", TUNED_G),
        photons_v=overrides.pop("photons_v", REFERENCE_PHOTONS_V),
        photons_h=overrides.pop("photons_h", REFERENCE_PHOTONS_H),
        eta=overrides.pop("eta", REFERENCE_ETA),
        p_return=overrides.pop("p_return", REFERENCE_P_RETURN),
    )
    css = CoherentSpinStateSpec(
        atoms_mean=overrides.pop("atoms_mean", REFERENCE_ATOMS),
        atoms_poisson=overrides.pop("atoms_poisson", True),
        pump_efficiency=overrides.pop("pump_efficiency", REFERENCE_PUMP_EFFICIENCY),
        projection_noise=overrides.pop("projection_noise", True),
    )
    return PulseTrainConfig(coupling=coupling, css=css, seed=seed, **overrides)


@dataclass
class TraceTruth:
    fy: np.ndarray
    fz: np.ndarray
    atoms: np.ndarray
    atoms_drawn: float
    omega: float
    phi0: float


@dataclass
class MeasurementTrace:
    times: np.ndarray
    angles: np.ndarray
    truth: TraceTruth | None = None
    trace_id: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.angles = np.asarray(self.angles, dtype=float)
        if self.times.shape != self.angles.shape or self.times.ndim != 1:
            raise ValueError("times and angles must be 1-d arrays of equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(self.angles)):
            raise ValueError("angles must be finite")

    def __len__(self) -> int:
        return self.times.size


class TraceError(RuntimeError):
    def __init__(self, message: str, trace_index: int | None = None):
        super().__init__(message)
        self.trace_index = trace_index


def derive_seed(master: int, index: int) -> int:
    """Per-trace seed: a 64-bit hash of ``(master, index)``."""
    ss = np.random.SeedSequence([int(master) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def simulate_trace(config: PulseTrainConfig, trace_id: int = 0) -> MeasurementTrace:
    """One repetition of the pulse train, deterministic in ``config.seed``.

    The inner loop is an unrolled float version of :func:`spin_core.precess`,
    :func:`spin_core.measure` and :func:`spin_core.scatter_channel`;
    :func:`simulate_trace_reference` composes those functions directly.
    """
    rng = np.random.default_rng(config.seed)
    draws = _draw_trace_randomness(config, rng)
    atoms0, omega, phi0, noise = draws
    cpl = config.coupling
    n = config.pulse_count
    times = config.times
    dt = config.pulse_interval

    state = make_css(config.css, atoms0)
    mx, my, mz = (float(v) for v in state.mean)
    c = state.cov
    cxx, cxy, cxz = float(c[0, 0]), float(c[0, 1]), float(c[0, 2])
    cyy, cyz, czz = float(c[1, 1]), float(c[1, 2]), float(c[2, 2])
    atoms = atoms0

    g = cpl.g
    decay = math.exp(-dt / config.t2_gradient)
    ro_angle = config.readout_var_angle
    measuring = g > 0 and cpl.photons_v > 0
    ro_spin = ro_angle / g**2 if measuring else math.inf
    kappa = g**2 * cpl.sx if (config.backaction and measuring) else 0.0
    p = cpl.p_return
    chis = [cpl.survival(ph) for ph in (cpl.photons_v, cpl.photons_h)]

    angles = np.empty(n)
    fy = np.empty(n)
    fz = np.empty(n)
    n_atoms = np.empty(n)
    for k in range(n):
        if k > 0:
            theta = omega * dt
            co, si = math.cos(theta), math.sin(theta)
            my, mz = co * my + si * mz, -si * my + co * mz
            cxy, cxz = co * cxy + si * cxz, -si * cxy + co * cxz
            cyy, cyz, czz = (
                co * co * cyy + 2 * co * si * cyz + si * si * czz,
                -co * si * cyy + (co * co - si * si) * cyz + co * si * czz,
                si * si * cyy - 2 * co * si * cyz + co * co * czz,
            )
            mx *= decay
            my *= decay
            mz *= decay
        fy[k], fz[k] = my, mz
        n_atoms[k] = atoms

        sd = math.sqrt(max(g * g * czz + ro_angle, 0.0))
        phi = g * mz + phi0 + sd * noise[k]
        angles[k] = phi

        if measuring:
            if kappa:
                vx, vy = cxx, cyy
                cxx = vx + kappa * (-VAR_DAMPING * vx + 0.5 * (vy + my * my))
                cyy = vy + kappa * (-VAR_DAMPING * vy + 0.5 * vx)
            tot = czz + ro_spin
            if tot > 0 and math.isfinite(tot):
                innov = (phi - phi0) / g - mz
                kx, ky, kz = cxz / tot, cyz / tot, czz / tot
                damp = 1.0 - MEAN_DAMPING * kappa
                mx = mx * damp + kx * innov * damp
                my = my * damp + ky * innov * damp
                mz = mz + kz * innov
                cxx -= kx * cxz
                cxy -= kx * cyz
                cyy -= ky * cyz
                cxz, cyz, czz = cxz - kx * czz, cyz - ky * czz, czz - kz * czz
            elif kappa:
                damp = 1.0 - MEAN_DAMPING * kappa
                mx *= damp
                my *= damp

        for chi in chis:
            if chi == 1.0:
                continue
            add = (2.0 / 3.0) * p * (1.0 - chi) * atoms
            cxx = chi * cxx + add
            cyy = chi * cyy + add
            czz = chi * czz + add
            cxy *= chi
            cxz *= chi
            cyz *= chi
            mx *= chi
            my *= chi
            mz *= chi
            atoms *= chi + p - chi * p

        if not _valid(cxx, cxy, cxz, cyy, cyz, czz, mx, my, mz, atoms):
            bad = GaussianSpinState(
                [mx, my, mz],
                [[cxx, cxy, cxz], [cxy, cyy, cyz], [cxz, cyz, czz]],
                atoms,
                times[k],
            )
            raise TraceError(
                f"invalid state at pulse {k} (t={times[k]:.1f} us): "
                + "; ".join(check_state(bad) or ["minor test failed"]),
                trace_id,
            )

    truth = TraceTruth(fy=fy, fz=fz, atoms=n_atoms, atoms_drawn=atoms0, omega=omega, phi0=phi0)
    return MeasurementTrace(times=times.copy(), angles=angles, truth=truth, trace_id=trace_id)


def _valid(cxx, cxy, cxz, cyy, cyz, czz, mx, my, mz, atoms) -> bool:
    if not (math.isfinite(cxx + cyy + czz + mx + my + mz)):
        return False
    eps = -1e-9 * abs(cxx + cyy + czz)
    if cxx < eps or cyy < eps or czz < eps:
        return False
    scale = max(cxx, cyy, czz, 1e-300) ** 2
    tol = -1e-9 * scale
    if cxx * cyy - cxy * cxy < tol or cxx * czz - cxz * cxz < tol or cyy * czz - cyz * cyz < tol:
        return False
    det = (
        cxx * (cyy * czz - cyz * cyz)
        - cxy * (cxy * czz - cyz * cxz)
        + cxz * (cxy * cyz - cyy * cxz)
    )
    if det < -1e-9 * scale * max(cxx, cyy, czz, 1e-300):
        return False
    if atoms < 0:
        return False
    if cyy * czz < 0.25 * mx * mx - 1e-6 * (atoms / 2.0) ** 2:
        return False
    return math.sqrt(mx * mx + my * my + mz * mz) <= atoms * (1 + 1e-6) + 1.0


def _draw_trace_randomness(config: PulseTrainConfig, rng: np.random.Generator):
    css = config.css
    atoms = float(rng.poisson(css.atoms_mean)) if css.atoms_poisson else float(css.atoms_mean)
    omega = config.larmor_omega + config.omega_jitter_rms * rng.standard_normal()
    phi0 = config.phi0_offset + config.phi0_drift_rms * rng.standard_normal()
    noise = rng.standard_normal(config.pulse_count)
    return atoms, omega, phi0, noise


def simulate_trace_reference(config: PulseTrainConfig, trace_id: int = 0) -> MeasurementTrace:
    """Slow path of :func:`simulate_trace` built from the ``spin_core`` maps."""
    rng = np.random.default_rng(config.seed)
    atoms0, omega, phi0, noise = _draw_trace_randomness(config, rng)
    cpl = config.coupling
    dt = config.pulse_interval
    decay = math.exp(-dt / config.t2_gradient)
    ro_angle = config.readout_var_angle
    measuring = cpl.g > 0 and cpl.photons_v > 0
    ro_spin = ro_angle / cpl.g**2 if measuring else math.inf
    state = make_css(config.css, atoms0)
    n = config.pulse_count
    times = config.times
    angles, fy, fz, n_atoms = (np.empty(n) for _ in range(4))
    for k in range(n):
        if k > 0:
            state = precess(state, omega * dt)
            state = GaussianSpinState(decay * state.mean, state.cov, state.atoms, times[k])
        fy[k], fz[k] = state.mean[1], state.mean[2]
        n_atoms[k] = state.atoms
        sd = math.sqrt(max(cpl.g**2 * state.cov[2, 2] + ro_angle, 0.0))
        phi = cpl.g * state.mean[2] + phi0 + sd * noise[k]
        angles[k] = phi
        if measuring:
            fz_meas = (phi - phi0) / cpl.g
            if config.backaction:
                state = measure(state, cpl, fz_meas, readout_scale=config.readout_scale)
            else:
                state = condition(state, fz_meas, ro_spin)
        state = scatter_channel(state, cpl, cpl.photons_v)
        state = scatter_channel(state, cpl, cpl.photons_h)
        problems = check_state(state)
        if problems:
            raise TraceError(f"invalid state at pulse {k}: " + "; ".join(problems), trace_id)
    truth = TraceTruth(fy=fy, fz=fz, atoms=n_atoms, atoms_drawn=atoms0, omega=omega, phi0=phi0)
    return MeasurementTrace(times=times.copy(), angles=angles, truth=truth, trace_id=trace_id)


def _simulate_indexed(args) -> MeasurementTrace:
    config, index = args
    return simulate_trace(replace(config, seed=derive_seed(config.seed, index)), trace_id=index)


def simulate_ensemble(
    config: PulseTrainConfig, repetitions: int, jobs: int = 1
) -> list[MeasurementTrace]:
    """``repetitions`` independent traces seeded from ``config.seed``.

    Trace ``i`` uses the seed ``derive_seed(config.seed, i)``, so the content
    does not depend on ``jobs`` or on execution order.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    tasks = [(config, i) for i in range(repetitions)]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                return list(pool.map(_simulate_indexed, tasks, chunksize=8))
        return [_simulate_indexed(t) for t in tasks]
    except TraceError as exc:
        raise TraceError(f"trace {exc.trace_index}: {exc}", exc.trace_index) from exc


def fid_signal(
    times: np.ndarray, fy: float, fz: float, g: float, omega: float, t2: float, phi0: float,
    t_ref: float = 0.0,
) -> np.ndarray:
    """Free-induction-decay rotation signal referenced to ``t_ref``."""
    tr = np.asarray(times, dtype=float) - t_ref
    return g * (fz * np.cos(omega * tr) - fy * np.sin(omega * tr)) * np.exp(-tr / t2) + phi0


def polarimeter_roundtrip(
    phi_true: float, photons: float, seed: int | np.random.Generator | None = None,
    shot_noise: bool = True,
) -> float:
    """One rotation angle through the balanced polarimeter and arcsin estimator."""
    est, _ = polarimeter_samples(phi_true, photons, 1, seed, shot_noise=shot_noise)
    return float(est[0])


def polarimeter_samples(
    phi_true: float,
    photons: float,
    samples: int,
    seed: int | np.random.Generator | None = None,
    shot_noise: bool = True,
    return_noise: bool = False,
):
    """Vectorised polarimeter reconstruction.

    Returns ``(phi_hat, clamped)`` where ``clamped`` counts samples with
    ``|Sy'/Sx| > 1``; with ``return_noise`` the normalized shot-noise draws
    ``Sy/Sx`` are appended.
    """
    if not abs(phi_true) < math.pi / 2:
        raise ValueError("|phi_true| must be below pi/2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sx = photons / 2.0
    if shot_noise:
        ratio_noise = rng.standard_normal(samples) * math.sqrt(1.0 / (2.0 * sx))
    else:
        ratio_noise = np.zeros(samples)
    # Sy' = Sy cos(phi) + Sx sin(phi)
    ratio = math.sin(phi_true) + ratio_noise * math.cos(phi_true)
    over = np.abs(ratio) > 1
    clamped = int(over.sum())
    if clamped:
        log.warning("polarimeter: %d samples clamped to |Sy'/Sx| = 1", clamped)
        ratio = np.clip(ratio, -1.0, 1.0)
    phi_hat = np.arcsin(ratio)
    if return_noise:
        return phi_hat, clamped, ratio_noise
    return phi_hat, clamped


def arcsin_distortion(phi: float, ratio_var: float) -> float:
    """Leading mean distortion of the arcsin estimator, (1/2) var tan(phi)."""
    return 0.5 * ratio_var * math.tan(phi)


def distortion_bias(
    phi: float, photons: float, samples: int, seed: int | None = None, chunk: int = 1_000_000
) -> tuple[float, float]:
    """Monte Carlo mean bias of the arcsin estimator with its standard error.

    The linear shot-noise term has zero mean exactly, so it is subtracted
    from each sample as a control variate.
    """
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        est, _, noise = polarimeter_samples(phi, photons, m, rng, return_noise=True)
        resid = est - phi - noise
        total += resid.sum()
        total_sq += (resid**2).sum()
        done += m
    mean = total / samples
    var = total_sq / samples - mean**2
    return mean, math.sqrt(max(var, 0.0) / samples)
