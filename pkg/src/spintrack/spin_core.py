"""Gaussian description of a collective f=1 spin and the per-pulse physics maps.

All quantities are in spin units (hbar = 1). A state carries the mean spin
vector ``(<Fx>, <Fy>, <Fz>)``, its 3x3 covariance, the effective number of
atoms and the current time in microseconds.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "GaussianSpinState",
    "ProbeCoupling",
    "CoherentSpinStateSpec",
    "StateValidityError",
    "make_css",
    "precess",
    "qnd_update",
    "condition",
    "measure",
    "scatter_channel",
    "check_state",
    "robertson_bound",
]

X, Y, Z = 0, 1, 2


class StateValidityError(ValueError):
    """Raised when a physics map produces a state that violates the invariants."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = violations or []


@dataclass(frozen=True)
class GaussianSpinState:
    mean: np.ndarray
    cov: np.ndarray
    atoms: float
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(3))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float).reshape(3, 3))

    @property
    def fy_fz(self) -> np.ndarray:
        return self.mean[1:].copy()

    def var(self, axis: int) -> float:
        return float(self.cov[axis, axis])

    def second_moment(self, axis: int) -> float:
        return float(self.cov[axis, axis] + self.mean[axis] ** 2)


@dataclass(frozen=True)
class ProbeCoupling:
    """Light-atom coupling for one V probe pulse and its H compensation pulse.

    ``g`` is the rotation angle (rad) per unit of Fz, ``eta`` the scattering
    probability per photon and ``p_return`` the fraction of scattered atoms
    that fall back into f=1 with random polarization.
    """

    g: float
    photons_v: float
    photons_h: float = 0.0
    eta: float = 0.0
    p_return: float = 0.0

    def __post_init__(self):
        if self.photons_v < 0 or self.photons_h < 0:
            raise ValueError("photon numbers must be non-negative")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0.0 <= self.p_return <= 1.0:
            raise ValueError("p_return must lie in [0, 1]")

    @property
    def sx(self) -> float:
        """|<Sx>| of one V pulse."""
        return self.photons_v / 2.0

    def survival(self, photons: float) -> float:
        """Fraction of atoms that do not scatter during ``photons`` photons."""
        return float(np.exp(-self.eta * photons))

    @property
    def chi(self) -> float:
        return self.survival(self.photons_v)

    @property
    def xi(self) -> float:
        return 1.0 - self.chi


@dataclass(frozen=True)
class CoherentSpinStateSpec:
    atoms_mean: float
    atoms_poisson: bool = True
    pump_efficiency: float = 1.0
    projection_noise: bool = True

    def __post_init__(self):
        if self.atoms_mean < 0:
            raise ValueError("atoms_mean must be non-negative")
        if not 0.0 <= self.pump_efficiency <= 1.0:
            raise ValueError("pump_efficiency must lie in [0, 1]")


def make_css(spec: CoherentSpinStateSpec, atoms_draw: float) -> GaussianSpinState:
    """Fy-polarized coherent spin state of ``atoms_draw`` f=1 atoms.

    Imperfect pumping shortens <Fy> and leaves a residual variance
    ``(1 - efficiency) * atoms`` along Fy.
    """
    if atoms_draw < 0:
        raise ValueError(f"atoms_draw must be non-negative, got {atoms_draw}")
    n = float(atoms_draw)
    mean = np.array([0.0, spec.pump_efficiency * n, 0.0])
    if spec.projection_noise:
        cov = np.diag([n / 2.0, (1.0 - spec.pump_efficiency) * n, n / 2.0])
    else:
        cov = np.zeros((3, 3))
    return GaussianSpinState(mean, cov, n, 0.0)


def rotation_x(angle: float) -> np.ndarray:
    """Rotation in the Fy-Fz plane: Fz -> Fz cos a - Fy sin a, Fy -> Fy cos a + Fz sin a."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def precess(state: GaussianSpinState, angle: float) -> GaussianSpinState:
    r = rotation_x(angle)
    cov = r @ state.cov @ r.T
    return replace(state, mean=r @ state.mean, cov=0.5 * (cov + cov.T))


def qnd_update(
    state: GaussianSpinState, coupling: ProbeCoupling, readout_scale: float = 1.0
) -> tuple[GaussianSpinState, float]:
    """Covariance update of one QND probe pulse, without the measured value.

    Applies the pooled prior/posterior reduction of var(Fz) (as a full Gaussian
    conditioning of the covariance) and the second-order back-action of the
    random rotation ``g*Sz`` about z. Returns the new state and the readout
    variance of the pulse in spin units. The mean is only touched by the
    back-action damping; use :func:`condition` to fold in an outcome.
    """
    if coupling.photons_v == 0:
        return state, float("inf")
    kappa = coupling.g**2 * coupling.sx
    readout_var = readout_scale / (2.0 * kappa) if kappa > 0 else float("inf")

    mean, cov = _backaction(state.mean, state.cov, kappa)
    cov = _kalman_cov(cov, readout_var)
    new = replace(state, mean=mean, cov=cov)
    _raise_if_invalid(new, "qnd_update")
    return new, readout_var


# Second-order moments of a rotation about z by theta = g*Sz with
# var(theta) = kappa/2: <cos theta> = 1 - kappa/4 and <cos^2 theta> = 1 - kappa/2.
MEAN_DAMPING = 0.25
VAR_DAMPING = 0.5


def _backaction(mean: np.ndarray, cov: np.ndarray, kappa: float):
    mean = mean.copy()
    cov = cov.copy()
    vx, vy = cov[X, X], cov[Y, Y]
    fy2 = vy + mean[Y] ** 2
    cov[X, X] = vx + kappa * (-VAR_DAMPING * vx + 0.5 * fy2)
    cov[Y, Y] = vy + kappa * (-VAR_DAMPING * vy + 0.5 * vx)
    mean[Y] -= MEAN_DAMPING * kappa * mean[Y]
    mean[X] -= MEAN_DAMPING * kappa * mean[X]
    return mean, cov


def _kalman_cov(cov: np.ndarray, readout_var: float) -> np.ndarray:
    vz = cov[Z, Z]
    if np.isinf(readout_var) or vz + readout_var <= 0:
        return cov
    col = cov[:, Z].copy()
    new = cov - np.outer(col, col) / (vz + readout_var)
    return 0.5 * (new + new.T)


def condition(
    state: GaussianSpinState, fz_measured: float, readout_var: float
) -> GaussianSpinState:
    """Gaussian conditioning of the state on a readout ``Fz + noise``.

    ``fz_measured`` and ``readout_var`` are in spin units.
    """
    vz = state.cov[Z, Z]
    total = vz + readout_var
    if np.isinf(readout_var) or total <= 0:
        return state
    gain = state.cov[:, Z] / total
    mean = state.mean + gain * (fz_measured - state.mean[Z])
    return replace(state, mean=mean, cov=_kalman_cov(state.cov, readout_var))


def measure(
    state: GaussianSpinState,
    coupling: ProbeCoupling,
    fz_measured: float,
    readout_scale: float = 1.0,
) -> GaussianSpinState:
    """One probe pulse with a known outcome: conditioning plus back-action.

    The covariance is the one returned by :func:`qnd_update`; the mean is
    shifted by the Kalman gain and damped by the back-action rotation.
    """
    if coupling.photons_v == 0:
        return state
    new, readout_var = qnd_update(state, coupling, readout_scale)
    vz = state.cov[Z, Z]
    if np.isfinite(readout_var) and vz + readout_var > 0:
        gain = state.cov[:, Z] / (vz + readout_var)
        shift = gain * (fz_measured - state.mean[Z])
        # back-action damping acts on the conditioned mean, Fz row untouched
        kappa = coupling.g**2 * coupling.sx
        shift[X] *= 1 - MEAN_DAMPING * kappa
        shift[Y] *= 1 - MEAN_DAMPING * kappa
        new = replace(new, mean=new.mean + shift)
    return new


def scatter_channel(
    state: GaussianSpinState, coupling: ProbeCoupling, photons_this_step: float
) -> GaussianSpinState:
    """Off-resonant scattering of ``photons_this_step`` photons.

    Scattered atoms either leave f=1 or return with random polarization, so
    the covariance relaxes as ``chi*cov + (2/3) p (1-chi) N I`` and only the
    unscattered atoms keep their polarization.
    """
    if photons_this_step < 0:
        raise ValueError("photons_this_step must be non-negative")
    chi = coupling.survival(photons_this_step)
    p = coupling.p_return
    if chi == 1.0:
        return state
    cov = chi * state.cov + (2.0 / 3.0) * p * (1.0 - chi) * state.atoms * np.eye(3)
    atoms = (chi + p - chi * p) * state.atoms
    return replace(state, mean=chi * state.mean, cov=cov, atoms=atoms)


def robertson_bound(state: GaussianSpinState) -> float:
    return 0.25 * state.mean[X] ** 2


def check_state(state: GaussianSpinState) -> list[str]:
    """List of violated state invariants, empty when the state is valid."""
    problems = []
    cov = state.cov
    if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(state.mean)):
        return ["non-finite entries in mean or covariance"]
    asym = np.max(np.abs(cov - cov.T))
    scale = max(abs(np.trace(cov)), 1e-300)
    if asym > 1e-9 * scale:
        problems.append(f"covariance not symmetric (max asymmetry {asym:.3e})")
    eig_min = float(np.linalg.eigvalsh(0.5 * (cov + cov.T)).min())
    eps_psd = 1e-9 * abs(np.trace(cov))
    if eig_min < -eps_psd:
        problems.append(f"covariance not PSD (min eigenvalue {eig_min:.3e})")
    eps_rob = 1e-6 * (state.atoms / 2.0) ** 2
    lhs = cov[Y, Y] * cov[Z, Z]
    rhs = robertson_bound(state)
    if lhs < rhs - eps_rob:
        problems.append(f"Robertson violated: var(Fy)var(Fz)={lhs:.3e} < <Fx>^2/4={rhs:.3e}")
    if state.atoms < 0:
        problems.append(f"negative atom number {state.atoms:.3e}")
    length = float(np.linalg.norm(state.mean))
    # Gaussian fluctuations may lengthen |<F>| by O(1) spin units
    if length > state.atoms * (1 + 1e-6) + 1.0:
        problems.append(f"|<F>|={length:.6e} exceeds atom number {state.atoms:.6e}")
    return problems


def _raise_if_invalid(state: GaussianSpinState, where: str) -> None:
    problems = check_state(state)
    if problems:
        raise StateValidityError(f"{where}: " + "; ".join(problems), problems)
