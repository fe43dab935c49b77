"""Independent reference computations used by the tests.

None of these call into the package; they restate the physics or the
statistics from first principles so the package can be checked against them.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate


# -- back-action -------------------------------------------------------------------


def backaction_mc(fy: float, vx: float, vy: float, kappa: float, draws: int, seed: int = 0) -> dict:
    """Monte Carlo changes of <Fy>, var(Fx), var(Fy) under a random z rotation.

    ``theta = g Sz`` with ``var(theta) = kappa / 2``. The same (Fx, Fy)
    samples are used before and after the rotation, so the differences have
    a small Monte Carlo error. Returns ``{name: (value, stderr)}``.
    """
    rng = np.random.default_rng(seed)
    fx0 = rng.standard_normal(draws) * math.sqrt(vx)
    fy0 = fy + rng.standard_normal(draws) * math.sqrt(vy)
    theta = rng.standard_normal(draws) * math.sqrt(kappa / 2.0)
    c, s = np.cos(theta), np.sin(theta)
    fx1 = fx0 * c - fy0 * s
    fy1 = fy0 * c + fx0 * s

    def mean_diff(a, b):
        d = a - b
        return float(d.mean()), float(d.std(ddof=1) / math.sqrt(draws))

    def var_diff(a, b):
        d = (a - a.mean()) ** 2 - (b - b.mean()) ** 2
        return float(d.mean()), float(d.std(ddof=1) / math.sqrt(draws))

    return {
        "d_mean_y": mean_diff(fy1, fy0),
        "d_var_x": var_diff(fx1, fx0),
        "d_var_y": var_diff(fy1, fy0),
    }


def backaction_exact(fy: float, vx: float, vy: float, kappa: float) -> dict:
    """Exact Gaussian averages of the rotation, ``<Fx> = 0`` and no cross terms.

    With ``s = var(theta)``: ``<cos> = exp(-s/2)``, ``<cos^2> = (1 + exp(-2s))/2``.
    Written with expm1 so the O(s) changes keep full precision.
    """
    s = kappa / 2.0
    d_c = math.expm1(-s / 2.0)  # <cos> - 1
    d_c2 = 0.5 * math.expm1(-2.0 * s)  # <cos^2> - 1
    es2 = -d_c2  # <sin^2>
    spread = 0.5 * math.expm1(-s) ** 2  # <cos^2> - <cos>^2
    return {
        "d_mean_y": fy * d_c,
        "d_var_x": vx * d_c2 + (vy + fy * fy) * es2,
        "d_var_y": vy * d_c2 + fy * fy * spread + vx * es2,
    }


def backaction_collected(fy: float, vx: float, vy: float, kappa: float) -> dict:
    """Collected second-order changes with -1/2 mean and -1/4 variance damping.

    These coefficients are the acceptance reference; the Monte Carlo and the
    exact averages above put the mean damping at -1/4 and the variance damping at -1/2.
    """
    return {
        "d_mean_y": -0.5 * kappa * fy,
        "d_var_x": kappa * (-0.25 * vx + 0.5 * (vy + fy * fy)),
        "d_var_y": kappa * (-0.25 * vy + 0.5 * vx),
    }


# -- conditional covariance -------------------------------------------------------------


def schur_complement(cov4: np.ndarray) -> np.ndarray:
    """Error covariance of the best linear prediction of rows 2:4 from rows 0:2."""
    g1, g12, g2 = cov4[:2, :2], cov4[:2, 2:], cov4[2:, 2:]
    return g2 - g12.T @ np.linalg.inv(g1) @ g12


def schur_stderr(cond: np.ndarray, n: int) -> np.ndarray:
    """Wishart standard error of each entry of a sample conditional covariance."""
    d = np.diag(cond)
    return np.sqrt((cond**2 + np.outer(d, d)) / (n - 3))


# -- alpha -----------------------------------------------------------------------------


def alpha_direct_sum(n_pulses: int, chi: float, p: float, noise_weight: float = 0.25) -> float:
    """Closed-form sum for the alternating-sign signal of a stroboscopic train.

    Fz seen by pulse k is ``(-sqrt(chi))^k Fz0`` plus the earlier noise
    injections, each propagated by the same factor. Only the atomic part is
    kept and normalized by its undamped value ``(N_p)^2 N_A / 2`` (per atom).
    """
    r = math.sqrt(chi)
    keep = chi + p - chi * p
    signal = sum(r**k for k in range(n_pulses)) ** 2 * 0.5
    noise = 0.0
    for j in range(n_pulses - 1):
        var_j = noise_weight * (2.0 / 3.0) * p * (1.0 - chi) * keep**j
        noise += var_j * sum(r ** (k - 1 - j) for k in range(j + 1, n_pulses)) ** 2
    return (signal + noise) / (0.5 * n_pulses**2)


# -- coupling moments ---------------------------------------------------------------------


def gaussian_beam_moments_quad(
    axial_fwhm: float, radial_sigma: float, waist: float, wavelength: float, g_peak: float = 1.0
) -> tuple[float, float]:
    """<g>, <g^2> for a Lorentzian x Gaussian cloud in a focused Gaussian beam.

    The radial average is analytic: for r^2 = x^2 + y^2 with x, y ~ N(0, s^2),
    ``E exp(-a r^2) = 1 / (1 + 2 a s^2)``. The axial integral uses quadrature.
    """
    gamma = axial_fwhm / 2.0
    zr = math.pi * waist**2 / wavelength

    def w2(z):
        return waist**2 * (1.0 + (z / zr) ** 2)

    def cauchy(z):
        return gamma / (math.pi * (gamma**2 + z * z))

    def m1(z):
        a = 2.0 / w2(z)
        return cauchy(z) * g_peak * waist**2 / w2(z) / (1.0 + 2.0 * a * radial_sigma**2)

    def m2(z):
        a = 4.0 / w2(z)
        return cauchy(z) * (g_peak * waist**2 / w2(z)) ** 2 / (1.0 + 2.0 * a * radial_sigma**2)

    mu1 = integrate.quad(m1, -np.inf, np.inf, epsabs=0, epsrel=1e-10, limit=500)[0]
    mu2 = integrate.quad(m2, -np.inf, np.inf, epsabs=0, epsrel=1e-10, limit=500)[0]
    return mu1, mu2
