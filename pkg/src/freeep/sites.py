"""Tilted moments of the exact factors under a Gaussian cavity.

Every closed form here accepts scalars or equally-shaped arrays, so the
solvers call them once per sweep for all coordinates of a block.  The
``quadrature_oracle`` is a deliberately naive trapezoid integrator that the
tests use as ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidParameter, NoBracket, NonFinite, ZeroMass
from .model import (
    GaussianLikelihood,
    GaussianPrior,
    ProbitLikelihood,
    SpikeSlabPrior,
)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CavityGaussian:
    """Gaussian ``N(theta | mean, var)`` playing the role of the cavity."""

    mean: float | np.ndarray
    var: float | np.ndarray

    def __post_init__(self):
        var = np.asarray(self.var, dtype=float)
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise InvalidParameter("cavity variance must be finite and > 0")
        if not np.all(np.isfinite(np.asarray(self.mean, dtype=float))):
            raise NonFinite("cavity mean must be finite")

    @classmethod
    def from_natural(cls, gamma, lam):
        lam = np.asarray(lam, dtype=float)
        return cls(np.asarray(gamma, dtype=float) / lam, 1.0 / lam)


@dataclass(frozen=True)
class TiltedMoments:
    mean: float | np.ndarray
    var: float | np.ndarray
    log_partition: float | np.ndarray


def _log_normal_pdf(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _finite(m: TiltedMoments) -> TiltedMoments:
    for a in (m.mean, m.var, m.log_partition):
        if not np.all(np.isfinite(a)):
            raise NonFinite("tilted moments are not finite")
    return m


def tilted_gaussian_prior(c: CavityGaussian, prior_mean, prior_var) -> TiltedMoments:
    prior_var = np.asarray(prior_var, dtype=float)
    if np.any(prior_var <= 0):
        raise InvalidParameter("prior variance must be > 0")
    return _finite(_gaussian_kernel(c.mean, c.var, prior_mean, prior_var))


def _gaussian_kernel(m, v, prior_mean, prior_var) -> TiltedMoments:
    var = 1.0 / (1.0 / v + 1.0 / prior_var)
    mean = var * (m / v + prior_mean / prior_var)
    logz = _log_normal_pdf(prior_mean, m, v + prior_var)
    return TiltedMoments(mean, var, logz)


def tilted_spike_slab(c: CavityGaussian, rho: float, slab_var: float) -> TiltedMoments:
    """Moments of ``N(w | c) * ((1-rho) delta(w) + rho N(w | 0, slab_var))``.

    The slab responsibility is formed from log-weights so that very
    confident cavities do not overflow the weight ratio.
    """
    if not 0.0 < rho <= 1.0:
        raise InvalidParameter(f"rho must lie in (0, 1], got {rho}")
    if not slab_var > 0:
        raise InvalidParameter(f"slab_var must be > 0, got {slab_var}")
    return _finite(_spike_slab_kernel(np.asarray(c.mean, dtype=float), np.asarray(c.var, dtype=float),
                                      rho, slab_var))


def _spike_slab_kernel(m, v, rho, slab_var) -> TiltedMoments:
    v_slab = 1.0 / (1.0 / v + 1.0 / slab_var)
    m_slab = v_slab * m / v
    log_slab = math.log(rho) + _log_normal_pdf(0.0, m, v + slab_var)
    if rho == 1.0:
        resp = np.ones_like(m)
        logz = log_slab
    else:
        log_spike = math.log1p(-rho) + _log_normal_pdf(0.0, m, v)
        resp = special.expit(log_slab - log_spike)
        logz = np.logaddexp(log_slab, log_spike)
    mean = resp * m_slab
    # second moment minus squared mean, arranged to avoid cancellation
    var = resp * v_slab + resp * (1.0 - resp) * m_slab**2
    return TiltedMoments(mean, var, logz)


def _inv_mills(t):
    """phi(t) / Phi(t), stable for all t via the scaled complementary erf."""
    return math.sqrt(2.0 / math.pi) / special.erfcx(-np.asarray(t, dtype=float) / math.sqrt(2.0))


def tilted_probit(c: CavityGaussian, label, noise_var: float = 1.0) -> TiltedMoments:
    """Moments of ``N(z | c) * Phi(label * z / sqrt(noise_var))``."""
    label = np.asarray(label, dtype=float)
    if not np.all(np.abs(label) == 1.0):
        raise InvalidParameter("probit labels must be +1 or -1")
    if not noise_var > 0:
        raise InvalidParameter(f"noise_var must be > 0, got {noise_var}")
    return _finite(_probit_kernel(np.asarray(c.mean, dtype=float), np.asarray(c.var, dtype=float),
                                  label, noise_var))


def _probit_kernel(m, v, label, noise_var) -> TiltedMoments:
    s = np.sqrt(noise_var + v)
    t = label * m / s
    r = _inv_mills(t)
    mean = m + label * v * r / s
    # t + r loses digits only for t << -6; erfcx keeps r itself exact there
    var = v - v**2 * r * (t + r) / s**2
    var = np.maximum(var, 0.0)
    logz = special.log_ndtr(t)
    return TiltedMoments(mean, var, logz)


def quadrature_oracle(c: CavityGaussian, site_density, n_points: int = 64) -> TiltedMoments:
    """Trapezoid moments of ``N(x | c) * site_density(x)``.

    The first window is ``mean +- 12 sd`` of the cavity.  On each window the
    point count doubles until mass, mean and variance all change by less than
    1e-10 relative.  The window is then moved to the tilted mean +- 12 tilted
    sd until it covers that range, so sites that pull the mass far from the
    cavity are still integrated where the mass lies.  ``site_density`` must
    accept a 1-D array.
    """
    if n_points < 64:
        raise InvalidParameter("n_points must be at least 64")
    m, v = float(c.mean), float(c.var)

    def integrate(lo, hi, n, scale_sd):
        x = np.linspace(lo, hi, n + 1)
        f = np.exp(_log_normal_pdf(x, m, v)) * np.asarray(site_density(x), dtype=float)
        if np.any(f < 0):
            raise InvalidParameter("site density must be nonnegative")
        z = np.trapezoid(f, x)
        if not z > 1e-300:
            raise ZeroMass("tilted density integrates to (numerically) zero")
        mean = np.trapezoid(x * f, x) / z
        var = np.trapezoid((x - mean) ** 2 * f, x) / z
        return np.array([z, mean, var])

    def refine(lo, hi, scale_sd):
        n = n_points
        prev = integrate(lo, hi, n, scale_sd)
        for _ in range(20):
            n *= 2
            cur = integrate(lo, hi, n, scale_sd)
            floor = np.array([1e-300, scale_sd, scale_sd**2])
            if np.all(np.abs(cur - prev) <= 1e-10 * np.maximum(np.abs(cur), floor)):
                break
            prev = cur
        return cur

    sd = math.sqrt(v)
    lo, hi = m - 12 * sd, m + 12 * sd
    cur = refine(lo, hi, sd)
    for _ in range(10):
        t_mean, t_sd = cur[1], math.sqrt(max(cur[2], 0.0))
        if t_sd == 0.0 or (lo <= t_mean - 12 * t_sd and t_mean + 12 * t_sd <= hi):
            break
        lo, hi = t_mean - 12 * t_sd, t_mean + 12 * t_sd
        cur = refine(lo, hi, t_sd)
    z, mean, var = cur
    return TiltedMoments(mean, var, math.log(z))


def monotone_link_inverse(target_eta: float, c_lambda: float, label: int, noise_var: float = 1.0,
                          tol: float = 1e-10) -> float:
    """Invert ``gamma -> tilted_probit(N(gamma/c_lambda, 1/c_lambda)).mean``.

    The map is strictly increasing with derivative equal to the tilted
    variance, which drives the Newton steps; bisection keeps every iterate
    inside the bracket.
    """
    if not c_lambda > 0:
        raise InvalidParameter("c_lambda must be > 0")
    if not math.isfinite(target_eta):
        raise NonFinite("target_eta must be finite")

    def f(g):
        mom = tilted_probit(CavityGaussian(g / c_lambda, 1.0 / c_lambda), label, noise_var)
        return float(mom.mean) - target_eta, float(mom.var)

    limit = 1e6
    lo, hi = -1.0, 1.0
    while f(lo)[0] > 0:
        if lo <= -limit:
            raise NoBracket("no sign change for gamma in [-1e6, 1e6]")
        lo = max(2.0 * lo, -limit)
    while f(hi)[0] < 0:
        if hi >= limit:
            raise NoBracket("no sign change for gamma in [-1e6, 1e6]")
        hi = min(2.0 * hi, limit)

    g = 0.0 if lo < 0.0 < hi else 0.5 * (lo + hi)
    for _ in range(200):
        r, d = f(g)
        if abs(r) <= tol:
            return g
        if r > 0:
            hi = g
        else:
            lo = g
        step = g - r / d if d > 0 else None
        g = step if step is not None and lo < step < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15 * max(1.0, abs(g)):
            break
    if abs(f(g)[0]) > tol:
        raise NoBracket("root finder stalled before reaching tolerance")
    return g


def prior_moments(prior, cav_mean, cav_var, checked: bool = True) -> TiltedMoments:
    """Tilted moments of a prior factor.

    ``checked=False`` skips argument validation; the solvers use it inside
    sweeps, where cavity variances are positive by construction and the
    problem was validated once up front.  Non-finite output is still caught.
    """
    if not checked:
        if isinstance(prior, SpikeSlabPrior):
            return _finite(_spike_slab_kernel(cav_mean, cav_var, prior.rho, prior.slab_var))
        if isinstance(prior, GaussianPrior):
            return _finite(_gaussian_kernel(cav_mean, cav_var, prior.mean, prior.var))
    c = CavityGaussian(cav_mean, cav_var)
    if isinstance(prior, GaussianPrior):
        return tilted_gaussian_prior(c, prior.mean, prior.var)
    if isinstance(prior, SpikeSlabPrior):
        return tilted_spike_slab(c, prior.rho, prior.slab_var)
    raise InvalidParameter(f"unknown prior {prior!r}")


def likelihood_moments(likelihood, y, cav_mean, cav_var, checked: bool = True) -> TiltedMoments:
    """Tilted moments of the likelihood factor; ``checked`` as in :func:`prior_moments`."""
    if not checked:
        if isinstance(likelihood, ProbitLikelihood):
            return _finite(_probit_kernel(cav_mean, cav_var, y, likelihood.noise_var))
        if isinstance(likelihood, GaussianLikelihood):
            return _finite(_gaussian_kernel(cav_mean, cav_var, y, likelihood.noise_var))
    c = CavityGaussian(cav_mean, cav_var)
    if isinstance(likelihood, GaussianLikelihood):
        return tilted_gaussian_prior(c, y, likelihood.noise_var)
    if isinstance(likelihood, ProbitLikelihood):
        return tilted_probit(c, y, likelihood.noise_var)
    raise InvalidParameter(f"unknown likelihood {likelihood!r}")
