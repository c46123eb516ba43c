"""Scalar-EP with a one-off SVD so each sweep costs O(K^2 + N K)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter, NonFinite, SingularMatrix
from .model import EpState, GlmProblem, InitConfig, init_state, validate_problem
from .sites import likelihood_moments, prior_moments
from .solver_diag import SolverConfig, moment_change, summarize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SvdCache:
    """``X = U diag(s) V^T`` with full square bases.

    ``t`` holds the K eigenvalues of ``X^T X`` (squared singular values,
    zero-padded when N < K) in the column order of ``right_basis``.
    """

    singular_values: np.ndarray
    right_basis: np.ndarray  # K x K, columns are right singular vectors
    left_basis: np.ndarray  # N x N
    t: np.ndarray

    @property
    def N(self) -> int:
        return self.left_basis.shape[0]

    @property
    def K(self) -> int:
        return self.right_basis.shape[0]


def precompute_svd(X) -> SvdCache:
    """Full SVD of X; O(max(N, K)^3) once, amortised over all sweeps."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise NonFinite("X must be finite")
    N, K = X.shape
    u, sv, vt = np.linalg.svd(X, full_matrices=True)
    t = np.zeros(K)
    t[: sv.size] = sv**2
    return SvdCache(singular_values=sv, right_basis=vt.T.copy(), left_basis=u, t=t)


def _denominators(cache: SvdCache, lambda1w: float, lambda1z: float) -> np.ndarray:
    den = lambda1w + lambda1z * cache.t
    if not np.all(den > 0):
        raise SingularMatrix("lambda1w + lambda1z * t must be positive for every t")
    return den


def scalar_projection(cache: SvdCache, lambda1w: float, lambda1z: float,
                      gamma1w: np.ndarray, gamma1z: np.ndarray, alpha: float | None = None,
                      X: np.ndarray | None = None):
    """Projection with scalar site precisions, evaluated in the SVD basis.

    Returns ``(mu, chi_w, chi_z)`` where ``chi_w = Tr Sigma`` and
    ``chi_z = Tr(X Sigma X^T)`` are normalised traces.  Passing ``X`` saves
    rebuilding it from the factors when forming ``X^T gamma1z``.
    """
    K, N = cache.K, cache.N
    den = _denominators(cache, lambda1w, lambda1z)
    chi_w = float(np.mean(1.0 / den))
    chi_z = float(np.sum(cache.t / den) / N)
    if alpha is not None and abs(alpha - N / K) > 1e-12:
        raise InvalidParameter("alpha does not match the cached dimensions")
    if X is None:
        r = cache.singular_values.size
        xt_g = cache.right_basis[:, :r] @ (cache.singular_values * (cache.left_basis[:, :r].T @ gamma1z))
    else:
        xt_g = X.T @ gamma1z
    V = cache.right_basis
    mu = V @ ((V.T @ (gamma1w + xt_g)) / den)
    return mu, chi_w, chi_z


def _damp(new, old, d):
    return d * new + (1.0 - d) * old


def ep_sweep_scalar(p: GlmProblem, s: EpState, cache: SvdCache, cfg: SolverConfig = SolverConfig(),
                    stats: dict | None = None) -> EpState:
    """Scalar-EP sweep: as the diagonal sweep, but precisions use averaged variances.

    A scalar precision update that would make a cavity precision
    nonpositive, or the projection improper, is skipped for this sweep.
    """
    if s.flavor != "scalar":
        raise InvalidParameter("ep_sweep_scalar needs a scalar-flavor state")
    X = p.X
    floor = cfg.min_variance
    d = cfg.damping
    skipped = 0
    out = s.copy()
    mu, chi_w, chi_z = scalar_projection(cache, s.lambda1w, s.lambda1z, s.gamma1w, s.gamma1z, X=X)
    chi_w, chi_z = max(chi_w, floor), max(chi_z, floor)
    zmean = X @ mu
    out.mu = mu
    out.sigma_diag = np.full(p.K, chi_w)

    l2w = 1.0 / chi_w - s.lambda1w
    l2z = 1.0 / chi_z - s.lambda1z
    if l2w > 0:
        out.lambda2w = _damp(l2w, s.lambda2w, d)
        out.gamma2w = _damp(mu / chi_w - s.gamma1w, s.gamma2w, d)
    else:
        skipped += 1
    if l2z > 0:
        out.lambda2z = _damp(l2z, s.lambda2z, d)
        out.gamma2z = _damp(zmean / chi_z - s.gamma1z, s.gamma2z, d)
    else:
        skipped += 1

    # scalar cavity variances broadcast against the per-coordinate means
    tw = prior_moments(p.prior_spec, out.gamma2w / out.lambda2w, 1.0 / out.lambda2w, checked=False)
    tz = likelihood_moments(p.likelihood_spec, p.y, out.gamma2z / out.lambda2z, 1.0 / out.lambda2z,
                            checked=False)
    out.eta_w, out.chi_w = np.asarray(tw.mean, float), np.maximum(np.broadcast_to(tw.var, (p.K,)), floor)
    out.eta_z, out.chi_z = np.asarray(tz.mean, float), np.maximum(np.broadcast_to(tz.var, (p.N,)), floor)
    avg_w, avg_z = float(np.mean(out.chi_w)), float(np.mean(out.chi_z))

    l1w = _damp(1.0 / avg_w - out.lambda2w, s.lambda1w, d)
    l1z = _damp(1.0 / avg_z - out.lambda2z, s.lambda1z, d)
    # keep the scalar projection proper: lambda1w + lambda1z * t > 0 for all t
    if l1z >= 0 and l1w + l1z * cache.t.min() > 0:
        out.lambda1w, out.lambda1z = l1w, l1z
        out.gamma1w = _damp(out.eta_w / avg_w - out.gamma2w, s.gamma1w, d)
        out.gamma1z = _damp(out.eta_z / avg_z - out.gamma2z, s.gamma1z, d)
    else:
        skipped += 1
    if stats is not None:
        stats["negative_variance"] = stats.get("negative_variance", 0) + skipped
    return out


def solve_scalar(p: GlmProblem, cfg: SolverConfig = SolverConfig(), init: InitConfig | None = None,
                 cache: SvdCache | None = None, state: EpState | None = None):
    """Scalar-EP outer loop; returns ``(summary, state, trace)``."""
    validate_problem(p)
    cache = cache or precompute_svd(p.X)
    s = state.copy() if state is not None else init_state(p, "scalar", init)
    trace: list[float] = []
    stats: dict = {}
    residual = float("inf")
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        new = ep_sweep_scalar(p, s, cache, cfg, stats)
        residual = moment_change(new, s)
        trace.append(residual)
        s = new
        if residual < cfg.tol:
            converged = True
            break
    if not converged and cfg.max_iter > 0:
        log.warning("scalar-EP did not converge in %d sweeps (residual %.3g)", cfg.max_iter, residual)
    return summarize(s, it, converged, residual), s, trace


def lambda2_from_spectrum(spectrum_t, lambda1w: float, lambda1z: float, alpha: float,
                          check_tol: float = 1e-10):
    """Scalar cavity precisions implied by the spectrum of ``X^T X`` alone.

    ``spectrum_t`` holds the K eigenvalues of ``X^T X``.  Also verifies the
    trace identity ``lambda2w chi_w = alpha (1 - lambda2z chi_z)``, which is
    exact algebra whenever both traces come from the same spectrum.
    """
    t = np.asarray(spectrum_t, dtype=float)
    K = t.size
    den = lambda1w + lambda1z * t
    if not np.all(den > 0):
        raise SingularMatrix("lambda1w + lambda1z * t must be positive for every t")
    N = alpha * K
    chi_w = float(np.mean(1.0 / den))
    chi_z = float(np.sum(t / den) / N)
    lambda2w = 1.0 / chi_w - lambda1w
    with np.errstate(divide="ignore"):
        lambda2z = 1.0 / chi_z - lambda1z if chi_z > 0 else float("inf")
    lhs = lambda2w * chi_w
    rhs = alpha * (1.0 - lambda2z * chi_z) if chi_z > 0 else alpha * lambda1z * chi_z
    if abs(lhs - rhs) > check_tol * max(1.0, abs(lhs)):
        raise ArithmeticError(f"trace consistency violated: {lhs!r} vs {rhs!r}")
    return lambda2w, lambda2z, chi_w, chi_z
