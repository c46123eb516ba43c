"""Diagonal-EP: full Gaussian projection with per-coordinate site precisions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .errors import InvalidParameter, SingularMatrix
from .model import EpState, GlmProblem, InitConfig, PosteriorSummary, init_state, validate_problem
from .sites import likelihood_moments, prior_moments

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 200
    tol: float = 1e-8
    damping: float = 0.5
    min_variance: float = 1e-12
    # site-1 precisions may go negative for non-log-concave priors; the
    # cavity (site 2) precision never may
    allow_negative_site1: bool = True

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise InvalidParameter(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise InvalidParameter("tol must be > 0")
        if self.max_iter < 0:
            raise InvalidParameter("max_iter must be >= 0")


def gaussian_projection(p: GlmProblem, s: EpState):
    """Moments of ``f1(theta) * delta(z - X w)``.

    Returns ``(mu, diag Sigma, X mu, diag(X Sigma X^T))`` with
    ``Sigma = (L1w + X^T L1z X)^-1``.  One Cholesky factorisation plus two
    triangular solves: O(K^3 + N K^2).
    """
    X = p.X
    N, K = X.shape
    l1w = np.broadcast_to(np.asarray(s.lambda1w, dtype=float), (K,))
    l1z = np.broadcast_to(np.asarray(s.lambda1z, dtype=float), (N,))
    prec = (X.T * l1z) @ X
    prec[np.diag_indices(K)] += l1w
    try:
        c, lower = linalg.cho_factor(prec, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularMatrix("L1w + X^T L1z X is not positive definite") from exc
    L = np.tril(c)
    if np.min(np.abs(np.diag(L))) <= 1e-150:
        raise SingularMatrix("L1w + X^T L1z X is numerically singular")
    mu = linalg.cho_solve((c, lower), s.gamma1w + X.T @ s.gamma1z)
    Linv = linalg.solve_triangular(L, np.eye(K), lower=True)
    sigma_diag = np.einsum("ij,ij->j", Linv, Linv)
    B = Linv @ X.T
    z_var = np.einsum("ij,ij->j", B, B)
    return mu, sigma_diag, X @ mu, z_var


def _damped_site(new_lam, new_gam, old_lam, old_gam, damping, positive=True):
    """Damped update; with ``positive`` set, coordinates whose undamped
    precision is nonpositive keep their old values."""
    ok = new_lam > 0 if positive else np.isfinite(new_lam)
    lam = np.where(ok, damping * new_lam + (1.0 - damping) * old_lam, old_lam)
    gam = np.where(ok, damping * new_gam + (1.0 - damping) * old_gam, old_gam)
    return lam, gam, int(np.size(ok) - np.count_nonzero(ok))


def ep_sweep_diagonal(p: GlmProblem, s: EpState, cfg: SolverConfig = SolverConfig(),
                      stats: dict | None = None) -> EpState:
    """One bulk-synchronous expectation-consistency sweep.

    Site 2 is matched to the Gaussian projection, then site 1 is matched to
    the tilted moments of the exact factors under the new site-2 cavity.
    Site-2 coordinates whose undamped update would give a nonpositive
    cavity precision are skipped for this sweep and counted in
    ``stats["negative_variance"]``.  Site-1 precisions are only held
    positive when ``cfg.allow_negative_site1`` is off.
    """
    if s.flavor != "diagonal":
        raise InvalidParameter("ep_sweep_diagonal needs a diagonal-flavor state")
    floor = cfg.min_variance
    d = cfg.damping
    out = s.copy()
    mu, sdiag, zmean, zvar = gaussian_projection(p, s)
    sdiag = np.maximum(sdiag, floor)
    zvar = np.maximum(zvar, floor)
    out.mu, out.sigma_diag = mu, sdiag

    out.lambda2w, out.gamma2w, bad_w2 = _damped_site(
        1.0 / sdiag - s.lambda1w, mu / sdiag - s.gamma1w, s.lambda2w, s.gamma2w, d)
    out.lambda2z, out.gamma2z, bad_z2 = _damped_site(
        1.0 / zvar - s.lambda1z, zmean / zvar - s.gamma1z, s.lambda2z, s.gamma2z, d)

    tw = prior_moments(p.prior_spec, out.gamma2w / out.lambda2w, 1.0 / out.lambda2w, checked=False)
    tz = likelihood_moments(p.likelihood_spec, p.y, out.gamma2z / out.lambda2z, 1.0 / out.lambda2z,
                            checked=False)
    out.eta_w, out.chi_w = np.asarray(tw.mean, float), np.maximum(tw.var, floor)
    out.eta_z, out.chi_z = np.asarray(tz.mean, float), np.maximum(tz.var, floor)

    out.lambda1w, out.gamma1w, bad_w1 = _damped_site(
        1.0 / out.chi_w - out.lambda2w, out.eta_w / out.chi_w - out.gamma2w,
        s.lambda1w, s.gamma1w, d, not cfg.allow_negative_site1)
    out.lambda1z, out.gamma1z, bad_z1 = _damped_site(
        1.0 / out.chi_z - out.lambda2z, out.eta_z / out.chi_z - out.gamma2z,
        s.lambda1z, s.gamma1z, d, not cfg.allow_negative_site1)

    skipped = bad_w2 + bad_z2 + bad_w1 + bad_z1
    if skipped:
        log.debug("skipped %d site updates with negative variance", skipped)
    if stats is not None:
        stats["negative_variance"] = stats.get("negative_variance", 0) + skipped
    return out


def _projection_ok(p: GlmProblem, s: EpState) -> bool:
    if np.all(s.lambda1w > 0) and np.all(s.lambda1z >= 0):
        return True
    prec = (p.X.T * s.lambda1z) @ p.X
    prec[np.diag_indices(p.K)] += s.lambda1w
    try:
        linalg.cholesky(prec, lower=True)
    except linalg.LinAlgError:
        return False
    return True


def moment_change(a: EpState, b: EpState) -> float:
    return float(max(np.max(np.abs(a.eta_w - b.eta_w)), np.max(np.abs(a.chi_w - b.chi_w)),
                     np.max(np.abs(a.eta_z - b.eta_z), initial=0.0),
                     np.max(np.abs(a.chi_z - b.chi_z), initial=0.0)))


def summarize(s: EpState, iterations: int, converged: bool, residual: float) -> PosteriorSummary:
    return PosteriorSummary(
        mean_w=s.eta_w.copy(), var_w=s.chi_w.copy(),
        mean_z=s.eta_z.copy(), var_z=s.chi_z.copy(),
        iterations=iterations, converged=converged, residual=residual,
    )


def solve_diagonal(p: GlmProblem, cfg: SolverConfig = SolverConfig(),
                   init: InitConfig | None = None, state: EpState | None = None):
    """Iterate diagonal-EP sweeps until the tilted moments stop moving.

    Returns ``(summary, state, trace)``.  Non-convergence is reported through
    ``summary.converged`` rather than raised, so the last state survives.
    """
    validate_problem(p)
    s = state.copy() if state is not None else init_state(p, "diagonal", init)
    trace: list[float] = []
    stats: dict = {}
    residual = float("inf")
    converged = False
    it = 0
    strict = replace(cfg, allow_negative_site1=False)
    for it in range(1, cfg.max_iter + 1):
        new = ep_sweep_diagonal(p, s, cfg, stats)
        if cfg.allow_negative_site1 and not _projection_ok(p, new):
            new = ep_sweep_diagonal(p, s, strict, stats)
        residual = moment_change(new, s)
        trace.append(residual)
        s = new
        if residual < cfg.tol:
            converged = True
            break
    if not converged and cfg.max_iter > 0:
        log.warning("diagonal-EP did not converge in %d sweeps (residual %.3g)", cfg.max_iter, residual)
    return summarize(s, it, converged, residual), s, trace


def fixed_point_residuals(p: GlmProblem, s: EpState) -> dict:
    """Residuals of the fixed-point system and its cavity reformulation.

    ``mean``/``var`` check that the combined sites reproduce the tilted
    moments and the projection (the diagonal-EP fixed point); ``gamma2w``
    and ``eta_z`` are the two equations of the reformulation that avoids
    the matrix inverse.  The latter two are algebraically implied by the
    former, so they cross-check each other.
    """
    X = p.X
    N, K = X.shape
    l1w = np.broadcast_to(s.lambda1w, (K,))
    l2w = np.broadcast_to(s.lambda2w, (K,))
    l1z = np.broadcast_to(s.lambda1z, (N,))
    l2z = np.broadcast_to(s.lambda2z, (N,))
    mu, sdiag, zmean, zvar = gaussian_projection(p, s)
    site_eta_w = (s.gamma1w + s.gamma2w) / (l1w + l2w)
    site_eta_z = (s.gamma1z + s.gamma2z) / (l1z + l2z)
    mean_res = max(np.max(np.abs(site_eta_w - mu)), np.max(np.abs(site_eta_z - zmean)),
                   np.max(np.abs(s.eta_w - mu)), np.max(np.abs(s.eta_z - zmean)))
    var_res = max(np.max(np.abs(1.0 / (l1w + l2w) - sdiag)), np.max(np.abs(1.0 / (l1z + l2z) - zvar)),
                  np.max(np.abs(s.chi_w - sdiag)), np.max(np.abs(s.chi_z - zvar)))
    lhs = l2w * s.eta_w + X.T @ (l2z * (X @ s.eta_w)) - X.T @ s.gamma2z
    return {
        "mean": float(mean_res),
        "var": float(var_res),
        "gamma2w": float(np.max(np.abs(lhs - s.gamma2w))),
        "eta_z": float(np.max(np.abs(s.eta_z - X @ s.eta_w))),
    }
