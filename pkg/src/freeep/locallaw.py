"""Finite-n verification harness for the resolvent local law and the scalar EP reduction.

The functions here build concrete matrices, compute the exact dense quantities
(resolvent diagonals, traces, implied site precisions) and compare them with
the scalar predictions obtained from free-probability transforms of the
relevant empirical spectra.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from . import freeprob as fp
from .errors import (DegenerateSpectrum, DimensionMismatch, InvalidParameter, NoBracket, NotConverged,
                     OutOfDomain, SingularMatrix, ZeroDiagonal)
from .randmat import Uniform, TwoPoint, diag_from_law, haar_orthogonal, haar_rotated, rng_for
from .solver_scalar import lambda2_from_spectrum

log = logging.getLogger(__name__)


def _as_vector(v, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise InvalidParameter(f"{name} must be finite")
    return v


def _inverse(m: np.ndarray) -> np.ndarray:
    try:
        lu = linalg.lu_factor(m, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularMatrix(str(exc)) from exc
    if np.any(np.abs(np.diag(lu[0])) <= 1e-14 * max(1.0, np.max(np.abs(np.diag(lu[0]))))):
        raise SingularMatrix("matrix is numerically singular")
    return linalg.lu_solve(lu, np.eye(m.shape[0]))


def _is_point_mass(spec: fp.EmpiricalSpectrum) -> bool:
    return spec.hi - spec.lo <= 1e-12 * max(1.0, abs(spec.hi), abs(spec.lo))


# ---------------------------------------------------------------------------
# Local law
# ---------------------------------------------------------------------------

def implied_lambda2_diagonal(Lambda1, J):
    """Diagonal site precisions that reproduce the resolvent diagonal of ``Lambda1 + J``.

    Returns
    -------
    lambda2_diag : ndarray
        ``1 / ((Lambda1 + J)^{-1})_ii - Lambda1_ii``.
    chi : float
        Normalised trace of ``(Lambda1 + J)^{-1}``.
    """
    lam = _as_vector(Lambda1, "Lambda1")
    J = np.asarray(J, dtype=float)
    if J.shape != (lam.size, lam.size):
        raise DimensionMismatch(f"J has shape {J.shape}, expected {(lam.size, lam.size)}")
    r = np.diag(_inverse(J + np.diag(lam))).copy()
    if np.any(r == 0):
        raise ZeroDiagonal("resolvent has a zero diagonal entry")
    return 1.0 / r - lam, float(np.mean(r))


@dataclass
class LocalLawReport:
    """One (size, seed) run of the local-law experiment.

    ``resolvent_norm`` is the spectral norm of ``(Lambda1 + lambda2 I)^{-1}``
    at this size; boundedness of that norm can only be recorded, not asserted,
    at finite n.
    """

    n: int
    lambda2_predicted: float
    lambda2_diagonal: np.ndarray
    l2_deviation: float
    chi: float
    seed: int
    resolvent_norm: float = float("nan")

    def recompute_deviation(self) -> float:
        return float(np.mean((np.asarray(self.lambda2_diagonal) - self.lambda2_predicted) ** 2))

    def to_dict(self, include_diagonal: bool = True) -> dict:
        d = asdict(self)
        d["lambda2_diagonal"] = np.asarray(self.lambda2_diagonal).tolist() if include_diagonal else None
        return d


# J ensembles take (lambda1, seed) and return (J, eigenvalues of J or None).
JEnsemble = Callable[[np.ndarray, int], tuple]


@dataclass(frozen=True)
class ShiftEnsemble:
    """``J = b I``; the local law then holds exactly."""

    b: float = 1.0

    def __call__(self, lambda1, seed):
        n = len(lambda1)
        return self.b * np.eye(n), np.full(n, float(self.b))


@dataclass(frozen=True)
class HaarRotatedEnsemble:
    """``J = U diag(d) U^T`` with ``d`` iid from ``law`` and ``U`` Haar, independent of ``Lambda1``."""

    law: Uniform | TwoPoint = Uniform(0.0, 1.0)

    def __call__(self, lambda1, seed):
        d = diag_from_law(len(lambda1), self.law, seed, stream="second_diag")
        return haar_rotated(d, seed, stream="second_orthogonal"), d


@dataclass(frozen=True)
class DependentNoiseEnsemble:
    """``J = Lambda1 + eps * H`` with ``H`` a Haar-rotated Uniform[-1, 1] matrix scaled to unit norm.

    ``J`` is almost a function of ``Lambda1``, so it is far from free of it.
    """

    noise_norm: float = 1e-3

    def __call__(self, lambda1, seed):
        d = diag_from_law(len(lambda1), Uniform(-1.0, 1.0), seed, stream="second_diag")
        h = haar_rotated(d / np.max(np.abs(d)), seed, stream="second_orthogonal")
        return np.diag(lambda1) + self.noise_norm * h, None


def _draw_lambda1(dist, n, seed):
    if callable(dist) and not isinstance(dist, (Uniform, TwoPoint)):
        return _as_vector(dist(n, seed), "Lambda1")
    return diag_from_law(n, dist, seed)


def local_law_run(Lambda1_dist, J_ensemble: JEnsemble, n: int, seed: int) -> LocalLawReport:
    """Single cell of :func:`local_law_experiment`."""
    lam = _draw_lambda1(Lambda1_dist, n, seed)
    J, j_eigs = J_ensemble(lam, seed)
    diag2, chi = implied_lambda2_diagonal(lam, J)
    spec = fp.EmpiricalSpectrum(j_eigs) if j_eigs is not None else fp.EmpiricalSpectrum.of_matrix(J)
    if _is_point_mass(spec):
        # R of a point mass is that point, for every argument
        lam2 = spec.mean
    else:
        lam2 = fp.r_transform(spec, -chi)
    with np.errstate(divide="ignore"):
        shifted = lam + lam2
        norm = float(np.max(1.0 / np.abs(shifted))) if np.all(shifted != 0) else float("inf")
    dev = float(np.mean((diag2 - lam2) ** 2))
    return LocalLawReport(n=n, lambda2_predicted=float(lam2), lambda2_diagonal=diag2, l2_deviation=dev,
                          chi=chi, seed=seed, resolvent_norm=norm)


def local_law_experiment(Lambda1_dist, J_ensemble: JEnsemble, sizes: Sequence[int], seeds: Sequence[int],
                         excluded: list | None = None) -> list[LocalLawReport]:
    """Run the local-law comparison over every (size, seed) pair.

    Parameters
    ----------
    Lambda1_dist
        A law from :mod:`freeep.randmat` (``Uniform``/``TwoPoint``) or a
        callable ``(n, seed) -> vector``.
    J_ensemble
        Callable ``(lambda1, seed) -> (J, eigenvalues or None)``.
    excluded
        If given, runs whose R-transform evaluation fails are appended here as
        ``(n, seed, message)`` instead of being silently dropped.
    """
    out = []
    for n in sizes:
        for seed in seeds:
            try:
                out.append(local_law_run(Lambda1_dist, J_ensemble, int(n), int(seed)))
            except (OutOfDomain, NoBracket) as exc:
                log.warning("local-law run n=%d seed=%d excluded: %s", n, seed, exc)
                if excluded is not None:
                    excluded.append((int(n), int(seed), str(exc)))
    return out


def median_deviation_by_size(reports: Sequence[LocalLawReport]) -> dict:
    by = {}
    for r in reports:
        by.setdefault(r.n, []).append(r.l2_deviation)
    return {n: float(np.median(v)) for n, v in sorted(by.items())}


# ---------------------------------------------------------------------------
# Neumann decomposition of the resolvent difference
# ---------------------------------------------------------------------------

def build_E(M, chi: float, spectrum=None) -> np.ndarray:
    """``E_M = I - (1/chi) (M - B_M(chi) I)^{-1}``, which has zero normalised trace.

    ``M`` may be a full symmetric matrix or a vector holding a diagonal.
    """
    M = np.asarray(M, dtype=float)
    diag = M.ndim == 1
    spec = fp.EmpiricalSpectrum(M if diag else (spectrum if spectrum is not None else np.linalg.eigvalsh(M)))
    if _is_point_mass(spec):
        raise DegenerateSpectrum("point-mass spectrum: G is not invertible over a branch")
    b = fp.stieltjes_inverse(spec, chi)
    if diag:
        return np.diag(1.0 - 1.0 / (chi * (M - b)))
    return np.eye(M.shape[0]) - _inverse(M - b * np.eye(M.shape[0])) / chi


@dataclass
class DecompositionReport:
    """Outcome of the truncated Neumann reconstruction.

    ``reconstruction_error`` is measured against ``(Lambda1 + J + delta I)^{-1} - Y^{-1}``,
    the matrix that the series represents exactly; ``delta`` is the finite-n
    gap between ``lambda2`` and ``R_J(-chi)``.  ``error_vs_resolvent`` uses the
    unshifted ``(Lambda1 + J)^{-1} - Y^{-1}`` and so also contains ``delta``.
    """

    n: int
    truncation_order: int
    spectral_radius_EJEY: float
    reconstruction_error: float
    chi: float = float("nan")
    lambda2: float = float("nan")
    delta: float = float("nan")
    error_vs_resolvent: float = float("nan")
    phi_EJ: float = float("nan")
    phi_EY: float = float("nan")
    errors_by_order: dict = field(default_factory=dict)
    diverges: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["errors_by_order"] = {str(k): v for k, v in self.errors_by_order.items()}
        return d


def lemma3_decomposition_check(Lambda1, J, truncation: int = 64,
                               record_orders: Sequence[int] = (8, 16, 32, 64)) -> DecompositionReport:
    """Compare ``chi (A + B - E_J)`` built from truncated Neumann sums with the dense difference.

    ``chi`` is the normalised trace of ``(Lambda1 + J)^{-1}``; ``lambda2`` is
    chosen so that ``Y = Lambda1 + lambda2 I`` has the same normalised trace of
    its inverse, which makes ``phi(E_Y) = 0`` exactly.
    """
    lam = _as_vector(Lambda1, "Lambda1")
    J = np.asarray(J, dtype=float)
    n = lam.size
    if J.shape != (n, n):
        raise DimensionMismatch(f"J has shape {J.shape}, expected {(n, n)}")
    if truncation < 1:
        raise InvalidParameter("truncation must be >= 1")
    R = _inverse(J + np.diag(lam))
    chi = float(np.trace(R) / n)
    spec_l = fp.EmpiricalSpectrum(lam)
    spec_j = fp.EmpiricalSpectrum.of_matrix(J)
    if _is_point_mass(spec_j) or _is_point_mass(spec_l):
        raise DegenerateSpectrum("J and Lambda1 + lambda2 I need non-degenerate spectra")
    lambda2 = -fp.stieltjes_inverse(spec_l, chi)
    y = lam + lambda2
    E_Y = np.diag(1.0 - 1.0 / (chi * y))
    E_J = build_E(J, chi, spectrum=spec_j.values)
    b_J = fp.stieltjes_inverse(spec_j, chi)
    delta = lambda2 - (b_J + 1.0 / chi)

    D_true = R - np.diag(1.0 / y)
    D_series_target = _inverse(J + np.diag(lam + delta)) - np.diag(1.0 / y)

    P = E_J @ E_Y
    Q = E_Y @ E_J
    radius = float(np.max(np.abs(np.linalg.eigvals(P))))
    report = DecompositionReport(n=n, truncation_order=truncation, spectral_radius_EJEY=radius,
                                 reconstruction_error=float("inf"), chi=chi, lambda2=float(lambda2),
                                 delta=float(delta), phi_EJ=float(np.trace(E_J) / n),
                                 phi_EY=float(np.trace(E_Y) / n))
    if radius >= 1.0:
        report.diverges = True
        report.error_vs_resolvent = float("inf")
        return report

    I = np.eye(n)
    Pk, Qk = I, I
    sumP = np.zeros((n, n))
    sumQ = np.zeros((n, n))
    wanted = {int(o) for o in record_orders if o <= truncation} | {truncation}
    D_T = None
    for k in range(1, truncation + 1):
        Pk = Pk @ P
        Qk = Qk @ Q
        sumP += Pk
        sumQ += Qk
        if k in wanted:
            A = (I - E_Y) @ sumP
            B = (I - E_J) @ sumQ
            D_T = chi * (A + B - E_J)
            report.errors_by_order[k] = float(np.max(np.abs(D_series_target - D_T)))
    report.reconstruction_error = report.errors_by_order[truncation]
    report.error_vs_resolvent = float(np.max(np.abs(D_true - D_T)))
    return report


def rademacher_trace_check(E_Y, seeds: Sequence[int]) -> tuple[float, float]:
    """Seed averages of ``|phi(E_Y Z)|`` and ``|phi(E_Y Z E_Y)|`` for Rademacher diagonal ``Z``."""
    E = np.asarray(E_Y, dtype=float)
    n = E.shape[0]
    d1 = np.diag(E)
    d2 = np.einsum("ij,ji->i", E, E)
    a, b = [], []
    for seed in seeds:
        z = rng_for(int(seed), "rademacher_diag").choice(np.array([-1.0, 1.0]), size=n)
        a.append(abs(float(d1 @ z) / n))
        b.append(abs(float(d2 @ z) / n))
    if not a:
        return 0.0, 0.0
    return float(np.mean(a)), float(np.mean(b))


# ---------------------------------------------------------------------------
# Scalar cavity precisions of the GLM
# ---------------------------------------------------------------------------

@dataclass
class Theorem1Report:
    lambda2w: float
    lambda2z: float
    residual_w: float
    residual_z: float
    conj_residual: float
    chi_w: float = float("nan")
    chi_z: float = float("nan")
    chi_tilde_z: float = float("nan")
    relzz_residual: float = float("nan")

    def as_tuple(self):
        return self.lambda2w, self.lambda2z, self.residual_w, self.residual_z, self.conj_residual

    def to_dict(self) -> dict:
        return asdict(self)


def _positive(v, name):
    v = _as_vector(v, name)
    if np.any(v <= 0):
        raise InvalidParameter(f"{name} must be strictly positive")
    return v


def _r_or_point(spec: fp.EmpiricalSpectrum, s: float) -> float:
    return spec.mean if _is_point_mass(spec) else fp.r_transform(spec, s)


def theorem1_lambda_check(Lambda1w, Lambda1z, X) -> Theorem1Report:
    """Dense check of the scalar cavity precisions predicted from R-transforms.

    ``chi_tilde_z`` is the normalised trace of
    ``(Lambda1z^{-1} + X Lambda1w^{-1} X^T)^{-1}`` (computed through Woodbury),
    and ``relzz_residual`` records how far it is from
    ``lambda2z (1 - lambda2z chi_z)`` at this size.
    """
    lw = _positive(Lambda1w, "Lambda1w")
    lz = _positive(Lambda1z, "Lambda1z")
    X = np.asarray(X, dtype=float)
    if X.shape != (lz.size, lw.size):
        raise DimensionMismatch(f"X has shape {X.shape}, expected {(lz.size, lw.size)}")
    N, K = X.shape
    alpha = N / K
    XtLX = X.T @ (lz[:, None] * X)
    XtLX = 0.5 * (XtLX + XtLX.T)
    Sigma = _inverse(XtLX + np.diag(lw))
    Sigma = 0.5 * (Sigma + Sigma.T)
    XS = X @ Sigma
    zvar = np.einsum("ij,ij->i", XS, X)
    chi_w = float(np.trace(Sigma) / K)
    chi_z = float(np.mean(zvar))
    chi_tilde_z = float(np.mean(lz - lz**2 * zvar))

    lambda2w = _r_or_point(fp.EmpiricalSpectrum(np.linalg.eigvalsh(XtLX)), -chi_w)
    XLXt = X @ (X.T / lw[:, None])
    r = _r_or_point(fp.EmpiricalSpectrum(np.linalg.eigvalsh(0.5 * (XLXt + XLXt.T))), -chi_tilde_z)
    if r == 0:
        raise OutOfDomain("R-transform vanished; lambda2z is undefined")
    lambda2z = 1.0 / r

    diag_w = 1.0 / np.diag(Sigma) - lw
    diag_z = 1.0 / zvar - lz
    return Theorem1Report(
        lambda2w=float(lambda2w), lambda2z=float(lambda2z),
        residual_w=float(np.mean((diag_w - lambda2w) ** 2)),
        residual_z=float(np.mean((diag_z - lambda2z) ** 2)),
        conj_residual=float(abs(lambda2w * chi_w - alpha * (1.0 - lambda2z * chi_z))),
        chi_w=chi_w, chi_z=chi_z, chi_tilde_z=chi_tilde_z,
        relzz_residual=float(abs(chi_tilde_z - lambda2z * (1.0 - lambda2z * chi_z))),
    )


@dataclass
class RemarkScalars:
    lambda1w_eff: float
    lambda1z_eff: float
    chi_w: float
    chi_z: float
    lambda2w: float
    lambda2z: float
    lambda1w_tilde: float = float("nan")
    lambda1z_tilde: float = float("nan")
    consistency_residual: float = float("nan")
    iterations: int = 0

    def as_tuple(self):
        return self.lambda1w_eff, self.lambda1z_eff, self.chi_w, self.chi_z, self.lambda2w, self.lambda2z

    def to_dict(self) -> dict:
        return asdict(self)


def _spectrum(v, name) -> fp.EmpiricalSpectrum:
    spec = v if isinstance(v, fp.EmpiricalSpectrum) else fp.EmpiricalSpectrum(_as_vector(v, name))
    if spec.lo <= 0:
        raise InvalidParameter(f"{name} must be strictly positive")
    return spec


def _s_or_point(spec: fp.EmpiricalSpectrum, omega: float) -> float:
    return 1.0 / spec.mean if _is_point_mass(spec) else fp.s_transform(spec, omega)


def remark_scalars(Lambda1w_spec, Lambda1z_spec, t, alpha: float, tol: float = 1e-12,
                   damping: float = 0.5, max_iter: int = 10_000) -> RemarkScalars:
    """Solve the coupled scalar system that needs only spectra.

    Parameters
    ----------
    Lambda1w_spec, Lambda1z_spec
        Spectra (or diagonals) of the site-1 precisions.
    t
        The K eigenvalues of ``X^T X``.
    alpha
        Aspect ratio ``N / K``.
    tol
        Stopping threshold on the largest change of the effective precisions.

    Raises
    ------
    NotConverged
        If ``max_iter`` damped iterations do not reach ``tol``.
    """
    if tol <= 0:
        raise InvalidParameter("tol must be positive")
    sw = _spectrum(Lambda1w_spec, "Lambda1w_spec")
    sz = _spectrum(Lambda1z_spec, "Lambda1z_spec")
    t = _as_vector(t, "t")
    lw, lz = sw.mean, 1.0 / _s_or_point(sz, 0.0)
    for it in range(1, max_iter + 1):
        l2w, l2z, cw, cz = lambda2_from_spectrum(t, lw, lz, alpha)
        new_lw = _r_or_point(sw, -cw)
        new_lz = 1.0 / _s_or_point(sz, -l2w * cw / alpha)
        step = max(abs(new_lw - lw), abs(new_lz - lz))
        lw = damping * new_lw + (1.0 - damping) * lw
        lz = damping * new_lz + (1.0 - damping) * lz
        if step < tol:
            break
    else:
        raise NotConverged(f"scalar system did not converge in {max_iter} iterations (last step {step:.3g})")
    l2w, l2z, cw, cz = lambda2_from_spectrum(t, lw, lz, alpha)
    chi_tilde_z = l2z * (1.0 - l2z * cz)
    tilde_lz = _r_or_point(sz, -cz)
    tilde_lw = _s_or_point(sw.inverse(), -alpha * chi_tilde_z / l2z)
    return RemarkScalars(lambda1w_eff=float(lw), lambda1z_eff=float(lz), chi_w=cw, chi_z=cz,
                         lambda2w=float(l2w), lambda2z=float(l2z), lambda1w_tilde=float(tilde_lw),
                         lambda1z_tilde=float(tilde_lz),
                         consistency_residual=float(max(abs(tilde_lw - lw), abs(tilde_lz - lz))),
                         iterations=it)


def woodbury_identity_check(Lambda1w, Lambda1z, X) -> float:
    """Largest entrywise residual of the two Woodbury forms linking the z-side sites.

    Checks ``diag((Lambda1z^{-1} + X Lambda1w^{-1} X^T)^{-1}) = 1/(1/Lambda1z + 1/Lambda2z)``
    with ``Lambda2z`` the implied diagonal, and
    ``(Lambda1z^{-1} + 1/lambda2z)^{-1} = lambda2z - lambda2z^2 (Lambda1z + lambda2z)^{-1}``
    with ``lambda2z`` the mean of the implied diagonal.
    """
    lw = _positive(Lambda1w, "Lambda1w")
    lz = _positive(Lambda1z, "Lambda1z")
    X = np.asarray(X, dtype=float)
    if X.shape != (lz.size, lw.size):
        raise DimensionMismatch(f"X has shape {X.shape}, expected {(lz.size, lw.size)}")
    if not np.any(X):
        raise DegenerateSpectrum("X = 0 makes the implied z-side precision infinite")
    Sigma = _inverse(X.T @ (lz[:, None] * X) + np.diag(lw))
    zvar = np.einsum("ij,jk,ik->i", X, Sigma, X)
    if np.any(zvar <= 0):
        raise DegenerateSpectrum("a row of X is zero; its implied precision is infinite")
    lam2 = 1.0 / zvar - lz
    St = _inverse(np.diag(1.0 / lz) + X @ (X.T / lw[:, None]))
    res1 = np.max(np.abs(np.diag(St) - 1.0 / (1.0 / lz + 1.0 / lam2)))
    l2 = float(np.mean(lam2))
    res2 = np.max(np.abs(1.0 / (1.0 / lz + 1.0 / l2) - (l2 - l2**2 / (lz + l2))))
    return float(max(res1, res2))
