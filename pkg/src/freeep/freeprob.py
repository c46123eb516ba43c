"""Free-probability transforms of empirical spectra.

Conventions
-----------
``G(z) = (1/n) sum 1/(x_i - z)`` (so ``G > 0`` below the spectrum),
``R(s) = B(-s) - 1/s`` with ``B`` the functional inverse of ``G``, and
``S(w) = Rt^{-1}(w) / w`` with ``Rt(s) = s R(s)``.  With these signs ``R``
coincides with the usual free-cumulant series ``sum_j k_{j+1} s^j``.

Every real-argument transform is evaluated on the branch of the real axis
outside the convex hull of the spectrum, where ``G`` is monotone: positive
targets of ``G`` live below the minimum, negative ones above the maximum.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import DimensionMismatch, InvalidParameter, NoBracket, NonFinite, OutOfDomain, PoleHit, ZeroMean

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class EmpiricalSpectrum:
    """Uniformly weighted point spectrum, stored sorted ascending."""

    values: np.ndarray

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=float).reshape(-1))
        if v.size < 1:
            raise InvalidParameter("spectrum needs at least one value")
        if not np.all(np.isfinite(v)):
            raise NonFinite("spectrum values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def of_matrix(cls, m) -> "EmpiricalSpectrum":
        return cls(np.linalg.eigvalsh(np.asarray(m, dtype=float)))

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def lo(self) -> float:
        return float(self.values[0])

    @property
    def hi(self) -> float:
        return float(self.values[-1])

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def moments(self, p: int) -> np.ndarray:
        """Normalised traces ``m_1 .. m_p``."""
        return np.array([np.mean(self.values**k) for k in range(1, p + 1)])

    def inverse(self) -> "EmpiricalSpectrum":
        if np.any(self.values == 0):
            raise OutOfDomain("spectrum contains 0; the inverse is undefined")
        return EmpiricalSpectrum(1.0 / self.values)

    def scaled(self, c: float) -> "EmpiricalSpectrum":
        return EmpiricalSpectrum(c * self.values)


@dataclass
class TransformGrid:
    s_values: np.ndarray
    outputs: np.ndarray
    converged_flags: np.ndarray

    def to_dict(self) -> dict:
        return {
            "s_values": np.asarray(self.s_values).tolist(),
            "outputs": [float(o) if f else None for o, f in zip(self.outputs, self.converged_flags)],
            "converged_flags": np.asarray(self.converged_flags, dtype=bool).tolist(),
        }


@dataclass
class FreenessReport:
    max_word_trace: float
    per_word: list = field(default_factory=list)
    degree_bound: int = 1
    length_bound: int = 2

    def to_dict(self) -> dict:
        return {
            "max_word_trace": self.max_word_trace,
            "per_word": [[w, v] for w, v in self.per_word],
            "degree_bound": self.degree_bound,
            "length_bound": self.length_bound,
        }


# ---------------------------------------------------------------------------
# Stieltjes transform and its inverse
# ---------------------------------------------------------------------------

def stieltjes(spec: EmpiricalSpectrum, z) -> complex | float:
    z = complex(z)
    if z.imag == 0.0:
        diff = spec.values - z.real
        if np.min(np.abs(diff)) < 1e-14:
            raise PoleHit(f"z = {z.real!r} sits on a spectral point")
        return float(np.mean(1.0 / diff))
    diff = spec.values - z
    if np.min(np.abs(diff)) < 1e-14:
        raise PoleHit(f"z = {z!r} sits on a spectral point")
    return complex(np.mean(1.0 / diff))


def _g_and_dg(x, z):
    inv = 1.0 / (x - z)
    return float(np.mean(inv)), float(np.mean(inv * inv))


def _polish(fun_and_grad, z, target, lo, hi, steps=3):
    """Newton polish constrained to the open interval (lo, hi)."""
    for _ in range(steps):
        f, df = fun_and_grad(z)
        if df == 0 or not math.isfinite(df):
            break
        nz = z - (f - target) / df
        if not lo < nz < hi or nz == z:
            break
        z = nz
    return z


def stieltjes_inverse(spec: EmpiricalSpectrum, g: float) -> float:
    """Real ``z`` outside the spectrum hull with ``G(z) = g``.

    ``g > 0`` resolves below the minimum, ``g < 0`` above the maximum;
    on each branch ``G`` is strictly monotone so the answer is unique.
    The bracket in the distance ``d`` to the hull edge is explicit:
    ``1/|g| - range <= d <= 1/|g|``.
    """
    g = float(g)
    if g == 0.0 or not math.isfinite(g):
        raise OutOfDomain("G never attains 0 or a non-finite value")
    x = spec.values
    span = spec.hi - spec.lo
    if g > 0:
        edge, sign = spec.lo, -1.0
    else:
        edge, sign = spec.hi, 1.0
    a = abs(g)
    if span == 0.0:
        # point mass: G(z) = 1/(c - z) inverts in closed form
        return spec.lo - 1.0 / g
    dist = lambda d: edge + sign * d
    f = lambda d: abs(float(np.mean(1.0 / (x - dist(d))))) - a  # decreasing in d
    d_hi = 1.0 / a
    # below this distance z is indistinguishable from the edge in floating point
    d_min = 4 * _EPS * max(abs(edge), 1e-300)
    d_lo = max(d_hi - span, d_hi * 1e-3, d_min)
    while f(d_lo) < 0:
        if d_lo <= d_min:
            raise NoBracket(f"could not bracket G(z) = {g!r}")
        d_lo = max(0.5 * d_lo, d_min)
    f_hi = f(d_hi)
    if f_hi > 8 * _EPS * a:
        raise NoBracket(f"could not bracket G(z) = {g!r}")
    if f_hi > 0:
        # positive only through rounding: the root sits at the far end
        d = d_hi
    elif f(d_lo) == 0:
        d = d_lo
    elif f(d_hi) == 0:
        d = d_hi
    else:
        d = optimize.brentq(f, d_lo, d_hi, xtol=1e-300, rtol=4 * _EPS, maxiter=500)
    z = dist(d)
    lo, hi = (-math.inf, edge) if g > 0 else (edge, math.inf)
    return _polish(lambda zz: _g_and_dg(x, zz), z, g, lo, hi)


def _check(res, target, what, tol=1e-10):
    if not abs(res - target) <= tol * max(1.0, abs(target)):
        raise ArithmeticError(f"{what} inversion residual {abs(res - target):.3g} too large")


def r_transform(spec: EmpiricalSpectrum, s: float) -> float:
    """``R(s) = B(-s) - 1/s`` for real nonzero ``s``."""
    s = float(s)
    if s == 0.0 or spec.lo == spec.hi:
        # s = 0 is the analytic limit (first free cumulant); a point mass has constant R
        return spec.mean
    z = stieltjes_inverse(spec, -s)
    _check(_g_and_dg(spec.values, z)[0], -s, "Stieltjes")
    return z - 1.0 / s


def r_transform_grid(spec: EmpiricalSpectrum, s_values) -> TransformGrid:
    s_values = np.asarray(s_values, dtype=float)
    out = np.full(s_values.shape, np.nan)
    ok = np.zeros(s_values.shape, dtype=bool)
    for i, s in enumerate(s_values):
        try:
            out[i] = r_transform(spec, s)
            ok[i] = True
        except (OutOfDomain, NoBracket, ArithmeticError):
            pass
    return TransformGrid(s_values, out, ok)


# ---------------------------------------------------------------------------
# S-transform
# ---------------------------------------------------------------------------

def _psi(x, z):
    """``psi(z) = (1/n) sum x/(x - z) = 1 + z G(z)``; note ``Rt(-G(z)) = -psi(z)``."""
    inv = 1.0 / (x - z)
    return float(np.mean(x * inv)), float(np.mean(x * inv * inv))


def r_tilde_inverse(spec: EmpiricalSpectrum, omega: float) -> float:
    """Real ``s`` with ``s R(s) = omega``, searched on both real branches."""
    omega = float(omega)
    x = spec.values
    scale = max(abs(spec.lo), abs(spec.hi), 1e-300)
    ds = scale * np.logspace(-14, 14, 561)
    candidates = []
    for edge, sign in ((spec.lo, -1.0), (spec.hi, 1.0)):
        f = lambda d: _psi(x, edge + sign * d)[0] + omega
        vals = np.array([f(d) for d in ds])
        # scan from far away (the branch that contains s = 0) inwards
        for i in range(len(ds) - 1, 0, -1):
            a, b = vals[i - 1], vals[i]
            if a == 0.0:
                candidates.append(edge + sign * ds[i - 1])
                break
            if np.sign(a) != np.sign(b):
                d = optimize.brentq(f, ds[i - 1], ds[i], xtol=1e-300, rtol=4 * _EPS, maxiter=500)
                z = edge + sign * d
                lo, hi = (-math.inf, edge) if sign < 0 else (edge, math.inf)
                z = _polish(lambda zz: tuple(-v for v in _psi(x, zz)), z, omega, lo, hi)
                candidates.append(z)
                break
        if candidates:
            break
    if not candidates:
        raise OutOfDomain(f"omega = {omega!r} is not attained by s R(s) on the real branches")
    z = candidates[0]
    return -_g_and_dg(x, z)[0]


def s_transform(spec: EmpiricalSpectrum, omega: float) -> float:
    """``S(omega) = Rt^{-1}(omega) / omega`` with ``Rt(s) = s R(s)``."""
    m1 = spec.mean
    if abs(m1) <= 1e-14 * max(abs(spec.lo), abs(spec.hi), 1e-300):
        raise ZeroMean("S-transform needs a nonzero mean")
    omega = float(omega)
    if omega == 0.0 or spec.lo == spec.hi:
        return 1.0 / m1
    s = r_tilde_inverse(spec, omega)
    _check(s * r_transform(spec, s), omega, "S-transform")
    return s / omega


def s_transform_grid(spec: EmpiricalSpectrum, omegas) -> TransformGrid:
    omegas = np.asarray(omegas, dtype=float)
    out = np.full(omegas.shape, np.nan)
    ok = np.zeros(omegas.shape, dtype=bool)
    for i, w in enumerate(omegas):
        try:
            out[i] = s_transform(spec, w)
            ok[i] = True
        except (OutOfDomain, NoBracket, ArithmeticError):
            pass
    return TransformGrid(omegas, out, ok)


def r_inverse_relation_check(spec: EmpiricalSpectrum, s: float) -> float:
    """``|1/R_A(s) - R_{A^-1}(-R_A(s) (1 + s R_A(s)))|`` for a positive spectrum."""
    if spec.lo <= 0:
        raise OutOfDomain("the inverse-spectrum relation needs a strictly positive spectrum")
    r = r_transform(spec, s)
    rhs = r_transform(spec.inverse(), -r * (1.0 + s * r))
    return abs(1.0 / r - rhs)


# ---------------------------------------------------------------------------
# Free cumulants
# ---------------------------------------------------------------------------

MAX_CUMULANT_ORDER = 12


def _series_power_coeffs(m_full, p):
    """Rows ``k = 0..p`` of the coefficients of ``M(x)^k`` truncated at degree p."""
    powers = np.zeros((p + 1, p + 1))
    powers[0, 0] = 1.0
    for k in range(1, p + 1):
        powers[k] = np.convolve(powers[k - 1], m_full)[: p + 1]
    return powers


def free_cumulants_from_moments(moments) -> np.ndarray:
    """Free cumulants from moments via the non-crossing recursion.

    ``m_p = sum_k k_k [x^{p-k}] M(x)^k`` with ``M(x) = 1 + m_1 x + ...``.
    """
    m = np.asarray(moments, dtype=float).reshape(-1)
    p = m.size
    if p > MAX_CUMULANT_ORDER:
        raise InvalidParameter(f"at most {MAX_CUMULANT_ORDER} moments are supported")
    if not np.all(np.isfinite(m)):
        raise NonFinite("moments must be finite")
    powers = _series_power_coeffs(np.concatenate([[1.0], m]), p)
    kappa = np.zeros(p)
    for q in range(1, p + 1):
        acc = sum(kappa[k - 1] * powers[k, q - k] for k in range(1, q))
        kappa[q - 1] = m[q - 1] - acc
    if not np.all(np.isfinite(kappa)):
        raise NonFinite("cumulant recursion overflowed")
    return kappa


def moments_from_free_cumulants(cumulants) -> np.ndarray:
    kappa = np.asarray(cumulants, dtype=float).reshape(-1)
    p = kappa.size
    m_full = np.zeros(p + 1)
    m_full[0] = 1.0
    for q in range(1, p + 1):
        # [x^{q-k}] M^k only involves m_0 .. m_{q-1}
        powers = _series_power_coeffs(m_full, q)
        m_full[q] = sum(kappa[k - 1] * powers[k, q - k] for k in range(1, q + 1))
    return m_full[1:]


def r_series(cumulants, s):
    """Truncated ``R(s) = sum_j k_{j+1} s^j``."""
    kappa = np.asarray(cumulants, dtype=float)
    return np.polynomial.polynomial.polyval(s, kappa)


# ---------------------------------------------------------------------------
# Free convolution checks
# ---------------------------------------------------------------------------

@dataclass
class ConvolutionCheck:
    max_residual: float
    grid: TransformGrid
    excluded: list

    def to_dict(self) -> dict:
        return {"max_residual": self.max_residual, "grid": self.grid.to_dict(), "excluded": self.excluded}


def _same_n(*specs):
    if len({sp.n for sp in specs}) != 1:
        raise DimensionMismatch("all spectra must come from the same dimension")


def additive_convolution_check(spec_a, spec_b, spec_sum, s_grid) -> ConvolutionCheck:
    """Max over ``s_grid`` of ``|R_{A+B}(s) - R_A(s) - R_B(s)|``."""
    _same_n(spec_a, spec_b, spec_sum)
    s_grid = np.asarray(s_grid, dtype=float)
    res = np.full(s_grid.shape, np.nan)
    ok = np.zeros(s_grid.shape, dtype=bool)
    for i, s in enumerate(s_grid):
        try:
            res[i] = abs(r_transform(spec_sum, s) - r_transform(spec_a, s) - r_transform(spec_b, s))
            ok[i] = True
        except (OutOfDomain, NoBracket, ArithmeticError):
            pass
    excluded = s_grid[~ok].tolist()
    mx = float(np.max(res[ok])) if ok.any() else float("nan")
    return ConvolutionCheck(mx, TransformGrid(s_grid, res, ok), excluded)


def multiplicative_convolution_check(spec_a, spec_b, spec_prod, omega_grid) -> ConvolutionCheck:
    """Max over ``omega_grid`` of ``|S_{AB}(w) - S_A(w) S_B(w)|``.

    ``spec_prod`` should be the spectrum of ``A^{1/2} B A^{1/2}``.
    """
    _same_n(spec_a, spec_b, spec_prod)
    for sp in (spec_a, spec_b):
        if abs(sp.mean) <= 1e-14 * max(abs(sp.lo), abs(sp.hi), 1e-300):
            raise ZeroMean("multiplicative convolution needs nonzero means")
    omega_grid = np.asarray(omega_grid, dtype=float)
    res = np.full(omega_grid.shape, np.nan)
    ok = np.zeros(omega_grid.shape, dtype=bool)
    for i, w in enumerate(omega_grid):
        try:
            res[i] = abs(s_transform(spec_prod, w) - s_transform(spec_a, w) * s_transform(spec_b, w))
            ok[i] = True
        except (OutOfDomain, NoBracket, ArithmeticError):
            pass
    excluded = omega_grid[~ok].tolist()
    mx = float(np.max(res[ok])) if ok.any() else float("nan")
    return ConvolutionCheck(mx, TransformGrid(omega_grid, res, ok), excluded)


# ---------------------------------------------------------------------------
# Freeness tester
# ---------------------------------------------------------------------------

MAX_DEGREE = 3
MAX_WORD_LENGTH = 4


def _is_diagonal(m):
    return np.count_nonzero(m - np.diag(np.diag(m))) == 0


def _centered_power(m, p):
    """``M^p - phi(M^p) I`` stored as a vector when M is diagonal."""
    if _is_diagonal(m):
        d = np.diag(m) ** p
        return ("diag", d - d.mean())
    mp = np.linalg.matrix_power(m, p)
    mp = mp - (np.trace(mp) / mp.shape[0]) * np.eye(mp.shape[0])
    return ("dense", mp)


def _times(prefix, factor):
    kind, f = factor
    if prefix is None:
        return np.diag(f) if kind == "diag" else f
    return prefix * f if kind == "diag" else prefix @ f


def _trace_with(prefix, factor):
    kind, f = factor
    n = prefix.shape[0]
    if kind == "diag":
        return float(np.dot(np.diag(prefix), f) / n)
    return float(np.sum(prefix * f.T) / n)


def freeness_score(family, degree_bound: int = 2, length_bound: int = 4) -> FreenessReport:
    """Normalised traces of alternating words of centred monomials.

    ``family`` is a list of sets (lists) of square matrices.  A word is a
    product ``Q_1 ... Q_k`` with ``2 <= k <= length_bound`` where each
    ``Q_i = M^p - phi(M^p) I`` for some matrix ``M`` of one set and
    ``1 <= p <= degree_bound``, and neighbouring factors come from different
    sets.  For a free family every such trace vanishes asymptotically.
    """
    if not 1 <= degree_bound <= MAX_DEGREE:
        raise InvalidParameter(f"degree_bound must lie in [1, {MAX_DEGREE}]")
    if not 2 <= length_bound <= MAX_WORD_LENGTH:
        raise InvalidParameter(f"length_bound must lie in [2, {MAX_WORD_LENGTH}]")
    mats = [[np.asarray(m, dtype=float) for m in group] for group in family]
    shapes = {m.shape for group in mats for m in group}
    if len(shapes) > 1 or any(len(sh) != 2 or sh[0] != sh[1] for sh in shapes):
        raise DimensionMismatch("all matrices must be square with the same size")
    if len(mats) < 2:
        return FreenessReport(0.0, [], degree_bound, length_bound)

    letters = []  # (set index, label, factor)
    for si, group in enumerate(mats):
        for mi, m in enumerate(group):
            for p in range(1, degree_bound + 1):
                letters.append((si, f"Q{si}[{mi}]^{p}", _centered_power(m, p)))

    per_word = []

    def walk(prefix, last_set, labels):
        for si, label, factor in letters:
            if si == last_set:
                continue
            if len(labels) >= 1:
                per_word.append((" ".join(labels + [label]), _trace_with(prefix, factor)))
            if len(labels) + 1 < length_bound:
                walk(_times(prefix, factor), si, labels + [label])

    walk(None, None, [])
    mx = max((abs(v) for _, v in per_word), default=0.0)
    return FreenessReport(float(mx), per_word, degree_bound, length_bound)
