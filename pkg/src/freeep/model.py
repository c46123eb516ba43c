"""Problem definition, EP site state and posterior summaries."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Union

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, NonFinite


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.0
    var: float = 1.0


@dataclass(frozen=True)
class SpikeSlabPrior:
    rho: float
    slab_var: float = 1.0


@dataclass(frozen=True)
class GaussianLikelihood:
    noise_var: float = 1.0


@dataclass(frozen=True)
class ProbitLikelihood:
    # the probit noise level is not pinned down by the application; 1.0 is a default, not a fit
    noise_var: float = 1.0


PriorSpec = Union[GaussianPrior, SpikeSlabPrior]
LikelihoodSpec = Union[GaussianLikelihood, ProbitLikelihood]


@dataclass
class GlmProblem:
    """``p(w | y, X) ~ p(w) p(y | z)`` with ``z = X w``; ``X`` is N x K."""

    X: np.ndarray
    y: np.ndarray
    prior_spec: PriorSpec = field(default_factory=GaussianPrior)
    likelihood_spec: LikelihoodSpec = field(default_factory=GaussianLikelihood)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def alpha(self) -> float:
        return self.N / self.K


def validate_problem(p: GlmProblem) -> GlmProblem:
    if p.X.ndim != 2 or p.N < 1 or p.K < 1:
        raise DimensionMismatch(f"X must be a non-empty matrix, got shape {p.X.shape}")
    if p.y.shape[0] != p.N:
        raise DimensionMismatch(f"y has length {p.y.shape[0]} but X has {p.N} rows")
    if not (np.all(np.isfinite(p.X)) and np.all(np.isfinite(p.y))):
        raise NonFinite("X and y must be finite")
    prior = p.prior_spec
    if isinstance(prior, GaussianPrior):
        if not prior.var > 0:
            raise InvalidParameter("prior variance must be > 0")
    elif isinstance(prior, SpikeSlabPrior):
        if not 0.0 < prior.rho <= 1.0:
            raise InvalidParameter(f"rho must lie in (0, 1], got {prior.rho}")
        if not prior.slab_var > 0:
            raise InvalidParameter("slab variance must be > 0")
    else:
        raise InvalidParameter(f"unknown prior {prior!r}")
    lik = p.likelihood_spec
    if not isinstance(lik, (GaussianLikelihood, ProbitLikelihood)):
        raise InvalidParameter(f"unknown likelihood {lik!r}")
    if not lik.noise_var > 0:
        raise InvalidParameter("noise variance must be > 0")
    if isinstance(lik, ProbitLikelihood) and not np.all(np.abs(p.y) == 1.0):
        raise InvalidParameter("probit labels must be +1 or -1")
    return p


@dataclass(frozen=True)
class InitConfig:
    lambda1_init: float = 1.0
    lambda2_init: float = 1.0


_VECTOR_FIELDS = ("gamma1w", "gamma1z", "gamma2w", "gamma2z",
                  "eta_w", "chi_w", "eta_z", "chi_z", "mu", "sigma_diag")
_LAMBDA_FIELDS = ("lambda1w", "lambda1z", "lambda2w", "lambda2z")


@dataclass
class EpState:
    """Natural parameters of both Gaussian sites plus moment caches.

    ``lambda*`` entries are length-K/N arrays for the diagonal flavor and
    plain floats for the scalar flavor.  ``eta_*``/``chi_*`` hold the tilted
    moments of the exact factors under the site-2 cavity; ``mu`` and
    ``sigma_diag`` hold the Gaussian projection onto ``z = X w``.
    """

    flavor: str
    gamma1w: np.ndarray
    gamma1z: np.ndarray
    gamma2w: np.ndarray
    gamma2z: np.ndarray
    lambda1w: np.ndarray | float
    lambda1z: np.ndarray | float
    lambda2w: np.ndarray | float
    lambda2z: np.ndarray | float
    eta_w: np.ndarray
    chi_w: np.ndarray
    eta_z: np.ndarray
    chi_z: np.ndarray
    mu: np.ndarray
    sigma_diag: np.ndarray

    def __post_init__(self):
        if self.flavor not in ("diagonal", "scalar"):
            raise InvalidParameter(f"flavor must be 'diagonal' or 'scalar', got {self.flavor!r}")
        for name in _LAMBDA_FIELDS:
            value = getattr(self, name)
            if self.flavor == "scalar" and np.ndim(value) != 0:
                raise InvalidParameter(f"{name} must be a scalar for scalar-EP")
            if self.flavor == "diagonal" and np.ndim(value) != 1:
                raise InvalidParameter(f"{name} must be a vector for diagonal-EP")

    def copy(self) -> "EpState":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = v.copy() if isinstance(v, np.ndarray) else v
        return EpState(**kw)

    def to_dict(self) -> dict:
        out = {"flavor": self.flavor}
        for name in _VECTOR_FIELDS + _LAMBDA_FIELDS:
            v = getattr(self, name)
            out[name] = float(v) if np.ndim(v) == 0 else np.asarray(v, dtype=float).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EpState":
        kw = {"flavor": d["flavor"]}
        for name in _VECTOR_FIELDS:
            kw[name] = np.asarray(d[name], dtype=float)
        for name in _LAMBDA_FIELDS:
            v = d[name]
            kw[name] = float(v) if np.ndim(v) == 0 else np.asarray(v, dtype=float)
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "EpState":
        return cls.from_dict(json.loads(s))


@dataclass
class PosteriorSummary:
    """Marginal means/variances reported by a solver run.

    ``residual`` is the max-norm change of the tilted moments over the last
    sweep (``inf`` when no sweep was run).
    """

    mean_w: np.ndarray
    var_w: np.ndarray
    mean_z: np.ndarray
    var_z: np.ndarray
    iterations: int
    converged: bool
    residual: float

    def to_dict(self) -> dict:
        return {
            "mean_w": np.asarray(self.mean_w).tolist(),
            "var_w": np.asarray(self.var_w).tolist(),
            "mean_z": np.asarray(self.mean_z).tolist(),
            "var_z": np.asarray(self.var_z).tolist(),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "residual": float(self.residual),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorSummary":
        return cls(
            mean_w=np.asarray(d["mean_w"], dtype=float),
            var_w=np.asarray(d["var_w"], dtype=float),
            mean_z=np.asarray(d["mean_z"], dtype=float),
            var_z=np.asarray(d["var_z"], dtype=float),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            residual=float(d["residual"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "PosteriorSummary":
        return cls.from_dict(json.loads(s))


def init_state(p: GlmProblem, flavor: str = "diagonal", init: InitConfig | None = None) -> EpState:
    """Neutral starting point: ``gamma = 0`` and unit site precisions.

    The moment caches are filled by one Gaussian projection and one pass of
    the tilted-moment oracles, so a solver with ``max_iter=0`` still reports
    meaningful marginals.
    """
    from .sites import likelihood_moments, prior_moments
    from .solver_diag import gaussian_projection

    init = init or InitConfig()
    N, K = p.N, p.K
    if flavor == "diagonal":
        lam = lambda n, v: np.full(n, float(v))
    elif flavor == "scalar":
        lam = lambda n, v: float(v)
    else:
        raise InvalidParameter(f"flavor must be 'diagonal' or 'scalar', got {flavor!r}")
    l1, l2 = init.lambda1_init, init.lambda2_init
    s = EpState(
        flavor=flavor,
        gamma1w=np.zeros(K), gamma1z=np.zeros(N),
        gamma2w=np.zeros(K), gamma2z=np.zeros(N),
        lambda1w=lam(K, l1), lambda1z=lam(N, l1),
        lambda2w=lam(K, l2), lambda2z=lam(N, l2),
        eta_w=np.zeros(K), chi_w=np.ones(K), eta_z=np.zeros(N), chi_z=np.ones(N),
        mu=np.zeros(K), sigma_diag=np.ones(K),
    )
    s.mu, s.sigma_diag, _, _ = gaussian_projection(p, s)
    if not l2 > 0:
        raise InvalidParameter("lambda2_init must be > 0 to define a cavity")
    lw = np.broadcast_to(s.lambda2w, (K,))
    lz = np.broadcast_to(s.lambda2z, (N,))
    tw = prior_moments(p.prior_spec, s.gamma2w / lw, 1.0 / lw)
    tz = likelihood_moments(p.likelihood_spec, p.y, s.gamma2z / lz, 1.0 / lz)
    s.eta_w, s.chi_w = np.asarray(tw.mean, float), np.asarray(tw.var, float)
    s.eta_z, s.chi_z = np.asarray(tz.mean, float), np.asarray(tz.var, float)
    return s
