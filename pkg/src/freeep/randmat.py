"""Seeded matrix ensembles.

All randomness comes from numpy's Philox4x64 counter-based generator keyed
by ``(seed, stream)``, where ``stream`` is a fixed constant per operation.
Two operations called with the same seed therefore draw from independent
streams, and every output is a pure function of its arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.linalg import hadamard

from .errors import ConfigError, InvalidParameter, NotPowerOfTwo

STREAMS = {
    "haar_orthogonal": 0x48414152,
    "permuted_hadamard": 0x48414441,
    "gaussian_iid": 0x47415553,
    "rademacher_diag": 0x52414445,
    "diag_from_law": 0x4C415721,
    "misc": 0x4D495343,
    # secondary streams used by experiments that need two draws of one kind
    "second_diag": 0x44494132,
    "second_orthogonal": 0x4F525432,
}


def rng_for(seed: int, stream: str | int = "misc") -> np.random.Generator:
    key = STREAMS[stream] if isinstance(stream, str) else int(stream)
    return np.random.Generator(np.random.Philox(key=[int(seed) % 2**64, key % 2**64]))


def haar_orthogonal(n: int, seed: int, stream: str | int = "haar_orthogonal") -> np.ndarray:
    """Haar-distributed orthogonal matrix via sign-corrected QR of a Gaussian."""
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    g = rng_for(seed, stream).standard_normal((n, n))
    q, r = np.linalg.qr(g)
    # make R's diagonal positive so Q is exactly Haar
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def permuted_hadamard(n: int, seed: int, stream: str | int = "permuted_hadamard") -> np.ndarray:
    """``P1 D H P2 / sqrt(n)`` with Sylvester ``H``, random sign ``D``, permutations ``P``."""
    if n < 1 or n & (n - 1):
        raise NotPowerOfTwo(f"n must be a power of two, got {n}")
    rng = rng_for(seed, stream)
    p1 = rng.permutation(n)
    signs = rng.choice(np.array([-1.0, 1.0]), size=n)
    p2 = rng.permutation(n)
    h = hadamard(n).astype(float) / math.sqrt(n)
    return (signs[:, None] * h)[p1][:, p2]


def gaussian_iid(n: int, k: int, scale: float, seed: int) -> np.ndarray:
    if not scale > 0:
        raise InvalidParameter("scale must be > 0")
    return scale * rng_for(seed, "gaussian_iid").standard_normal((n, k))


def rademacher_diag(n: int, seed: int) -> np.ndarray:
    return rng_for(seed, "rademacher_diag").choice(np.array([-1.0, 1.0]), size=n)


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise InvalidParameter("Uniform law needs a < b")


@dataclass(frozen=True)
class TwoPoint:
    x1: float
    x2: float
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise InvalidParameter("TwoPoint law needs p in (0, 1)")


def diag_from_law(n: int, law: Uniform | TwoPoint, seed: int, stream: str | int = "diag_from_law") -> np.ndarray:
    rng = rng_for(seed, stream)
    if isinstance(law, Uniform):
        return rng.uniform(law.a, law.b, size=n)
    if isinstance(law, TwoPoint):
        # p is the probability of x1
        return np.where(rng.random(n) < law.p, float(law.x1), float(law.x2))
    raise InvalidParameter(f"unknown law {law!r}")


KINDS = ("HaarOrthogonal", "PermutedHadamard", "GaussianIid", "RademacherDiag", "DiagFromLaw")
_SPEC_KEYS = {"kind", "n", "k", "scale", "seed", "law", "a", "b", "x1", "x2", "p"}


@dataclass(frozen=True)
class EnsembleSpec:
    kind: str
    n: int
    seed: int = 0
    k: int | None = None
    scale: float = 1.0
    law: Uniform | TwoPoint | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameter(f"unknown ensemble kind {self.kind!r}")
        if self.kind == "GaussianIid" and not self.scale > 0:
            raise InvalidParameter("scale must be > 0")
        if self.kind == "PermutedHadamard" and (self.n < 1 or self.n & (self.n - 1)):
            raise NotPowerOfTwo(f"n must be a power of two, got {self.n}")
        if self.kind == "DiagFromLaw" and self.law is None:
            raise InvalidParameter("DiagFromLaw needs a law")

    @classmethod
    def from_mapping(cls, cfg: dict[str, Any]) -> "EnsembleSpec":
        unknown = set(cfg) - _SPEC_KEYS
        if unknown:
            raise ConfigError(f"unknown ensemble key(s): {', '.join(sorted(unknown))}")
        try:
            law = None
            if cfg["kind"] == "DiagFromLaw":
                name = cfg.get("law", "Uniform")
                if name == "Uniform":
                    law = Uniform(float(cfg["a"]), float(cfg["b"]))
                elif name == "TwoPoint":
                    law = TwoPoint(float(cfg["x1"]), float(cfg["x2"]), float(cfg.get("p", 0.5)))
                else:
                    raise ConfigError(f"unknown law {name!r}")
            return cls(
                kind=cfg["kind"], n=int(cfg["n"]), seed=int(cfg.get("seed", 0)),
                k=None if cfg.get("k") is None else int(cfg["k"]),
                scale=float(cfg.get("scale", 1.0)), law=law,
            )
        except KeyError as exc:
            raise ConfigError(f"missing ensemble key {exc.args[0]!r}") from exc

    def generate(self) -> np.ndarray:
        if self.kind == "HaarOrthogonal":
            return haar_orthogonal(self.n, self.seed)
        if self.kind == "PermutedHadamard":
            return permuted_hadamard(self.n, self.seed)
        if self.kind == "GaussianIid":
            return gaussian_iid(self.n, self.k or self.n, self.scale, self.seed)
        if self.kind == "RademacherDiag":
            return rademacher_diag(self.n, self.seed)
        return diag_from_law(self.n, self.law, self.seed)


def haar_rotated(diag: np.ndarray, seed: int, orthogonal=haar_orthogonal,
                 stream: str | int = "haar_orthogonal") -> np.ndarray:
    """``U diag(d) U^T`` for an independent Haar (or Hadamard-type) ``U``."""
    u = orthogonal(len(diag), seed, stream)
    m = (u * diag) @ u.T
    return 0.5 * (m + m.T)
