"""Experiment commands behind the command-line interface.

Every command takes a flat parameter map, fills in defaults, rejects unknown
keys, and returns an :class:`ExperimentRecord` whose ``config`` field is
enough to re-run it.  Side files (CSV) go to ``out_dir`` when one is given.
"""
from __future__ import annotations

import json
import logging
import math
import time
import timeit
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import freeprob as fp
from . import locallaw as ll
from .errors import BenchConfigError, ConfigError, InvalidParameter
from .io import ingest_csv, synthetic_microarray, write_csv, write_table
from .model import (GaussianLikelihood, GaussianPrior, GlmProblem, ProbitLikelihood, SpikeSlabPrior,
                    init_state)
from .randmat import TwoPoint, Uniform, diag_from_law, haar_rotated, permuted_hadamard, rng_for
from .solver_diag import SolverConfig, ep_sweep_diagonal, solve_diagonal
from .solver_scalar import ep_sweep_scalar, precompute_svd, solve_scalar

log = logging.getLogger(__name__)


@dataclass
class ExperimentRecord:
    command: str
    config: dict
    seed: int
    results: dict
    wall_times_ms: dict = field(default_factory=dict)
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=_json_default, allow_nan=True)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# configuration handling
# ---------------------------------------------------------------------------

_GLOBAL = {"seed": 0, "out_dir": None, "threads": 1}

_DATA = {
    "data": "", "delimiter": ",", "label_column": -1, "has_header": True, "standardize": False,
    "n_samples": 256, "n_genes": 512, "x_scale": None,
    "prior": "spike_slab", "rho": 0.1, "slab_var": 1.0, "prior_var": 1.0,
    "likelihood": "probit", "noise_var": 1.0,
}
_SOLVER = {"max_iter": 500, "tol": 1e-10, "damping": 0.5}

DEFAULTS = {
    "ep-fit": {**_DATA, **_SOLVER, "flavor": "both"},
    "approx-quality": {**_DATA, **_SOLVER},
    "bench": {**_DATA, "sizes": [256, 512, 1024, 2048], "alpha": 0.5, "flavor": "both", "repeats": 3,
              "min_time_ms": 1.0},
    "local-law": {"sizes": [512, 1024, 2048], "seeds": 20, "lambda1_a": 1.0, "lambda1_b": 2.0,
                  "ensemble": "haar", "j_a": 0.0, "j_b": 1.0, "shift": 1.0, "noise_norm": 1e-3},
    "freeness": {"n": 1024, "pair": "haar", "law": "uniform", "a": 0.0, "b": 1.0, "degree_bound": 2,
                 "length_bound": 4},
    "transforms": {"spectrum": "uniform", "n": 512, "a": 1.0, "b": 2.0, "c": 1.0,
                   "s_min": -2.0, "s_max": -0.05, "omega_min": -0.9, "omega_max": -0.05, "points": 16},
    "ingest-check": {"data": "", "delimiter": ",", "label_column": -1, "has_header": True,
                     "standardize": False, "n_samples": 32, "n_genes": 64},
}
COMMANDS = tuple(DEFAULTS)


def _coerce(key, value, default):
    """Convert ``value`` (possibly a string from a key-value file) to the type of ``default``."""
    try:
        if key == "seeds":
            # either a count (seeds seed, seed+1, ...) or an explicit list
            if isinstance(value, str) and "," not in value and ";" not in value:
                return int(value)
            if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
                return int(value)
            return _coerce(key + "[]", value, [])
        if isinstance(default, bool):
            if isinstance(value, str):
                v = value.strip().lower()
                if v in ("1", "true", "yes", "on"):
                    return True
                if v in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.replace(";", ",").split(",") if v.strip()]
            elif not isinstance(value, (list, tuple)):
                value = [value]
            return [int(v) for v in value]
        if default is None:
            if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "null")):
                return None
            return value if key == "out_dir" else float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r}") from None


def resolve_config(command: str, overrides: dict | None = None) -> dict:
    """Merge ``overrides`` into the defaults of ``command``; unknown keys raise ConfigError."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    base = {**_GLOBAL, **DEFAULTS[command]}
    out = dict(base)
    for k, v in (overrides or {}).items():
        key = k.replace("-", "_")
        if key not in base:
            raise ConfigError(f"unknown config key {k!r} for command {command!r}")
        out[key] = _coerce(key, v, base[key])
    return out


def _seeds(cfg):
    s = cfg["seeds"]
    base = cfg["seed"]
    if isinstance(s, int):
        return list(range(base, base + s))
    return list(s)


def _outfile(cfg, name):
    if not cfg.get("out_dir"):
        return None
    d = Path(cfg["out_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d / name


class _Timer:
    def __init__(self):
        self.times = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = timer.times.get(name, 0.0) + 1e3 * (time.perf_counter() - self.t0)
                return False

        return _Ctx()


# ---------------------------------------------------------------------------
# problem construction
# ---------------------------------------------------------------------------

def _prior(cfg):
    if cfg["prior"] == "spike_slab":
        return SpikeSlabPrior(rho=cfg["rho"], slab_var=cfg["slab_var"])
    if cfg["prior"] == "gaussian":
        return GaussianPrior(0.0, cfg["prior_var"])
    raise ConfigError(f"config key 'prior': unknown prior {cfg['prior']!r}")


def _likelihood(cfg):
    if cfg["likelihood"] == "probit":
        return ProbitLikelihood(cfg["noise_var"])
    if cfg["likelihood"] == "gaussian":
        return GaussianLikelihood(cfg["noise_var"])
    raise ConfigError(f"config key 'likelihood': unknown likelihood {cfg['likelihood']!r}")


def build_problem(cfg: dict, n_samples: int | None = None, n_genes: int | None = None) -> GlmProblem:
    """Problem from ``cfg['data']`` (a CSV path) or, if empty, from the synthetic generator."""
    prior, lik = _prior(cfg), _likelihood(cfg)
    if cfg.get("data"):
        ds = ingest_csv(cfg["data"], delimiter=cfg["delimiter"], has_header=cfg["has_header"],
                        label_column=cfg["label_column"], standardize=cfg["standardize"])
        return GlmProblem(ds.X, ds.y, prior, lik)
    N = n_samples or cfg["n_samples"]
    K = n_genes or cfg["n_genes"]
    syn = synthetic_microarray(N, K, rho=min(cfg["rho"], 1.0), seed=cfg["seed"], noise_var=cfg["noise_var"],
                               x_scale=cfg["x_scale"])
    y = syn.y
    if isinstance(lik, GaussianLikelihood):
        noise = rng_for(cfg["seed"], "gaussian_iid").standard_normal(N)
        y = syn.X @ syn.w + math.sqrt(cfg["noise_var"]) * noise
    return GlmProblem(syn.X, y, prior, lik)


def _solver_cfg(cfg):
    try:
        return SolverConfig(max_iter=cfg["max_iter"], tol=cfg["tol"], damping=cfg["damping"])
    except InvalidParameter as exc:
        raise ConfigError(str(exc)) from exc


def _corr(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if np.std(a) == 0 or np.std(b) == 0:
        return 1.0 if np.allclose(a, b) else float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def _median_rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.median(np.abs(a - b) / np.abs(a)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ep_fit(overrides: dict | None = None) -> ExperimentRecord:
    """Fit diagonal and/or scalar EP and compare their posterior means."""
    cfg = resolve_config("ep-fit", overrides)
    timer = _Timer()
    with timer.stage("build"):
        p = build_problem(cfg)
    scfg = _solver_cfg(cfg)
    results = {"N": p.N, "K": p.K}
    fits = {}
    if cfg["flavor"] not in ("both", "diagonal", "scalar"):
        raise ConfigError(f"config key 'flavor': unknown flavor {cfg['flavor']!r}")
    if cfg["flavor"] in ("both", "diagonal"):
        with timer.stage("diagonal"):
            fits["diagonal"] = solve_diagonal(p, scfg)[0]
    if cfg["flavor"] in ("both", "scalar"):
        with timer.stage("scalar"):
            fits["scalar"] = solve_scalar(p, scfg)[0]
    for name, s in fits.items():
        results[name] = {"iterations": s.iterations, "converged": s.converged, "residual": s.residual,
                         "mean_w": s.mean_w.tolist(), "var_w": s.var_w.tolist()}
    if len(fits) == 2:
        d, sc = fits["diagonal"], fits["scalar"]
        results["mean_correlation"] = _corr(d.mean_w, sc.mean_w)
        results["mean_max_abs_diff"] = float(np.max(np.abs(d.mean_w - sc.mean_w)))
        results["var_median_rel_error"] = _median_rel(d.var_w, sc.var_w)
    path = _outfile(cfg, "ep_fit.csv")
    if path is not None:
        cols = {"index": np.arange(p.K)}
        cols["mu_diag"] = fits["diagonal"].mean_w if "diagonal" in fits else np.full(p.K, np.nan)
        cols["mu_scalar"] = fits["scalar"].mean_w if "scalar" in fits else np.full(p.K, np.nan)
        write_table(path, cols)
        results["csv"] = str(path)
    status = "ok" if all(s.converged for s in fits.values()) else "not_converged"
    return ExperimentRecord("ep-fit", cfg, cfg["seed"], results, timer.times, status)


def approximation_pairs(X, lambda1w, lambda1z) -> dict:
    """Exact resolvent diagonals next to their scalar-cavity approximations.

    The w-side scalar is ``R_{X^T Lambda1z X}(-chi_w)``; the z-side scalar is
    then fixed by the trace identity ``lambda2w chi_w = alpha (1 - lambda2z chi_z)``,
    which only needs ``Lambda1z > 0`` (site-1 precisions on the w-side may be
    negative under a spike-and-slab prior).
    """
    X = np.asarray(X, float)
    lw = np.asarray(lambda1w, float) * np.ones(X.shape[1])
    lz = np.asarray(lambda1z, float) * np.ones(X.shape[0])
    N, K = X.shape
    alpha = N / K
    XtLX = X.T @ (lz[:, None] * X)
    XtLX = 0.5 * (XtLX + XtLX.T)
    Sigma = np.linalg.inv(XtLX + np.diag(lw))
    exact_w = np.diag(Sigma).copy()
    exact_z = np.einsum("ij,jk,ik->i", X, Sigma, X)
    chi_w, chi_z = float(np.mean(exact_w)), float(np.mean(exact_z))
    spec = fp.EmpiricalSpectrum(np.linalg.eigvalsh(XtLX))
    lam2w = spec.mean if spec.hi - spec.lo <= 1e-12 * max(1.0, abs(spec.hi)) else fp.r_transform(spec, -chi_w)
    lam2z = (1.0 - lam2w * chi_w / alpha) / chi_z
    return {"exact_w": exact_w, "approx_w": 1.0 / (lw + lam2w), "exact_z": exact_z,
            "approx_z": 1.0 / (lz + lam2z), "lambda2w": float(lam2w), "lambda2z": float(lam2z),
            "chi_w": chi_w, "chi_z": chi_z}


def cmd_approx_quality(overrides: dict | None = None) -> ExperimentRecord:
    """Per-entry comparison of resolvent diagonals with their scalar-cavity forms."""
    cfg = resolve_config("approx-quality", overrides)
    timer = _Timer()
    with timer.stage("build"):
        p = build_problem(cfg)
    with timer.stage("diagonal"):
        summ, state, _ = solve_diagonal(p, _solver_cfg(cfg))
    with timer.stage("pairs"):
        pairs = approximation_pairs(p.X, state.lambda1w, state.lambda1z)
    results = {
        "N": p.N, "K": p.K, "converged": summ.converged, "iterations": summ.iterations,
        "lambda2w": pairs["lambda2w"], "lambda2z": pairs["lambda2z"],
        "w_correlation": _corr(pairs["exact_w"], pairs["approx_w"]),
        "w_median_rel_error": _median_rel(pairs["exact_w"], pairs["approx_w"]),
        "z_correlation": _corr(pairs["exact_z"], pairs["approx_z"]),
        "z_median_rel_error": _median_rel(pairs["exact_z"], pairs["approx_z"]),
    }
    pw, pz = _outfile(cfg, "approx_w.csv"), _outfile(cfg, "approx_z.csv")
    if pw is not None:
        write_table(pw, {"index": np.arange(p.K), "exact": pairs["exact_w"], "approx": pairs["approx_w"]})
        write_table(pz, {"index": np.arange(p.N), "exact": pairs["exact_z"], "approx": pairs["approx_z"]})
        results["csv"] = [str(pw), str(pz)]
    status = "ok" if summ.converged else "not_converged"
    return ExperimentRecord("approx-quality", cfg, cfg["seed"], results, timer.times, status)


def fit_loglog(sizes, times) -> dict:
    """Least-squares slope of ``log t`` against ``log K`` with its standard error."""
    fit = stats.linregress(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)))
    return {"slope": float(fit.slope), "stderr": float(fit.stderr), "intercept": float(fit.intercept)}


def cmd_bench(overrides: dict | None = None) -> ExperimentRecord:
    """Median wall time of one EP sweep per size, and the fitted log-log slope."""
    cfg = resolve_config("bench", overrides)
    sizes = cfg["sizes"]
    if len(sizes) < 4:
        raise BenchConfigError(f"config key 'sizes': need at least 4 sizes, got {len(sizes)}")
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 2:
        raise BenchConfigError("config key 'sizes': sizes must be ascending and >= 2")
    if cfg["repeats"] < 1:
        raise BenchConfigError("config key 'repeats': must be >= 1")
    flavors = ["diagonal", "scalar"] if cfg["flavor"] == "both" else [cfg["flavor"]]
    if any(f not in ("diagonal", "scalar") for f in flavors):
        raise ConfigError(f"config key 'flavor': unknown flavor {cfg['flavor']!r}")
    scfg = SolverConfig(damping=0.5)
    per = {f: [] for f in flavors}
    flags = []
    timer = _Timer()
    for K in sizes:
        N = max(1, int(round(cfg["alpha"] * K)))
        p = build_problem(cfg, n_samples=N, n_genes=K)
        for f in flavors:
            s = init_state(p, f)
            if f == "scalar":
                cache = precompute_svd(p.X)
                sweep = lambda: ep_sweep_scalar(p, s, cache, scfg)  # noqa: E731
            else:
                sweep = lambda: ep_sweep_diagonal(p, s, scfg)  # noqa: E731
            sweep()  # warm-up
            # batch calls so each timed batch lasts >= 0.2 s, as timeit does
            tm = timeit.Timer(sweep)
            number, _ = tm.autorange()
            batches = tm.repeat(repeat=cfg["repeats"], number=number)
            ts = [1e3 * b / number for b in batches]
            med = float(np.median(ts))
            per[f].append(med)
            timer.times[f"{f}_K{K}"] = 1e3 * float(np.sum(batches))
            if med < cfg["min_time_ms"]:
                flags.append({"flavor": f, "K": K, "median_ms": med})
    results = {"sizes": sizes, "alpha": cfg["alpha"], "median_ms": per,
               "fits": {f: fit_loglog(sizes, per[f]) for f in flavors}, "too_fast": flags}
    path = _outfile(cfg, "bench.csv")
    if path is not None:
        write_table(path, {"K": np.asarray(sizes), **{f"{f}_ms": np.asarray(per[f]) for f in flavors}})
        results["csv"] = str(path)
    return ExperimentRecord("bench", cfg, cfg["seed"], results, timer.times)


def _ensemble(cfg):
    kind = cfg["ensemble"]
    if kind == "haar":
        return ll.HaarRotatedEnsemble(Uniform(cfg["j_a"], cfg["j_b"]))
    if kind == "shift":
        return ll.ShiftEnsemble(cfg["shift"])
    if kind == "dependent":
        return ll.DependentNoiseEnsemble(cfg["noise_norm"])
    if kind == "hadamard":
        law = Uniform(cfg["j_a"], cfg["j_b"])

        def hadamard_ensemble(lam, seed):
            d = diag_from_law(len(lam), law, seed, stream="second_diag")
            return haar_rotated(d, seed, orthogonal=permuted_hadamard, stream="permuted_hadamard"), d

        return hadamard_ensemble
    raise ConfigError(f"config key 'ensemble': unknown ensemble {kind!r}")


def cmd_local_law(overrides: dict | None = None) -> ExperimentRecord:
    """Resolvent-diagonal deviations from the scalar local law over sizes and seeds."""
    cfg = resolve_config("local-law", overrides)
    timer = _Timer()
    excluded = []
    with timer.stage("runs"):
        reports = ll.local_law_experiment(Uniform(cfg["lambda1_a"], cfg["lambda1_b"]), _ensemble(cfg),
                                          cfg["sizes"], _seeds(cfg), excluded=excluded)
    results = {
        "runs": [r.to_dict(include_diagonal=False) for r in reports],
        "median_l2_deviation": {str(k): v for k, v in ll.median_deviation_by_size(reports).items()},
        "excluded": excluded,
    }
    path = _outfile(cfg, "local_law.csv")
    if path is not None:
        write_table(path, {"n": np.array([r.n for r in reports], dtype=int),
                           "seed": np.array([r.seed for r in reports], dtype=int),
                           "l2_deviation": np.array([r.l2_deviation for r in reports])})
        results["csv"] = str(path)
    return ExperimentRecord("local-law", cfg, cfg["seed"], results, timer.times)


def _law(cfg):
    if cfg["law"] == "uniform":
        return Uniform(cfg["a"], cfg["b"])
    if cfg["law"] == "twopoint":
        return TwoPoint(cfg["a"], cfg["b"])
    raise ConfigError(f"config key 'law': unknown law {cfg['law']!r}")


def cmd_freeness(overrides: dict | None = None) -> ExperimentRecord:
    """Mixed-word freeness score of a diagonal matrix and a second matrix."""
    cfg = resolve_config("freeness", overrides)
    timer = _Timer()
    law, n, seed = _law(cfg), cfg["n"], cfg["seed"]
    a = np.diag(diag_from_law(n, law, seed))
    d2 = diag_from_law(n, law, seed, stream="second_diag")
    if cfg["pair"] == "haar":
        b = haar_rotated(d2, seed, stream="second_orthogonal")
    elif cfg["pair"] == "independent_diag":
        b = np.diag(d2)
    else:
        raise ConfigError(f"config key 'pair': unknown pair {cfg['pair']!r}")
    with timer.stage("score"):
        rep = fp.freeness_score([[a], [b]], degree_bound=cfg["degree_bound"], length_bound=cfg["length_bound"])
    results = {"score": rep.max_word_trace, "n_words": len(rep.per_word)}
    path = _outfile(cfg, "freeness.csv")
    if path is not None:
        with path.open("w") as fh:
            fh.write("word,trace\n")
            for w, v in rep.per_word:
                fh.write(f"{w},{format(v, '.17g')}\n")
        results["csv"] = str(path)
    return ExperimentRecord("freeness", cfg, seed, results, timer.times)


def _spectrum(cfg):
    kind = cfg["spectrum"]
    if kind == "point_mass":
        return fp.EmpiricalSpectrum(np.full(cfg["n"], cfg["c"]))
    if kind == "uniform":
        return fp.EmpiricalSpectrum(diag_from_law(cfg["n"], Uniform(cfg["a"], cfg["b"]), cfg["seed"]))
    if kind == "marchenko_pastur":
        from .randmat import gaussian_iid
        n = cfg["n"]
        m = int(round(n / cfg["c"])) if cfg["c"] > 0 else n
        X = gaussian_iid(m, n, 1.0 / math.sqrt(m), cfg["seed"])
        return fp.EmpiricalSpectrum(np.linalg.eigvalsh(X.T @ X))
    raise ConfigError(f"config key 'spectrum': unknown spectrum {kind!r}")


def cmd_transforms(overrides: dict | None = None) -> ExperimentRecord:
    """R- and S-transform grids of a synthetic spectrum."""
    cfg = resolve_config("transforms", overrides)
    if cfg["points"] < 1:
        raise ConfigError("config key 'points': must be >= 1")
    timer = _Timer()
    spec = _spectrum(cfg)
    s = np.linspace(cfg["s_min"], cfg["s_max"], cfg["points"])
    om = np.linspace(cfg["omega_min"], cfg["omega_max"], cfg["points"])
    with timer.stage("r"):
        rg = fp.r_transform_grid(spec, s)
    with timer.stage("s"):
        sg = fp.s_transform_grid(spec, om)
    results = {"r": rg.to_dict(), "s": sg.to_dict(), "mean": spec.mean}
    path = _outfile(cfg, "transforms.csv")
    if path is not None:
        write_table(path, {"s": s, "R": np.where(rg.converged_flags, rg.outputs, np.nan),
                           "omega": om, "S": np.where(sg.converged_flags, sg.outputs, np.nan)})
        results["csv"] = str(path)
    return ExperimentRecord("transforms", cfg, cfg["seed"], results, timer.times)


def cmd_ingest_check(overrides: dict | None = None) -> ExperimentRecord:
    """Ingest a CSV, or write a synthetic one and check it reads back bit-identically."""
    cfg = resolve_config("ingest-check", overrides)
    timer = _Timer()
    results = {}
    path = cfg["data"]
    roundtrip = None
    if not path:
        syn = synthetic_microarray(cfg["n_samples"], cfg["n_genes"], seed=cfg["seed"])
        target = _outfile(cfg, "synthetic_microarray.csv")
        if target is None:
            import tempfile
            target = Path(tempfile.mkdtemp()) / "synthetic_microarray.csv"
        write_csv(target, syn.X, syn.y)
        path = str(target)
        roundtrip = syn
    with timer.stage("ingest"):
        ds = ingest_csv(path, delimiter=cfg["delimiter"], has_header=cfg["has_header"],
                        label_column=cfg["label_column"], standardize=cfg["standardize"])
    results.update({"path": str(path), "N": ds.N, "K": ds.K, "n_positive": int(np.sum(ds.y > 0)),
                    "n_negative": int(np.sum(ds.y < 0)), "dropped_columns": ds.dropped_columns})
    if roundtrip is not None and not cfg["standardize"]:
        results["bit_identical"] = bool(np.array_equal(ds.X, roundtrip.X) and np.array_equal(ds.y, roundtrip.y))
    return ExperimentRecord("ingest-check", cfg, cfg["seed"], results, timer.times)


RUNNERS = {
    "ep-fit": cmd_ep_fit,
    "approx-quality": cmd_approx_quality,
    "bench": cmd_bench,
    "local-law": cmd_local_law,
    "freeness": cmd_freeness,
    "transforms": cmd_transforms,
    "ingest-check": cmd_ingest_check,
}


def rerun(record: ExperimentRecord | dict) -> ExperimentRecord:
    """Re-run a record from its own embedded config."""
    d = record.to_dict() if isinstance(record, ExperimentRecord) else record
    return RUNNERS[d["command"]](dict(d["config"]))
