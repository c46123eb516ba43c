"""CSV ingestion of expression-style datasets and a synthetic generator for them."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import InvalidParameter, ParseError, RaggedRows, UnmappableLabel
from .randmat import rng_for

log = logging.getLogger(__name__)

_NEG_LABELS = {-1.0, 0.0}
_POS_LABELS = {1.0}


@dataclass
class Dataset:
    """Rows are samples (patients), columns are features (genes)."""

    X: np.ndarray
    y: np.ndarray
    feature_names: list | None = None
    standardized: bool = False
    dropped_columns: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.size:
            raise InvalidParameter("X must be N x K with one label per row")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise InvalidParameter("labels must be +1 or -1")
        if not np.all(np.isfinite(self.X)):
            raise InvalidParameter("X contains non-finite values")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]


def _map_label(value: float, line: int, column: int) -> float:
    if value in _NEG_LABELS:
        return -1.0
    if value in _POS_LABELS:
        return 1.0
    raise UnmappableLabel(f"label {value!r} is not one of -1, 0, 1", line=line, column=column)


def ingest_csv(path, delimiter: str = ",", has_header: bool = True, label_column: int | str = -1,
               standardize: bool = False) -> Dataset:
    """Read a rectangular numeric table with one label column.

    Parameters
    ----------
    path
        CSV file; one row per sample.
    label_column
        Index (negative values count from the end) or header name of the
        label column.  Labels ``0`` and ``-1`` map to ``-1``; ``1`` maps to ``+1``.
    standardize
        Centre and scale every feature column to unit variance; constant
        columns are dropped with a warning.

    Raises
    ------
    ParseError
        A cell is not a number (line and column are 1-based).
    RaggedRows
        Rows have different lengths.
    UnmappableLabel
        A label is outside ``{-1, 0, 1}``.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh, delimiter=delimiter))
                    if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise ParseError(f"cannot read {str(path)!r}: {exc.strerror}") from None
    header = None
    if has_header:
        if not rows:
            raise ParseError("file is empty", line=1)
        header = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise ParseError("no data rows", line=1 if header is None else 2)
    width = len(header) if header is not None else len(rows[0][1])
    for line, r in rows:
        if len(r) != width:
            raise RaggedRows(f"row has {len(r)} fields, expected {width}", line=line)
    if width < 2:
        raise ParseError("need at least one feature column and one label column", line=rows[0][0])

    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise ParseError(f"label column {label_column!r} not found in header", line=1)
        lab = header.index(label_column)
    else:
        lab = int(label_column) % width

    data = np.empty((len(rows), width))
    for i, (line, r) in enumerate(rows):
        for j, cell in enumerate(r):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"cannot parse {cell!r} as a number", line=line, column=j + 1) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value {cell!r}", line=line, column=j + 1)
            data[i, j] = v
    y = np.array([_map_label(data[i, lab], rows[i][0], lab + 1) for i in range(len(rows))])
    keep = [j for j in range(width) if j != lab]
    X = data[:, keep]
    names = [header[j] for j in keep] if header is not None else None

    dropped = []
    if standardize:
        sd = X.std(axis=0)
        const = sd == 0
        if np.any(const):
            dropped = [names[j] if names else j for j in np.flatnonzero(const)]
            log.warning("dropping %d zero-variance column(s): %s", len(dropped), dropped)
            X = X[:, ~const]
            sd = sd[~const]
            if names is not None:
                names = [n for n, c in zip(names, const) if not c]
        X = (X - X.mean(axis=0)) / sd
    return Dataset(X=X, y=y, feature_names=names, standardized=standardize, dropped_columns=dropped)


@dataclass
class SyntheticMicroarray:
    """Planted sparse probit model with Gaussian expression levels."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray


def synthetic_microarray(n_samples: int, n_genes: int, rho: float = 0.1, seed: int = 0,
                         noise_var: float = 1.0, x_scale: float | None = None) -> SyntheticMicroarray:
    """Draw ``X`` iid Gaussian (variance ``x_scale**2``, default ``1/K``), a ``rho``-sparse
    standard-normal ``w``, and probit labels ``y = sign(Xw + noise)``."""
    if not 0 < rho <= 1:
        raise InvalidParameter("rho must lie in (0, 1]")
    scale = 1.0 / math.sqrt(n_genes) if x_scale is None else float(x_scale)
    rng = rng_for(seed, "misc")
    X = scale * rng.standard_normal((n_samples, n_genes))
    w = rng.standard_normal(n_genes) * (rng.random(n_genes) < rho)
    p = ndtr(X @ w / math.sqrt(noise_var))
    y = np.where(rng.random(n_samples) < p, 1.0, -1.0)
    return SyntheticMicroarray(X=X, y=y, w=w)


def write_csv(path, X, y, feature_names=None, delimiter: str = ",") -> Path:
    """Write features plus a trailing ``label`` column with 17 significant digits."""
    path = Path(path)
    X = np.asarray(X, dtype=float)
    names = list(feature_names) if feature_names is not None else [f"g{j}" for j in range(X.shape[1])]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(names + ["label"])
        for row, lab in zip(X, y):
            w.writerow([format(v, ".17g") for v in row] + [format(int(lab), "d")])
    return path


def write_table(path, columns: dict) -> Path:
    """Write equally long named columns as CSV; floats use 17 significant digits."""
    path = Path(path)
    keys = list(columns)
    cols = [np.asarray(columns[k]) for k in keys]
    if len({c.shape[0] for c in cols}) > 1:
        raise InvalidParameter("columns have different lengths")

    def fmt(v):
        if isinstance(v, (np.integer, int)):
            return str(int(v))
        return format(float(v), ".17g")

    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for i in range(cols[0].shape[0] if cols else 0):
            w.writerow([fmt(c[i]) for c in cols])
    return path


def read_table(path) -> dict:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        keys = next(r)
        rows = list(r)
    return {k: np.array([float(row[i]) for row in rows]) for i, k in enumerate(keys)}
