"""Data ingestion, ranks and generalized Pareto margin fits.

CSV files are read locally (header row required, configurable delimiter,
decimal point only). Rows with missing values in the selected columns are
dropped at ingestion. Ranks follow the maximal-rank convention for ties:
the rank of an entry is the number of entries in its column that are less
than or equal to it, which makes the rank matrix invariant under strictly
increasing transformations of a column.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

__all__ = [
    "DataMatrix",
    "RankMatrix",
    "GpdFit",
    "ingest_csv",
    "ranks",
    "fit_gpd",
    "gpd_survival",
]


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """An n x d block of finite observations with column labels."""

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d array")
        n, d = values.shape
        if n < 2 or d < 1:
            raise ValueError(f"need at least 2 rows and 1 column, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        if len(self.labels) != d:
            raise ValueError("one label per column required")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class RankMatrix:
    """Columnwise maximal ranks of a DataMatrix, each entry in {1, ..., n}."""

    ranks: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.ranks, dtype=np.int64)
        if r.ndim != 2:
            raise ValueError("ranks must be a 2-d array")
        n = r.shape[0]
        if r.min() < 1 or r.max() > n:
            raise ValueError("ranks must lie in {1, ..., n}")
        r.flags.writeable = False
        object.__setattr__(self, "ranks", r)

    @property
    def n(self) -> int:
        return self.ranks.shape[0]

    @property
    def d(self) -> int:
        return self.ranks.shape[1]


@dataclass(frozen=True)
class GpdFit:
    """Generalized Pareto fit to the excesses over a threshold."""

    threshold: float
    scale: float
    shape: float
    se_scale: float
    se_shape: float
    n_exceed: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.n_exceed < 1:
            raise ValueError("need at least one exceedance")

    def to_json(self) -> str:
        return json.dumps(
            {
                "threshold": self.threshold,
                "scale": self.scale,
                "shape": self.shape,
                "se_scale": self.se_scale,
                "se_shape": self.se_shape,
                "n_exceed": self.n_exceed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GpdFit":
        return cls(**json.loads(text))


def ingest_csv(
    path,
    value_columns,
    transform: str = "none",
    delimiter: str = ",",
) -> DataMatrix:
    """Read named columns from a CSV file into a DataMatrix.

    Args:
        path: file to read; a header row is required.
        value_columns: labels of the columns to keep, in output order.
        transform: "none" or "negative_log_return". The latter maps each
            pair of consecutive prices (p_i, p_{i+1}) to -log(p_{i+1}/p_i),
            so the output has one row less than the input.
        delimiter: field separator, comma by default.

    Raises:
        OSError: unreadable file.
        ValueError: unknown column, malformed numbers, or nonpositive
            prices under the log-return transform.
    """
    if transform not in ("none", "negative_log_return"):
        raise ValueError(f"unknown transform {transform!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        cols = []
        for label in value_columns:
            if label not in header:
                raise ValueError(f"{path}: no column named {label!r}")
            cols.append(header.index(label))
        rows = []
        for raw in reader:
            if not raw:
                continue
            vals = []
            ok = True
            for c in cols:
                cell = raw[c].strip() if c < len(raw) else ""
                if not cell or cell.upper() in ("NA", "NAN", "NULL"):
                    ok = False
                    break
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: cannot parse {cell!r} in column {header[c]!r}"
                    ) from None
                if not math.isfinite(v):
                    ok = False
                    break
                vals.append(v)
            if ok:
                rows.append(vals)
    values = np.asarray(rows, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError(f"{path}: fewer than two complete rows")
    if transform == "negative_log_return":
        if np.any(values <= 0):
            raise ValueError("negative_log_return requires strictly positive prices")
        values = -np.log(values[1:] / values[:-1])
    return DataMatrix(values=values, labels=tuple(value_columns))


def ranks(data: DataMatrix) -> RankMatrix:
    """Columnwise ranks, ties sharing the maximal rank of their block."""
    x = data.values
    n, d = x.shape
    out = np.empty((n, d), dtype=np.int64)
    for j in range(d):
        col = x[:, j]
        order = np.argsort(col, kind="stable")
        sorted_col = col[order]
        # rank of value v = count of entries <= v
        out[:, j] = np.searchsorted(sorted_col, col, side="right")
    return RankMatrix(ranks=out)


def _gpd_nll(params, excesses):
    sigma, gamma = params
    if sigma <= 0:
        return np.inf
    z = excesses / sigma
    if abs(gamma) < 1e-9:
        return len(excesses) * np.log(sigma) + np.sum(z)
    arg = 1.0 + gamma * z
    if np.any(arg <= 0):
        return np.inf
    return len(excesses) * np.log(sigma) + (1.0 + 1.0 / gamma) * np.sum(np.log(arg))


def fit_gpd(
    data: DataMatrix,
    column: str,
    quantile_level: float,
    shape_bounds: tuple[float, float] = (-0.5, 1.0),
) -> GpdFit:
    """Maximum likelihood GPD fit to the excesses over an empirical quantile.

    The threshold is the empirical ``quantile_level`` quantile of the column.
    Standard errors come from the inverse observed information at the
    optimum. The shape search is confined to ``shape_bounds``.
    """
    if not 0.0 < quantile_level < 1.0:
        raise ValueError("quantile_level must lie in (0, 1)")
    if column not in data.labels:
        raise ValueError(f"no column named {column!r}")
    col = data.values[:, data.labels.index(column)]
    u = float(np.quantile(col, quantile_level))
    excesses = col[col > u] - u
    if excesses.size < 10:
        raise ValueError(
            f"only {excesses.size} exceedances above the {quantile_level} quantile"
        )

    # moment/scipy start, then a simplex polish inside the shape box
    try:
        c0, _, s0 = stats.genpareto.fit(excesses, floc=0.0)
    except Exception:
        c0, s0 = 0.1, float(np.mean(excesses))
    c0 = float(np.clip(c0, shape_bounds[0] + 1e-6, shape_bounds[1] - 1e-6))
    s0 = max(float(s0), 1e-8)
    res = optimize.minimize(
        _gpd_nll,
        x0=np.array([s0, c0]),
        args=(excesses,),
        method="Nelder-Mead",
        bounds=[(1e-10, None), shape_bounds],
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000},
    )
    if not np.isfinite(res.fun):
        raise RuntimeError("GPD likelihood optimization failed")
    sigma, gamma = res.x

    # observed information via a central-difference Hessian
    h = np.array([1e-5 * max(1.0, abs(sigma)), 1e-6])
    hess = np.empty((2, 2))
    for a in range(2):
        for b in range(2):
            pp = res.x.copy(); pp[a] += h[a]; pp[b] += h[b]
            pm = res.x.copy(); pm[a] += h[a]; pm[b] -= h[b]
            mp = res.x.copy(); mp[a] -= h[a]; mp[b] += h[b]
            mm = res.x.copy(); mm[a] -= h[a]; mm[b] -= h[b]
            hess[a, b] = (
                _gpd_nll(pp, excesses)
                - _gpd_nll(pm, excesses)
                - _gpd_nll(mp, excesses)
                + _gpd_nll(mm, excesses)
            ) / (4 * h[a] * h[b])
    try:
        cov = np.linalg.inv(hess)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.array([np.nan, np.nan])

    return GpdFit(
        threshold=u,
        scale=float(sigma),
        shape=float(gamma),
        se_scale=float(se[0]),
        se_shape=float(se[1]),
        n_exceed=int(excesses.size),
    )


def gpd_survival(x: float, fit: GpdFit) -> float:
    """GPD survival probability at x >= threshold; 1 at the threshold."""
    if x < fit.threshold:
        raise ValueError(f"x={x} below threshold {fit.threshold}")
    z = (x - fit.threshold) / fit.scale
    if abs(fit.shape) < 1e-9:
        return float(np.exp(-z))
    arg = 1.0 + fit.shape * z
    if arg <= 0:
        return 0.0
    return float(arg ** (-1.0 / fit.shape))
