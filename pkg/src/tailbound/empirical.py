"""Nonparametric estimators of the stable tail dependence function.

Two rank-based estimators are provided: the empirical tail dependence
function (an indicator count over the top-k ranks) and its smooth variant
built from the empirical beta copula. Both are pure functions of the rank
matrix, hence invariant under strictly increasing marginal transformations
and under permutation of the data rows.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import kernels
from .dataio import RankMatrix

__all__ = [
    "EvalGrid",
    "StdfEstimate",
    "ChiEstimate",
    "empirical_stdf",
    "beta_stdf",
    "estimate_on_grid",
    "chi_hat",
    "chi_bootstrap_band",
]

ESTIMATOR_KINDS = ("empirical", "beta")


@dataclass(frozen=True, eq=False)
class EvalGrid:
    """The q points in [0, inf)^d at which tail dependence is matched."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a nonempty (q, d) array")
        if np.any(pts < 0) or not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite and nonnegative")
        if not np.all(pts.max(axis=1) > 0):
            raise ValueError("every grid point needs a positive coordinate")
        if len(np.unique(pts, axis=0)) != pts.shape[0]:
            raise ValueError("grid points must be distinct")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def q(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class StdfEstimate:
    """Estimator values on a grid together with the tuning parameter k."""

    values: np.ndarray
    k: int
    estimator_kind: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if np.any(vals < 0):
            raise ValueError("stdf estimates are nonnegative")
        if self.estimator_kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")
        if self.k < 1:
            raise ValueError("k must be a positive integer")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    def to_csv(self, grid: EvalGrid) -> str:
        buf = io.StringIO()
        d = grid.d
        buf.write(",".join(f"c_{j + 1}" for j in range(d)) + ",value\n")
        for point, val in zip(grid.points, self.values):
            buf.write(",".join(repr(float(c)) for c in point) + f",{val!r}\n")
        return buf.getvalue()


def _check_k(ranks: RankMatrix, k: int) -> None:
    if not 1 <= k <= ranks.n:
        raise ValueError(f"k must lie in 1..n={ranks.n}, got {k}")


def _as_points(x, d: int) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if pts.shape[1] != d:
        raise ValueError(f"points have {pts.shape[1]} coordinates, data has {d}")
    if np.any(pts < 0) or not np.all(np.isfinite(pts)):
        raise ValueError("evaluation points must be finite and nonnegative")
    return pts


def empirical_stdf(ranks: RankMatrix, k: int, x) -> float:
    """Empirical tail dependence at a single point.

    Counts the rows whose rank exceeds n + 1/2 - k x_j in some coordinate,
    scaled by 1/k.
    """
    _check_k(ranks, k)
    pts = _as_points(x, ranks.d)
    return float(kernels.empirical_stdf_grid(ranks.ranks, float(k), pts)[0])


def _beta_tables(n: int, k: int, pts: np.ndarray):
    """Distinct beta-copula arguments with per-rank cdf rows.

    Returns (uidx, table, cut): uidx maps (point, coordinate) to a distinct
    argument value u = 1 - k x / n, table[a, r-1] holds the Beta(r, n+1-r)
    cdf at u_a, and cut[a] counts the leading ranks whose cdf is exactly 1.
    """
    u = 1.0 - k * pts / n
    if np.any(u < -1e-12):
        raise ValueError("beta estimator needs k * x_j / n <= 1 for all j")
    u = np.clip(u, 0.0, 1.0)
    uniq, inv = np.unique(np.round(u, 15), return_inverse=True)
    uidx = inv.reshape(u.shape)
    r = np.arange(1, n + 1, dtype=np.float64)
    table = special.betainc(r[None, :], n + 1.0 - r[None, :], uniq[:, None])
    # cdf rows are nonincreasing in r; count the exact-one prefix
    cut = np.empty(len(uniq), dtype=np.int64)
    for a in range(len(uniq)):
        row = table[a]
        nz = np.nonzero(row < 1.0)[0]
        cut[a] = n if nz.size == 0 else int(nz[0])
    return uidx, table, cut


def beta_stdf(ranks: RankMatrix, k: int, x) -> float:
    """Beta (smoothed) tail dependence at a single point.

    Evaluates (n/k) (1 - C(1 - k x / n)) where C is the empirical beta
    copula: an average over rows of products of Beta(r, n+1-r) cdfs.
    """
    _check_k(ranks, k)
    pts = _as_points(x, ranks.d)
    uidx, table, cut = _beta_tables(ranks.n, k, pts)
    copula = kernels.beta_mixture_grid(ranks.ranks - 1, table, uidx, cut)
    return float(ranks.n / k * (1.0 - copula[0]))


def estimate_on_grid(ranks: RankMatrix, k: int, grid: EvalGrid, kind: str) -> StdfEstimate:
    """Apply the chosen estimator to every grid point, in grid order."""
    _check_k(ranks, k)
    if grid.d != ranks.d:
        raise ValueError(f"grid dimension {grid.d} does not match data {ranks.d}")
    if kind == "empirical":
        vals = kernels.empirical_stdf_grid(ranks.ranks, float(k), grid.points)
    elif kind == "beta":
        uidx, table, cut = _beta_tables(ranks.n, k, grid.points)
        copula = kernels.beta_mixture_grid(ranks.ranks - 1, table, uidx, cut)
        vals = ranks.n / k * (1.0 - copula)
        vals = np.clip(vals, 0.0, None)
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return StdfEstimate(values=vals, k=k, estimator_kind=kind)


@dataclass(frozen=True)
class ChiEstimate:
    """Tail dependence coefficient 2 - stdf(1, 1), clamped for reporting."""

    value: float
    raw: float
    k: int
    estimator_kind: str


def chi_hat(ranks: RankMatrix, k: int, kind: str = "empirical") -> ChiEstimate:
    """Bivariate tail dependence coefficient at tuning parameter k."""
    if ranks.d != 2:
        raise ValueError("chi is defined for bivariate data only")
    point = np.array([1.0, 1.0])
    if kind == "empirical":
        raw = 2.0 - empirical_stdf(ranks, k, point)
    elif kind == "beta":
        raw = 2.0 - beta_stdf(ranks, k, point)
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    return ChiEstimate(
        value=float(np.clip(raw, 0.0, 1.0)), raw=float(raw), k=k, estimator_kind=kind
    )


def chi_bootstrap_band(
    data_values: np.ndarray,
    k_values,
    kind: str = "empirical",
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
):
    """Pointwise percentile bootstrap band for the chi path over k.

    Resamples rows of the raw data (pairs bootstrap), re-ranks, and
    recomputes chi for every k. Returns (lower, upper) arrays aligned
    with ``k_values``.
    """
    from .dataio import DataMatrix, ranks as rank_op

    x = np.asarray(data_values, dtype=np.float64)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    k_values = list(k_values)
    boot = np.empty((n_boot, len(k_values)))
    for b in range(n_boot):
        sample = x[rng.integers(0, n, size=n)]
        rm = rank_op(DataMatrix(values=sample, labels=("a", "b")))
        for i, k in enumerate(k_values):
            boot[b, i] = chi_hat(rm, int(k), kind).value
    alpha = (1.0 - level) / 2.0
    return np.quantile(boot, alpha, axis=0), np.quantile(boot, 1.0 - alpha, axis=0)
