"""Hot numeric kernels: numba-compiled with a pure-numpy fallback.

The backend is chosen once at import time from the environment variable
``TAILBOUND_BACKEND``:

* ``auto`` (default): use numba when it imports, numpy otherwise;
* ``numba``: require numba, raise if unavailable;
* ``numpy``: force the pure-numpy path.

Both paths compute the same quantities; ``tests/test_kernels.py`` pins them
against each other and ``benchmarks/bench_kernels.py`` times them.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "USE_NUMBA",
    "empirical_stdf_grid",
    "beta_mixture_grid",
    "maxlinear_stdf_grid",
    "maxlinear_union_matrix",
    "sigma_assemble",
    "maxlinear_objective",
]

_requested = os.environ.get("TAILBOUND_BACKEND", "auto").strip().lower()
if _requested not in {"auto", "numba", "numpy"}:
    raise RuntimeError(
        f"TAILBOUND_BACKEND must be one of auto/numba/numpy, got {_requested!r}"
    )

USE_NUMBA = _requested != "numpy"
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:
        if _requested == "numba":
            raise
        USE_NUMBA = False

if not USE_NUMBA:  # identity decorator so the same source serves both paths
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


# ---------------------------------------------------------------------------
# empirical tail dependence function on a grid of evaluation points
# ---------------------------------------------------------------------------

@njit(cache=True)
def _empirical_stdf_grid_loops(ranks, thresholds, k):
    n, d = ranks.shape
    q = thresholds.shape[0]
    out = np.zeros(q)
    # rows whose ranks are all below every threshold can never fire
    tmin = np.empty(d)
    for j in range(d):
        tj = thresholds[0, j]
        for m in range(1, q):
            if thresholds[m, j] < tj:
                tj = thresholds[m, j]
        tmin[j] = tj
    for i in range(n):
        active = False
        for j in range(d):
            if ranks[i, j] > tmin[j]:
                active = True
                break
        if not active:
            continue
        for m in range(q):
            for j in range(d):
                if ranks[i, j] > thresholds[m, j]:
                    out[m] += 1.0
                    break
    return out / k


def _empirical_stdf_grid_numpy(ranks, thresholds, k):
    n, d = ranks.shape
    tmin = thresholds.min(axis=0)
    rows = ranks[(ranks > tmin).any(axis=1)]
    if rows.size == 0:
        return np.zeros(thresholds.shape[0])
    hit = (rows[None, :, :] > thresholds[:, None, :]).any(axis=2)
    return hit.sum(axis=1) / k


def empirical_stdf_grid(ranks: np.ndarray, k: float, points: np.ndarray) -> np.ndarray:
    """Rank-count estimator values at each grid point.

    ``ranks`` is the (n, d) integer matrix of maximal ranks, ``points`` the
    (q, d) evaluation points. A row counts for point m when any coordinate
    rank exceeds n + 1/2 - k * x_j.
    """
    ranks = np.ascontiguousarray(ranks, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = ranks.shape[0]
    thresholds = n + 0.5 - k * points
    if USE_NUMBA:
        return _empirical_stdf_grid_loops(ranks, thresholds, float(k))
    return _empirical_stdf_grid_numpy(ranks, thresholds, float(k))


# ---------------------------------------------------------------------------
# beta (smoothed) tail dependence function on a grid
# ---------------------------------------------------------------------------

@njit(cache=True)
def _beta_mixture_grid_loops(rank_idx, table, uidx, cut):
    # table[a, r-1] = Beta(r, n+1-r) cdf at the a-th distinct argument value,
    # nonincreasing in r. cut[a] = number of leading r's whose cdf is 1 to
    # machine precision, so rows with all ranks below the per-column cut
    # contribute a product of exactly-one factors.
    n, d = rank_idx.shape
    q = uidx.shape[0]
    out = np.empty(q)
    colcut = np.empty((q, d), dtype=np.int64)
    gcut = np.empty(d, dtype=np.int64)
    for j in range(d):
        g = n
        for m in range(q):
            c = cut[uidx[m, j]]
            colcut[m, j] = c
            if c < g:
                g = c
        gcut[j] = g
    for m in range(q):
        out[m] = 0.0
    n_quiet = 0
    for i in range(n):
        active = False
        for j in range(d):
            if rank_idx[i, j] >= gcut[j]:
                active = True
                break
        if not active:
            n_quiet += 1
            continue
        for m in range(q):
            prod = 1.0
            for j in range(d):
                prod *= table[uidx[m, j], rank_idx[i, j]]
            out[m] += prod
    for m in range(q):
        out[m] += n_quiet
    return out / n


def _beta_mixture_grid_numpy(rank_idx, table, uidx, cut):
    n, d = rank_idx.shape
    q = uidx.shape[0]
    gcut = cut[uidx].min(axis=0)
    active = (rank_idx >= gcut[None, :]).any(axis=1)
    rows = rank_idx[active]
    n_quiet = n - rows.shape[0]
    out = np.full(q, float(n_quiet))
    if rows.shape[0]:
        # (q, n_active, d) lookup, chunked over grid points to bound memory
        step = max(1, int(2e7) // max(1, rows.shape[0] * d))
        for lo in range(0, q, step):
            hi = min(q, lo + step)
            vals = table[uidx[lo:hi, None, :], rows[None, :, :]]
            out[lo:hi] += vals.prod(axis=2).sum(axis=1)
    return out / n


def beta_mixture_grid(rank_idx, table, uidx, cut):
    """Empirical beta copula values C(u_m) for each grid point m.

    ``rank_idx`` holds 0-based ranks, ``uidx[m, j]`` indexes the distinct
    argument value used for coordinate j of point m, ``table`` the per-rank
    Beta cdf values at those arguments and ``cut`` the per-argument count of
    ranks whose cdf equals 1 to machine precision.
    """
    rank_idx = np.ascontiguousarray(rank_idx, dtype=np.int64)
    table = np.ascontiguousarray(table, dtype=np.float64)
    uidx = np.ascontiguousarray(uidx, dtype=np.int64)
    cut = np.ascontiguousarray(cut, dtype=np.int64)
    if USE_NUMBA:
        return _beta_mixture_grid_loops(rank_idx, table, uidx, cut)
    return _beta_mixture_grid_numpy(rank_idx, table, uidx, cut)


# ---------------------------------------------------------------------------
# max-linear stable tail dependence function
# ---------------------------------------------------------------------------

@njit(cache=True)
def _maxlinear_stdf_grid_loops(B, pts):
    d, r = B.shape
    q = pts.shape[0]
    out = np.empty(q)
    for m in range(q):
        tot = 0.0
        for t in range(r):
            best = 0.0
            for j in range(d):
                v = B[j, t] * pts[m, j]
                if v > best:
                    best = v
            tot += best
        out[m] = tot
    return out


def _maxlinear_stdf_grid_numpy(B, pts):
    # (q, d, r) products, max over d, sum over r
    return np.einsum("qr->q", np.max(pts[:, :, None] * B[None, :, :], axis=1))


def maxlinear_stdf_grid(B: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Factor-wise maxima summed: sum_t max_j B[j, t] x_j for each point."""
    B = np.ascontiguousarray(B, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if USE_NUMBA:
        return _maxlinear_stdf_grid_loops(B, points)
    return _maxlinear_stdf_grid_numpy(B, points)


@njit(cache=True)
def _maxlinear_union_matrix_loops(pts, B):
    P, d = pts.shape
    r = B.shape[1]
    out = np.empty((P, P))
    for a in range(P):
        for b in range(a, P):
            tot = 0.0
            for t in range(r):
                best = 0.0
                for j in range(d):
                    x = pts[a, j]
                    y = pts[b, j]
                    z = x if x > y else y
                    v = B[j, t] * z
                    if v > best:
                        best = v
                tot += best
            out[a, b] = tot
            out[b, a] = tot
    return out


def _maxlinear_union_matrix_numpy(pts, B):
    P = pts.shape[0]
    out = np.empty((P, P))
    for a in range(P):
        z = np.maximum(pts[a], pts)  # (P, d)
        out[a] = np.max(z[:, :, None] * B[None, :, :], axis=1).sum(axis=1)
    return out


def maxlinear_union_matrix(points: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Matrix of stdf values at componentwise maxima of point pairs."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if USE_NUMBA:
        return _maxlinear_union_matrix_loops(points, B)
    return _maxlinear_union_matrix_numpy(points, B)


# ---------------------------------------------------------------------------
# covariance assembly for the limiting Gaussian of the estimator
# ---------------------------------------------------------------------------

@njit(cache=True)
def _sigma_assemble_loops(K, ell, coef, idx):
    q, m = coef.shape
    out = np.empty((q, q))
    s0 = np.zeros(q)
    s1 = np.zeros(q)
    for a in range(q):
        for u in range(m):
            c = coef[a, u]
            s0[a] += c
            s1[a] += c * ell[idx[a, u]]
    for a in range(q):
        for b in range(a, q):
            acc = 0.0
            for u in range(m):
                ca = coef[a, u]
                if ca == 0.0:
                    continue
                ia = idx[a, u]
                for v in range(m):
                    cb = coef[b, v]
                    if cb != 0.0:
                        acc += ca * cb * K[ia, idx[b, v]]
            val = s1[a] * s0[b] + s0[a] * s1[b] - acc
            out[a, b] = val
            out[b, a] = val
    return out


def _sigma_assemble_numpy(K, ell, coef, idx):
    q, m = coef.shape
    s0 = coef.sum(axis=1)
    s1 = (coef * ell[idx]).sum(axis=1)
    P = K.shape[0]
    C = np.zeros((q, P))
    for u in range(m):
        np.add.at(C, (np.arange(q), idx[:, u]), coef[:, u])
    quad = C @ K @ C.T
    return np.outer(s1, s0) + np.outer(s0, s1) - quad


def sigma_assemble(K, ell, coef, idx):
    """Contract Cov(W(a), W(b)) = ell_a + ell_b - K_ab through the sparse
    row combinations (coef, idx) defining the centered limit process."""
    K = np.ascontiguousarray(K, dtype=np.float64)
    ell = np.ascontiguousarray(ell, dtype=np.float64)
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if USE_NUMBA:
        return _sigma_assemble_loops(K, ell, coef, idx)
    return _sigma_assemble_numpy(K, ell, coef, idx)


# ---------------------------------------------------------------------------
# weighted least squares objective, identity weight fast path
# ---------------------------------------------------------------------------

@njit(cache=True)
def _maxlinear_objective_loops(B, pts, lhat):
    d, r = B.shape
    q = pts.shape[0]
    f = 0.0
    for m in range(q):
        tot = 0.0
        for t in range(r):
            best = 0.0
            for j in range(d):
                v = B[j, t] * pts[m, j]
                if v > best:
                    best = v
            tot += best
        diff = lhat[m] - tot
        f += diff * diff
    return f


def maxlinear_objective(B: np.ndarray, points: np.ndarray, lhat: np.ndarray) -> float:
    """Sum of squared residuals between lhat and the max-linear stdf values."""
    B = np.ascontiguousarray(B, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    lhat = np.ascontiguousarray(lhat, dtype=np.float64)
    if USE_NUMBA:
        return _maxlinear_objective_loops(B, points, lhat)
    diff = lhat - _maxlinear_stdf_grid_numpy(B, points)
    return float(diff @ diff)


def warmup() -> None:
    """Trigger jit compilation of every kernel (cheap no-op on numpy path)."""
    ranks = np.array([[1, 2], [2, 1]], dtype=np.int64)
    pts = np.array([[1.0, 1.0]])
    empirical_stdf_grid(ranks, 1.0, pts)
    table = np.ones((1, 2))
    beta_mixture_grid(ranks - 1, table, np.zeros((1, 2), dtype=np.int64),
                      np.array([2], dtype=np.int64))
    B = np.array([[0.5, 0.5], [0.5, 0.5]])
    maxlinear_stdf_grid(B, pts)
    maxlinear_union_matrix(pts, B)
    sigma_assemble(np.ones((1, 1)), np.ones(1), np.ones((1, 1)),
                   np.zeros((1, 1), dtype=np.int64))
    maxlinear_objective(B, pts, np.ones(1))
