"""Limit-distribution machinery for estimators on the parameter boundary.

Contains the asymptotic covariance of the rank-based estimator on a grid,
the quadratic-form projection onto the local cone, and simulation from the
limiting distribution of the test statistics. The covariance follows the
limit process of the empirical tail dependence function: the centered
Gaussian field W with Cov(W(x), W(y)) = l(x) + l(y) - l(x v y), corrected
by the marginal terms l_j(x) W(x_j e_j). Its validity is pinned against a
Monte Carlo oracle in the acceptance suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy import stats

from . import kernels
from .empirical import EvalGrid
from .models import Cone, ModelSpec, full_loading_matrix, build_Ldot, stdf_batch, x_partials

__all__ = [
    "LimitSpec",
    "ConeProjection",
    "LimitSamples",
    "compute_sigma",
    "limit_ingredients",
    "project_cone",
    "project_cone_batch",
    "sample_limit",
    "save_limit_samples",
]

MAX_ENUM_C = 12


@dataclass(frozen=True, eq=False)
class LimitSpec:
    """Ingredients of the limiting law at a parameter value."""

    J: np.ndarray
    Sigma: np.ndarray
    calJ: np.ndarray
    Ldot: np.ndarray
    Omega: np.ndarray
    cone: Cone
    H: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "J": self.J.tolist(),
                "Sigma": self.Sigma.tolist(),
                "calJ": self.calJ.tolist(),
                "Ldot": self.Ldot.tolist(),
                "Omega": self.Omega.tolist(),
                "H": self.H.tolist(),
                "cone": {"p": self.cone.p, "tested": list(self.cone.tested),
                         "tags": list(self.cone.tags)},
            }
        )


@dataclass(frozen=True, eq=False)
class ConeProjection:
    """Minimizer of the metric quadratic over the cone, with its active set."""

    lam: np.ndarray
    active: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class LimitSamples:
    """Draws of the cone-projected limit and the associated statistic."""

    lambda_beta: np.ndarray
    statistic: np.ndarray
    lambda_full: np.ndarray | None = None


# ---------------------------------------------------------------------------
# asymptotic covariance of the grid estimator
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _sobol_normals(dim: int, n_points: int, seed: int) -> np.ndarray:
    sob = stats.qmc.Sobol(d=dim, scramble=True, seed=seed)
    u = sob.random(n_points)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return stats.norm.ppf(u)


def _br_extremal_qmc(locs, rho, alpha, x, n_points=2**14, seed=17) -> float:
    """Spectral Monte Carlo value of the Brown-Resnick stdf.

    Used only for covariance assembly at points with three or more
    positive coordinates, where the exact pairwise form does not apply.
    Quasi-random draws keep the value deterministic for a fixed seed.
    """
    m = locs.shape[0]
    center = locs.mean(axis=0)
    g = (np.linalg.norm(locs - center, axis=1) / rho) ** alpha
    diff = locs[:, None, :] - locs[None, :, :]
    gam = (np.sqrt((diff**2).sum(axis=2)) / rho) ** alpha
    cov = g[:, None] + g[None, :] - gam
    cov = cov + 1e-12 * np.eye(m)
    L = np.linalg.cholesky(cov)
    z = _sobol_normals(m, n_points, seed)
    W = z @ L.T
    vals = np.max(x[None, :] * np.exp(W - g[None, :]), axis=1)
    return float(vals.mean())


def _stdf_values_any(model: ModelSpec, theta, pts: np.ndarray, br_qmc_points: int) -> np.ndarray:
    """Model stdf at arbitrary points, QMC-backed for wide Brown-Resnick points."""
    if model.family != "brown_resnick":
        return stdf_batch(model, theta, pts)
    out = np.empty(pts.shape[0])
    nz = pts > 0
    cnt = nz.sum(axis=1)
    narrow = cnt <= 2
    if np.any(narrow):
        out[narrow] = stdf_batch(model, theta, pts[narrow])
    wide = np.nonzero(~narrow)[0]
    rho, alpha = float(theta[0]), float(theta[1])
    for i in wide:
        sel = nz[i]
        out[i] = _br_extremal_qmc(
            model.locations[sel], rho, alpha, pts[i, sel], n_points=br_qmc_points
        )
    return out


def _union_matrix_any(model: ModelSpec, theta, pts: np.ndarray, br_qmc_points: int) -> np.ndarray:
    if model.family in ("max_linear", "marshall_olkin"):
        B = full_loading_matrix(model, theta)
        return kernels.maxlinear_union_matrix(pts, B)
    P = pts.shape[0]
    iu, ju = np.triu_indices(P)
    unions = np.maximum(pts[iu], pts[ju])
    uniq, inv = np.unique(unions, axis=0, return_inverse=True)
    vals = _stdf_values_any(model, theta, uniq, br_qmc_points)[inv]
    K = np.empty((P, P))
    K[iu, ju] = vals
    K[ju, iu] = vals
    return K


def compute_sigma(model: ModelSpec, theta, grid: EvalGrid, br_qmc_points: int = 2**14) -> np.ndarray:
    """Asymptotic covariance of sqrt(k) times the estimation error on the grid.

    Expands Cov(Z(c_m), Z(c_m')) for Z(x) = W(x) - sum_j l_j(x) W(x_j e_j)
    by bilinearity into stdf evaluations at grid points, their axis
    projections and componentwise maxima thereof. Rows at unit vectors come
    out identically zero. The result is symmetrized; it is positive
    semidefinite up to roundoff.
    """
    theta = np.asarray(theta, dtype=np.float64)
    X = grid.points
    q, d = X.shape
    partials = x_partials(model, theta, X)
    # augmented point list: the grid point plus one axis point per coordinate
    aug = np.zeros((q * (d + 1), d))
    coef = np.zeros((q, d + 1))
    aug[:q] = X
    coef[:, 0] = 1.0
    for j in range(d):
        block = slice(q * (j + 1), q * (j + 2))
        aug[block, j] = X[:, j]
        coef[:, j + 1] = np.where(X[:, j] > 0, -partials[:, j], 0.0)
    uniq, inv = np.unique(np.round(aug, 15), axis=0, return_inverse=True)
    idx = inv.reshape(d + 1, q).T.copy()
    ell = _stdf_values_any(model, theta, uniq, br_qmc_points)
    K = _union_matrix_any(model, theta, uniq, br_qmc_points)
    sigma = kernels.sigma_assemble(K, ell, coef, idx)
    return (sigma + sigma.T) / 2.0


def limit_ingredients(
    model: ModelSpec,
    theta,
    grid: EvalGrid,
    Omega: np.ndarray | None,
    cone: Cone,
    br_qmc_points: int = 2**14,
) -> LimitSpec:
    """Assemble J, Sigma, calJ and the selection matrix for the tested set."""
    theta = np.asarray(theta, dtype=np.float64)
    q = grid.q
    Omega = np.eye(q) if Omega is None else np.asarray(Omega, dtype=np.float64)
    ldot = build_Ldot(model, theta, grid, check_rank=False)
    sv = np.linalg.svd(ldot, compute_uv=False)
    if sv.size == 0 or sv[-1] < 1e-12:
        raise ValueError(
            f"gradient matrix is rank deficient (smallest singular value "
            f"{0.0 if sv.size == 0 else sv[-1]:.2e})"
        )
    OL = Omega @ ldot
    J = ldot.T @ OL
    sigma = compute_sigma(model, theta, grid, br_qmc_points=br_qmc_points)
    calJ = OL.T @ sigma @ OL
    H = np.zeros((cone.c, cone.p))
    for row, i in enumerate(cone.tested):
        H[row, i] = 1.0
    return LimitSpec(J=J, Sigma=sigma, calJ=calJ, Ldot=ldot, Omega=Omega, cone=cone, H=H)


# ---------------------------------------------------------------------------
# projection onto the local cone in a given metric
# ---------------------------------------------------------------------------

def _signs(tags) -> np.ndarray:
    s = np.ones(len(tags))
    for i, t in enumerate(tags):
        if t == "nonpos":
            s[i] = -1.0
    return s


def _face_solvers(metric: np.ndarray, tags):
    """Precompute the equality-constrained minimizers for every active set.

    Works in the sign-flipped frame where all constrained coordinates are
    nonnegative. Returns a list of (face_mask, free_idx, solver) where
    ``solver @ y`` gives the face minimizer on the free coordinates.
    """
    c = metric.shape[0]
    constrained = [i for i, t in enumerate(tags) if t != "free"]
    if len(constrained) > MAX_ENUM_C:
        raise ValueError(
            f"active-set enumeration supports at most {MAX_ENUM_C} constrained "
            f"coordinates, got {len(constrained)}"
        )
    faces = []
    for size in range(len(constrained) + 1):
        for F in combinations(constrained, size):
            mask = np.zeros(c, dtype=bool)
            mask[list(F)] = True
            free = np.nonzero(~mask)[0]
            if free.size:
                solver = np.linalg.solve(metric[np.ix_(free, free)], metric[free, :])
            else:
                solver = np.zeros((0, c))
            faces.append((mask, free, solver))
    return constrained, faces


def project_cone_batch(Y: np.ndarray, metric: np.ndarray, tags) -> np.ndarray:
    """Cone projections of many points in the quadratic metric.

    Minimizes (lam - y)' metric (lam - y) over the product cone described
    by ``tags``. The single-constraint case reduces to a clip; the general
    case enumerates active sets (the closed-form case analysis for one or
    two constraints arises as the enumeration instances).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    metric = np.asarray(metric, dtype=np.float64)
    c = len(tags)
    if Y.shape[1] != c or metric.shape != (c, c):
        raise ValueError("dimension mismatch between points, metric and tags")
    ev = np.linalg.eigvalsh((metric + metric.T) / 2.0)
    if ev[0] <= 0:
        raise ValueError("metric must be positive definite")
    s = _signs(tags)
    Yf = Y * s
    constrained = [i for i, t in enumerate(tags) if t != "free"]
    if not constrained:
        return Y.copy()
    if len(constrained) == c == 1:
        lam = np.maximum(Yf, 0.0)
        return lam * s
    Mf = metric * np.outer(s, s)
    _, faces = _face_solvers(Mf, tags)
    n = Y.shape[0]
    best_obj = np.full(n, np.inf)
    best = np.zeros_like(Yf)
    for mask, free, solver in faces:
        lam = np.zeros_like(Yf)
        if free.size:
            lam[:, free] = Yf @ solver.T
        feas = np.ones(n, dtype=bool)
        for i in constrained:
            if not mask[i]:
                feas &= lam[:, i] >= -1e-12
        diff = lam - Yf
        obj = np.einsum("nc,cd,nd->n", diff, Mf, diff)
        better = feas & (obj < best_obj)
        best[better] = lam[better]
        best_obj[better] = obj[better]
    return best * s


def project_cone(y, metric, cone_tags) -> ConeProjection:
    """Projection of a single point onto the cone, with its active set."""
    y = np.asarray(y, dtype=np.float64)
    lam = project_cone_batch(y[None, :], np.asarray(metric, dtype=np.float64), cone_tags)[0]
    active = tuple(
        i for i, t in enumerate(cone_tags) if t != "free" and abs(lam[i]) <= 1e-12
    )
    return ConeProjection(lam=lam, active=active)


# ---------------------------------------------------------------------------
# sampling from the limiting law
# ---------------------------------------------------------------------------

def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def sample_limit(
    spec: LimitSpec,
    n_draws: int,
    seed: int,
    want_full: bool = False,
    chunk: int = 1 << 20,
) -> LimitSamples:
    """Simulate the cone-projected limit and its quadratic statistic.

    Each draw realizes the Gaussian score G with covariance calJ (the
    image of the q-dimensional estimator noise), maps it through
    Y = J^-1 G, projects the tested block onto the cone in the
    (H J^-1 H')^-1 metric and records lam' (H J^-1 H')^-1 lam. Gaussian
    sampling uses the symmetric PSD square root with negative eigenvalues
    clipped at zero. Draws are generated in fixed-size chunks with
    per-chunk seeds, so the output is independent of any partitioning.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    p = spec.J.shape[0]
    cone = spec.cone
    root = _psd_sqrt(spec.calJ)
    Jinv = np.linalg.inv(spec.J)
    V = spec.H @ Jinv @ spec.H.T
    metric = np.linalg.inv((V + V.T) / 2.0)
    tested = list(cone.tested)
    rest = [i for i in range(p) if i not in tested]

    lam_parts, stat_parts, full_parts = [], [], []
    n_chunks = (n_draws + chunk - 1) // chunk
    for ci in range(n_chunks):
        m = min(chunk, n_draws - ci * chunk)
        rng = np.random.default_rng(seed + ci)
        G = rng.standard_normal((m, p)) @ root.T
        Y = G @ Jinv.T
        Yb = Y[:, tested]
        lam = project_cone_batch(Yb, metric, cone.tags)
        stat = np.einsum("nc,cd,nd->n", lam, metric, lam)
        lam_parts.append(lam)
        stat_parts.append(stat)
        if want_full:
            full = np.empty((m, p))
            full[:, tested] = lam
            if rest:
                Jd = spec.J[np.ix_(rest, rest)]
                Jdb = spec.J[np.ix_(rest, tested)]
                Gd = G[:, rest]
                full[:, rest] = np.linalg.solve(Jd, (Gd - lam @ Jdb.T).T).T
            full_parts.append(full)
    return LimitSamples(
        lambda_beta=np.concatenate(lam_parts),
        statistic=np.concatenate(stat_parts),
        lambda_full=np.concatenate(full_parts) if want_full else None,
    )


def save_limit_samples(samples: LimitSamples, path, fmt: str = "csv") -> None:
    """Write the statistic draws to disk as a CSV column or a .npy array."""
    if fmt == "csv":
        with open(path, "w") as fh:
            fh.write("statistic\n")
            for v in samples.statistic:
                fh.write(f"{v!r}\n")
    elif fmt == "npy":
        np.save(path, samples.statistic)
    else:
        raise ValueError(f"unknown format {fmt!r}")
