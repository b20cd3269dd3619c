"""Parametric stable tail dependence families and their derivatives.

Four families are supported:

* ``logistic``: symmetric dependence with a single parameter in (0, 1];
* ``brown_resnick``: spatial model on planar locations with semivariogram
  (|s| / rho)^alpha, evaluated through the pairwise closed form (points
  with three or more positive coordinates are rejected);
* ``max_linear``: factor loadings B with rows summing to one; the free
  parameter vector stacks the first r-1 columns of B column by column and
  the last column is the remainder;
* ``marshall_olkin``: shock model on a list of component subsets,
  parameterized by the subset probabilities and evaluated through its
  induced max-linear loading matrix.

Derivatives on the boundary of the parameter space are one-sided, taken
into the feasible side (right at a lower bound, left at an upper bound).
At max-linear tie points the right-derivative convention applies: a factor
counts every coordinate achieving its maximum.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import kernels
from .empirical import EvalGrid

__all__ = [
    "ModelSpec",
    "ParamSpace",
    "Cone",
    "FAMILIES",
    "logistic_model",
    "brown_resnick_model",
    "max_linear_model",
    "marshall_olkin_model",
    "param_space",
    "full_loading_matrix",
    "stdf",
    "stdf_batch",
    "x_partials",
    "stdf_gradient",
    "build_L",
    "build_Ldot",
    "local_cone",
    "canonicalize_maxlinear",
    "model_to_json",
    "model_from_json",
]

FAMILIES = ("logistic", "brown_resnick", "max_linear", "marshall_olkin")

_BOUND_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ParamSpace:
    """Box bounds plus optional group-sum caps (max-linear row constraints)."""

    lower: np.ndarray
    upper: np.ndarray
    caps: tuple[tuple[tuple[int, ...], float], ...] = ()

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("lower bounds exceed upper bounds")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def p(self) -> int:
        return self.lower.size

    def contains(self, theta: np.ndarray, tol: float = _BOUND_TOL) -> bool:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.p,):
            return False
        if np.any(theta < self.lower - tol) or np.any(theta > self.upper + tol):
            return False
        for idx, cap in self.caps:
            if sum(theta[i] for i in idx) > cap + tol:
                return False
        return True

    def project(self, theta: np.ndarray, frozen: np.ndarray | None = None) -> np.ndarray:
        """Clip to the box, then rescale cap groups that overflow.

        ``frozen`` marks coordinates that must not move (restricted fits);
        only the remaining members of an overflowing group are scaled down.
        """
        out = np.clip(np.asarray(theta, dtype=np.float64), self.lower, self.upper)
        for idx, cap in self.caps:
            idx = np.asarray(idx)
            if frozen is None:
                group = out[idx]
                s = group.sum()
                if s > cap and s > 0:
                    out[idx] = group * (cap / s)
            else:
                free = idx[~frozen[idx]]
                pinned = idx[frozen[idx]]
                budget = cap - out[pinned].sum()
                s = out[free].sum()
                if s > budget:
                    out[free] = out[free] * (max(budget, 0.0) / s) if s > 0 else 0.0
        return out

    def at_lower(self, theta, tol: float = 1e-8) -> np.ndarray:
        return np.abs(np.asarray(theta) - self.lower) <= tol

    def at_upper(self, theta, tol: float = 1e-8) -> np.ndarray:
        return np.abs(np.asarray(theta) - self.upper) <= tol


@dataclass(frozen=True)
class Cone:
    """Local cone at the null point: one tag per tested coordinate.

    Tags are ``nonneg`` (parameter at its lower bound), ``nonpos`` (upper
    bound) or ``free`` (interior). The implied cone is the product of the
    tagged half-lines/lines with full lines on the untested coordinates.
    """

    p: int
    tested: tuple[int, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tested) != len(self.tags):
            raise ValueError("one tag per tested coordinate")
        if len(set(self.tested)) != len(self.tested):
            raise ValueError("tested coordinates must be distinct")
        for t in self.tags:
            if t not in ("free", "nonneg", "nonpos"):
                raise ValueError(f"unknown cone tag {t!r}")
        if any(i < 0 or i >= self.p for i in self.tested):
            raise ValueError("tested coordinate out of range")

    @property
    def c(self) -> int:
        return len(self.tested)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A parametric family together with its structural data."""

    family: str
    d: int
    r: int | None = None
    locations: np.ndarray | None = None
    subsets: tuple[tuple[int, ...], ...] | None = None
    rho_box: tuple[float, float] = (1e-3, 100.0)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.d < 2:
            raise ValueError("dimension must be at least 2")
        if self.family == "brown_resnick":
            locs = np.asarray(self.locations, dtype=np.float64)
            if locs.shape != (self.d, 2):
                raise ValueError("brown_resnick needs one planar location per component")
            if len(np.unique(locs, axis=0)) != self.d:
                raise ValueError("locations must be pairwise distinct")
            locs.flags.writeable = False
            object.__setattr__(self, "locations", locs)
        elif self.family == "max_linear":
            if self.r is None or self.r < 1:
                raise ValueError("max_linear needs a factor count r >= 1")
        elif self.family == "marshall_olkin":
            if not self.subsets:
                raise ValueError("marshall_olkin needs a list of shock subsets")
            subsets = tuple(tuple(sorted(set(s))) for s in self.subsets)
            covered = set()
            for s in subsets:
                if not s:
                    raise ValueError("shock subsets must be nonempty")
                if min(s) < 0 or max(s) >= self.d:
                    raise ValueError("subset component out of range")
                covered.update(s)
            if covered != set(range(self.d)):
                raise ValueError("every component needs at least one shock subset")
            object.__setattr__(self, "subsets", subsets)

    @property
    def p(self) -> int:
        if self.family == "logistic":
            return 1
        if self.family == "brown_resnick":
            return 2
        if self.family == "max_linear":
            return self.d * (self.r - 1)
        return len(self.subsets)


def logistic_model(d: int) -> ModelSpec:
    return ModelSpec(family="logistic", d=d)


def brown_resnick_model(locations, rho_box=(1e-3, 100.0)) -> ModelSpec:
    locations = np.asarray(locations, dtype=np.float64)
    return ModelSpec(
        family="brown_resnick", d=locations.shape[0], locations=locations,
        rho_box=tuple(rho_box),
    )


def max_linear_model(d: int, r: int) -> ModelSpec:
    return ModelSpec(family="max_linear", d=d, r=r)


def marshall_olkin_model(d: int, subsets) -> ModelSpec:
    return ModelSpec(family="marshall_olkin", d=d, subsets=tuple(tuple(s) for s in subsets))


def param_space(model: ModelSpec) -> ParamSpace:
    """The closed optimization region for the family's free parameters."""
    if model.family == "logistic":
        return ParamSpace(lower=np.array([1e-6]), upper=np.array([1.0]))
    if model.family == "brown_resnick":
        lo, hi = model.rho_box
        return ParamSpace(lower=np.array([lo, 1e-6]), upper=np.array([hi, 2.0]))
    if model.family == "max_linear":
        p = model.p
        caps = tuple(
            (tuple(t * model.d + j for t in range(model.r - 1)), 1.0)
            for j in range(model.d)
        )
        return ParamSpace(lower=np.zeros(p), upper=np.ones(p), caps=caps)
    # marshall_olkin: subset probabilities with total mass at most one
    p = model.p
    return ParamSpace(
        lower=np.zeros(p), upper=np.ones(p), caps=((tuple(range(p)), 1.0),)
    )


def _check_theta(model: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (model.p,):
        raise ValueError(f"theta must have {model.p} coordinates, got {theta.shape}")
    if not param_space(model).contains(theta):
        raise ValueError("theta outside the closure of the parameter space")
    return theta


def full_loading_matrix(model: ModelSpec, theta) -> np.ndarray:
    """The d x r loading matrix for max-linear style families.

    For ``max_linear`` the last column is one minus the row sums of the
    free block; for ``marshall_olkin`` the entries are p(J_t)/p_j on the
    members of each shock subset.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if model.family == "max_linear":
        free = theta.reshape(model.r - 1, model.d).T if model.r > 1 else np.zeros((model.d, 0))
        B = np.empty((model.d, model.r))
        B[:, : model.r - 1] = free
        B[:, model.r - 1] = np.clip(1.0 - free.sum(axis=1), 0.0, None)
        return B
    if model.family == "marshall_olkin":
        r = len(model.subsets)
        pj = np.zeros(model.d)
        for t, s in enumerate(model.subsets):
            for j in s:
                pj[j] += theta[t]
        if np.any(pj <= 0):
            raise ValueError("every component needs positive total shock probability")
        B = np.zeros((model.d, r))
        for t, s in enumerate(model.subsets):
            for j in s:
                B[j, t] = theta[t] / pj[j]
        return B
    raise ValueError(f"{model.family} has no loading matrix")


def _pairwise_gamma(model: ModelSpec, rho: float, alpha: float) -> np.ndarray:
    diff = model.locations[:, None, :] - model.locations[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    return (dist / rho) ** alpha


def _br_pair_values(xj, xl, a):
    """Pairwise Brown-Resnick stdf for positive coordinate pairs."""
    lr = np.log(xj / xl) / a
    return xj * ndtr(a / 2.0 + lr) + xl * ndtr(a / 2.0 - lr)


def _br_batch(model: ModelSpec, theta, X: np.ndarray) -> np.ndarray:
    rho, alpha = float(theta[0]), float(theta[1])
    nz = X > 0.0
    cnt = nz.sum(axis=1)
    if np.any(cnt > 2):
        raise ValueError(
            "brown_resnick evaluation is pairwise: at most two positive coordinates"
        )
    out = np.zeros(X.shape[0])
    one = cnt == 1
    if np.any(one):
        out[one] = X[one].max(axis=1)
    two = np.nonzero(cnt == 2)[0]
    if two.size:
        pos = np.argsort(~nz[two], axis=1, kind="stable")[:, :2]
        j, l = pos[:, 0], pos[:, 1]
        gam = _pairwise_gamma(model, rho, alpha)
        a = np.sqrt(2.0 * gam[j, l])
        out[two] = _br_pair_values(X[two, j], X[two, l], a)
    return out


def stdf_batch(model: ModelSpec, theta, X) -> np.ndarray:
    """Stable tail dependence function at each row of X (no validation)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    if model.family == "logistic":
        th = float(theta[0])
        S = np.where(X > 0, X, 1.0) ** (1.0 / th) * (X > 0)
        return S.sum(axis=1) ** th
    if model.family == "brown_resnick":
        return _br_batch(model, theta, X)
    B = full_loading_matrix(model, theta)
    return kernels.maxlinear_stdf_grid(B, X)


def stdf(model: ModelSpec, theta, x) -> float:
    """Stable tail dependence function at a single point, with validation."""
    theta = _check_theta(model, theta)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise ValueError(f"x must have {model.d} coordinates")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("x must be finite and nonnegative")
    return float(stdf_batch(model, theta, x[None, :])[0])


def x_partials(model: ModelSpec, theta, X) -> np.ndarray:
    """Partial derivatives of the stdf in its arguments, rowwise.

    Zero coordinates report a zero partial: downstream uses multiply them
    by degenerate terms. Ties in max-linear maxima follow the
    right-derivative convention (every achieving coordinate counts).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    if model.family == "logistic":
        th = float(theta[0])
        pos = X > 0
        Xs = np.where(pos, X, 1.0)
        S = (Xs ** (1.0 / th) * pos).sum(axis=1)
        out = np.where(pos, S[:, None] ** (th - 1.0) * Xs ** (1.0 / th - 1.0), 0.0)
        return out
    if model.family == "brown_resnick":
        rho, alpha = float(theta[0]), float(theta[1])
        nz = X > 0.0
        cnt = nz.sum(axis=1)
        if np.any(cnt > 2):
            raise ValueError("brown_resnick partials are pairwise only")
        out = np.zeros_like(X)
        one = cnt == 1
        out[one] = nz[one].astype(float)
        two = np.nonzero(cnt == 2)[0]
        if two.size:
            pos2 = np.argsort(~nz[two], axis=1, kind="stable")[:, :2]
            j, l = pos2[:, 0], pos2[:, 1]
            gam = _pairwise_gamma(model, rho, alpha)
            a = np.sqrt(2.0 * gam[j, l])
            lr = np.log(X[two, j] / X[two, l]) / a
            out[two, j] = ndtr(a / 2.0 + lr)
            out[two, l] = ndtr(a / 2.0 - lr)
        return out
    B = full_loading_matrix(model, theta)
    vals = X[:, :, None] * B[None, :, :]  # (q, d, r)
    mx = vals.max(axis=1)
    achieves = vals == mx[:, None, :]
    return (achieves * B[None, :, :]).sum(axis=2)


def _maxlinear_theta_jacobian(model: ModelSpec, theta, X, left_mask) -> np.ndarray:
    """Gradient rows of the max-linear stdf in the free loadings.

    ``left_mask`` selects coordinates whose derivative is taken from the
    left (upper-bound coordinates); all others use the right derivative.
    """
    B = full_loading_matrix(model, theta)
    q, d = X.shape
    r = model.r
    vals = X[:, :, None] * B[None, :, :]
    mx = vals.max(axis=1)
    tie = (vals == mx[:, None, :]).astype(np.float64)
    unique = tie.sum(axis=1) == 1
    strict = tie * unique[:, None, :]
    out = np.empty((q, model.p))
    rem = r - 1
    for t in range(r - 1):
        right = X * (tie[:, :, t] - strict[:, :, rem])
        leftv = X * (strict[:, :, t] - tie[:, :, rem])
        cols = slice(t * d, (t + 1) * d)
        lm = left_mask[cols.start : cols.stop]
        out[:, cols] = np.where(lm[None, :], leftv, right)
    return out


def stdf_gradient(model: ModelSpec, theta, x, active_space: ParamSpace | None = None) -> np.ndarray:
    """Gradient of the stdf in the parameters at a single point.

    One-sided derivatives are taken into the feasible region at boundary
    coordinates. Logistic and max-linear gradients are analytic; the other
    families use central differences of step 1e-6 * max(1, |theta_i|),
    one-sided at the bounds.
    """
    x = np.asarray(x, dtype=np.float64)
    return build_Ldot(model, theta, EvalGrid(points=x[None, :]),
                      active_space=active_space, check_rank=False)[0]


def build_L(model: ModelSpec, theta, grid: EvalGrid) -> np.ndarray:
    """Model stdf values stacked in grid order."""
    theta = np.asarray(theta, dtype=np.float64)
    return stdf_batch(model, theta, grid.points)


def build_Ldot(
    model: ModelSpec,
    theta,
    grid: EvalGrid,
    active_space: ParamSpace | None = None,
    check_rank: bool = True,
) -> np.ndarray:
    """Stacked stdf gradients (q x p), with a rank diagnostic.

    A warning is emitted when the smallest singular value drops below
    1e-10, which signals a non-identifiable grid.
    """
    theta = np.asarray(theta, dtype=np.float64)
    space = active_space if active_space is not None else param_space(model)
    at_up = space.at_upper(theta)
    at_lo = space.at_lower(theta)
    X = grid.points
    if model.family == "logistic":
        th = float(theta[0])
        pos = X > 0
        Xs = np.where(pos, X, 1.0)
        powed = Xs ** (1.0 / th) * pos
        S = powed.sum(axis=1)
        logx = np.where(pos, np.log(Xs), 0.0)
        Sprime = (powed * (-logx / th**2)).sum(axis=1)
        good = S > 0
        ldot = np.zeros((X.shape[0], 1))
        ldot[good, 0] = S[good] ** th * np.log(S[good]) + th * S[good] ** (th - 1.0) * Sprime[good]
    elif model.family == "max_linear":
        ldot = _maxlinear_theta_jacobian(model, theta, X, left_mask=at_up)
    else:
        # central differences, one-sided into the box at active bounds
        p = model.p
        ldot = np.empty((X.shape[0], p))
        for i in range(p):
            h = 1e-6 * max(1.0, abs(theta[i]))
            up = theta.copy()
            dn = theta.copy()
            if at_up[i]:
                dn[i] -= h
            elif at_lo[i]:
                up[i] += h
            else:
                up[i] += h
                dn[i] -= h
            denom = up[i] - dn[i]
            ldot[:, i] = (stdf_batch(model, up, X) - stdf_batch(model, dn, X)) / denom
    if check_rank and ldot.shape[0] >= ldot.shape[1]:
        sv = np.linalg.svd(ldot, compute_uv=False)
        if sv.size and sv[-1] < 1e-10:
            warnings.warn(
                f"gradient matrix is rank deficient (smallest singular value "
                f"{sv[-1]:.2e}); the grid may not identify the parameters",
                RuntimeWarning,
                stacklevel=2,
            )
    return ldot


def local_cone(model: ModelSpec, theta0, tested) -> Cone:
    """Cone tags for the tested coordinates at the null point.

    Coordinates at their lower bound point into the nonnegative half-line,
    upper-bound coordinates into the nonpositive one, interior coordinates
    are free. Untested coordinates must be interior.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    space = param_space(model)
    tested = tuple(int(i) for i in tested)
    at_lo = space.at_lower(theta0, tol=_BOUND_TOL)
    at_up = space.at_upper(theta0, tol=_BOUND_TOL)
    tags = []
    for i in tested:
        if at_lo[i] and at_up[i]:
            raise ValueError(f"coordinate {i} has a degenerate box")
        if at_lo[i]:
            tags.append("nonneg")
        elif at_up[i]:
            tags.append("nonpos")
        else:
            tags.append("free")
    for i in range(space.p):
        if i not in tested and (at_lo[i] or at_up[i]):
            raise ValueError(
                f"untested coordinate {i} sits on the boundary; no nuisance "
                "parameters on the boundary are allowed"
            )
    return Cone(p=space.p, tested=tested, tags=tuple(tags))


def relabel_maxlinear_frame(model: ModelSpec, theta, anchor) -> np.ndarray:
    """Re-express a max-linear estimate in the column frame of an anchor.

    Column permutations of the loading matrix (including which column is
    the remainder) leave the stdf unchanged, so a minimizer is only defined
    up to relabeling. This picks the permutation whose free-block vector is
    closest to ``anchor`` in squared distance over its non-NaN entries,
    which keeps pinned-coordinate hypotheses attached to the intended
    factors. Ties resolve to the smallest parameter norm, then the
    lexicographically smallest vector.
    """
    if model.family != "max_linear" or model.r == 1:
        return np.asarray(theta, dtype=np.float64)
    from itertools import permutations

    anchor = np.asarray(anchor, dtype=np.float64)
    B = full_loading_matrix(model, theta)
    care = ~np.isnan(anchor)
    best = None
    for perm in permutations(range(model.r)):
        cand = B[:, perm][:, : model.r - 1].T.reshape(-1)
        dist = float(((cand - anchor)[care] ** 2).sum()) if care.any() else 0.0
        key = (dist, float(cand @ cand), tuple(cand))
        if best is None or key < best[0]:
            best = (key, cand)
    return best[1]


def canonicalize_maxlinear(B) -> np.ndarray:
    """Canonical parameter vector of a loading matrix.

    Columns are sorted by decreasing column sum, ties broken
    lexicographically on the column entries (larger first); the lowest
    column is dropped and the rest stacked column by column.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2:
        raise ValueError("B must be a matrix")
    if np.any(B < 0):
        raise ValueError("loadings must be nonnegative")
    rowsum = B.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > 1e-9):
        raise ValueError("rows of B must sum to one")
    order = sorted(
        range(B.shape[1]),
        key=lambda t: (-B[:, t].sum(), tuple(-B[:, t])),
    )
    kept = order[:-1]
    return B[:, kept].T.reshape(-1).copy()


def model_to_json(model: ModelSpec) -> str:
    payload: dict = {"family": model.family, "d": model.d}
    if model.r is not None:
        payload["r"] = model.r
    if model.locations is not None:
        payload["locations"] = model.locations.tolist()
    if model.subsets is not None:
        payload["subsets"] = [list(s) for s in model.subsets]
    return json.dumps(payload, indent=2)


def model_from_json(text: str) -> ModelSpec:
    payload = json.loads(text)
    family = payload["family"]
    d = int(payload["d"])
    if family == "brown_resnick":
        return brown_resnick_model(np.asarray(payload["locations"], dtype=np.float64))
    if family == "max_linear":
        return max_linear_model(d, int(payload["r"]))
    if family == "marshall_olkin":
        return marshall_olkin_model(d, [tuple(s) for s in payload["subsets"]])
    if family == "logistic":
        return logistic_model(d)
    raise ValueError(f"unknown family {family!r}")
