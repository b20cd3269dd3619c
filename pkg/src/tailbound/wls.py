"""Continuous-updating weighted least squares fitting of tail dependence.

The estimator minimizes D' Omega D over the closed parameter box, where D
stacks the differences between a nonparametric grid estimate and the model
values. Minimization runs a multi-start Nelder-Mead (Latin hypercube
starts plus optional warm starts) projected onto the feasible region,
followed by a tight simplex polish and a bounded quasi-Newton step on the
best candidates. Ties between starts resolve to the smallest parameter
norm so that results do not depend on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from . import kernels
from .empirical import EvalGrid, StdfEstimate
from .limits import LimitSpec, compute_sigma, sample_limit
from .models import (
    Cone,
    ModelSpec,
    ParamSpace,
    build_L,
    build_Ldot,
    full_loading_matrix,
    param_space,
    relabel_maxlinear_frame,
)

__all__ = ["WlsProblem", "FitResult", "objective", "fit", "fit_restricted", "std_errors"]


@dataclass(frozen=True, eq=False)
class WlsProblem:
    """Grid, estimates, model and weighting defining one fit."""

    grid: EvalGrid
    lhat: StdfEstimate
    model: ModelSpec
    k: int
    n: int
    omega: object = None  # None (identity), a fixed SPD matrix, or theta -> matrix
    space: ParamSpace | None = None

    def __post_init__(self):
        if self.lhat.values.shape[0] != self.grid.q:
            raise ValueError("one estimate per grid point required")
        if self.grid.d != self.model.d:
            raise ValueError("grid dimension does not match the model")
        if self.space is None:
            object.__setattr__(self, "space", param_space(self.model))
        if self.grid.q < self.space.p:
            raise ValueError("need at least as many grid points as parameters")
        if isinstance(self.omega, np.ndarray):
            om = np.asarray(self.omega, dtype=np.float64)
            if om.shape != (self.grid.q, self.grid.q):
                raise ValueError("omega must be q x q")
            if not np.allclose(om, om.T, atol=1e-10):
                raise ValueError("omega must be symmetric")
            if np.linalg.eigvalsh((om + om.T) / 2)[0] <= 0:
                raise ValueError("omega must be positive definite")

    def omega_at(self, theta) -> np.ndarray | None:
        if self.omega is None:
            return None
        if callable(self.omega):
            return np.asarray(self.omega(theta), dtype=np.float64)
        return self.omega


@dataclass(frozen=True, eq=False)
class FitResult:
    """Minimizer, diagnostics and limit-law matrices of one fit."""

    theta: np.ndarray
    objective: float
    converged: bool
    n_starts: int
    n_evals: int
    boundary_active: np.ndarray
    min_ldot_sv: float
    k: int
    J: np.ndarray | None = None
    Sigma: np.ndarray | None = None
    calJ: np.ndarray | None = None
    std_errors: np.ndarray | None = None

    def to_json(self) -> str:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return json.dumps(
            {
                "theta_hat": self.theta.tolist(),
                "objective": self.objective,
                "k": self.k,
                "converged": self.converged,
                "boundary_active": self.boundary_active.astype(bool).tolist(),
                "std_errors": arr(self.std_errors),
                "J": arr(self.J),
                "Sigma": arr(self.Sigma),
                "calJ": arr(self.calJ),
            }
        )


def _residual(problem: WlsProblem, theta: np.ndarray) -> np.ndarray:
    return problem.lhat.values - build_L(problem.model, theta, problem.grid)


def objective(problem: WlsProblem, theta) -> float:
    """The weighted squared distance D' Omega D at theta."""
    theta = np.asarray(theta, dtype=np.float64)
    if not problem.space.contains(theta):
        raise ValueError("theta outside the closure of the parameter space")
    D = _residual(problem, theta)
    om = problem.omega_at(theta)
    if om is None:
        return float(D @ D)
    return float(D @ om @ D)


class _FreeObjective:
    """Objective over the unpinned coordinates with feasibility projection."""

    def __init__(self, problem: WlsProblem, fixed: dict[int, float] | None):
        self.problem = problem
        self.space = problem.space
        p = self.space.p
        fixed = dict(fixed or {})
        self.frozen = np.zeros(p, dtype=bool)
        self.template = np.zeros(p)
        for i, v in fixed.items():
            lo, hi = self.space.lower[i], self.space.upper[i]
            if not (lo - 1e-9 <= v <= hi + 1e-9):
                raise ValueError(f"pinned value {v} for coordinate {i} outside its box")
            self.frozen[i] = True
            self.template[i] = np.clip(v, lo, hi)
        self.free = np.nonzero(~self.frozen)[0]
        self.n_evals = 0
        model = problem.model
        self.fast = (
            problem.omega is None
            and model.family in ("max_linear",)
        )
        if self.fast:
            self._pts = problem.grid.points
            self._lhat = problem.lhat.values

    def embed(self, x: np.ndarray) -> np.ndarray:
        full = self.template.copy()
        full[self.free] = x
        return self.space.project(full, frozen=self.frozen)

    def __call__(self, x: np.ndarray) -> float:
        self.n_evals += 1
        theta = self.embed(np.asarray(x, dtype=np.float64))
        if self.fast:
            model = self.problem.model
            B = full_loading_matrix(model, theta)
            return kernels.maxlinear_objective(B, self._pts, self._lhat)
        D = _residual(self.problem, theta)
        om = self.problem.omega_at(theta)
        val = float(D @ D) if om is None else float(D @ om @ D)
        return val if np.isfinite(val) else np.inf

    def gradient(self, x: np.ndarray) -> np.ndarray:
        theta = self.embed(np.asarray(x, dtype=np.float64))
        D = _residual(self.problem, theta)
        ldot = build_Ldot(self.problem.model, theta, self.problem.grid,
                          active_space=self.space, check_rank=False)
        om = self.problem.omega_at(theta)
        OD = D if om is None else om @ D
        return (-2.0 * ldot.T @ OD)[self.free]


def _multistart(
    fun: _FreeObjective,
    space: ParamSpace,
    n_starts: int,
    warm_starts,
    seed: int,
    polish_top: int,
):
    free = fun.free
    pf = free.size
    lo, hi = space.lower[free], space.upper[free]
    starts = [np.asarray(w, dtype=np.float64)[free] for w in warm_starts]
    n_lhs = max(n_starts - len(starts), 0)
    if n_lhs:
        lhs = stats.qmc.LatinHypercube(d=pf, seed=seed).random(n_lhs)
        starts.extend(lo + lhs * (hi - lo))
    bounds = list(zip(lo, hi))
    coarse = []
    for x0 in starts:
        res = optimize.minimize(
            fun, np.clip(x0, lo, hi), method="Nelder-Mead", bounds=bounds,
            options={"maxfev": 200 * max(pf, 1), "fatol": 1e-9, "xatol": 1e-6},
        )
        coarse.append(res)
    coarse.sort(key=lambda r: (r.fun, float(np.linalg.norm(r.x))))
    finals = []
    for res in coarse[: max(polish_top, 1)]:
        tight = optimize.minimize(
            fun, res.x, method="Nelder-Mead", bounds=bounds,
            options={"maxfev": 500 * max(pf, 1), "fatol": 1e-13, "xatol": 1e-9},
        )
        finals.append(tight)
        try:
            qn = optimize.minimize(
                fun, tight.x, jac=fun.gradient, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-10},
            )
            if np.isfinite(qn.fun):
                finals.append(qn)
        except Exception:
            pass
    # deterministic winner: best objective, ties to the smallest norm
    best = coarse[0]
    best_norm = float(np.linalg.norm(fun.embed(best.x)))
    for res in finals:
        if not np.isfinite(res.fun):
            continue
        norm = float(np.linalg.norm(fun.embed(res.x)))
        if res.fun < best.fun - 1e-12 or (
            res.fun <= best.fun + 1e-12 and norm < best_norm - 1e-15
        ):
            best, best_norm = res, norm
    converged = bool(np.isfinite(best.fun)) and any(
        getattr(r, "success", False) for r in finals
    )
    return fun.embed(best.x), float(best.fun), converged


def _finish(problem, fun, theta, fval, converged, n_starts, compute_matrices):
    space = problem.space
    boundary = space.at_lower(theta) | space.at_upper(theta)
    ldot = build_Ldot(problem.model, theta, problem.grid,
                      active_space=space, check_rank=False)
    sv = np.linalg.svd(ldot, compute_uv=False)
    min_sv = float(sv[-1]) if sv.size else 0.0
    J = sigma = calJ = se = None
    if compute_matrices:
        om = problem.omega_at(theta)
        OL = ldot if om is None else om @ ldot
        J = ldot.T @ OL
        sigma = compute_sigma(problem.model, theta, problem.grid)
        calJ = OL.T @ sigma @ OL
        if not np.any(boundary):
            try:
                Jinv = np.linalg.inv(J)
                se = np.sqrt(np.clip(np.diag(Jinv @ calJ @ Jinv), 0, None) / problem.k)
            except np.linalg.LinAlgError:
                se = None
    return FitResult(
        theta=theta,
        objective=fval,
        converged=converged,
        n_starts=n_starts,
        n_evals=fun.n_evals,
        boundary_active=boundary,
        min_ldot_sv=min_sv,
        k=problem.k,
        J=J,
        Sigma=sigma,
        calJ=calJ,
        std_errors=se,
    )


def fit(
    problem: WlsProblem,
    n_starts: int = 20,
    warm_starts=(),
    compute_matrices: bool = True,
    seed: int = 0,
    polish_top: int = 3,
    frame_anchor: np.ndarray | None = None,
) -> FitResult:
    """Minimize the weighted least squares objective over the full box.

    ``frame_anchor`` re-expresses a max-linear minimizer in the column
    labeling closest to the anchor (NaN entries are ignored); column
    relabelings leave the objective unchanged but boundary tests need the
    tested coordinates attached to specific factors.

    Raises RuntimeError when no start produces a finite objective.
    """
    fun = _FreeObjective(problem, None)
    theta, fval, converged = _multistart(
        fun, problem.space, n_starts, warm_starts, seed, polish_top
    )
    if not np.isfinite(fval):
        raise RuntimeError("no start converged to a finite objective")
    if frame_anchor is not None and problem.model.family == "max_linear":
        relabeled = relabel_maxlinear_frame(problem.model, theta, frame_anchor)
        if not np.array_equal(relabeled, theta):
            theta = problem.space.project(relabeled)
            fval = fun(theta[fun.free])
    return _finish(problem, fun, theta, fval, converged, n_starts, compute_matrices)


def fit_restricted(
    problem: WlsProblem,
    fixed: dict[int, float],
    n_starts: int = 20,
    warm_starts=(),
    compute_matrices: bool = False,
    seed: int = 0,
    polish_top: int = 3,
) -> FitResult:
    """Minimize with the given coordinates pinned to their null values."""
    fun = _FreeObjective(problem, fixed)
    if fun.free.size == 0:
        theta = problem.space.project(fun.template, frozen=fun.frozen)
        fval = fun(np.zeros(0))
        return _finish(problem, fun, theta, fval, True, 0, compute_matrices)
    theta, fval, converged = _multistart(
        fun, problem.space, n_starts, warm_starts, seed, polish_top
    )
    if not np.isfinite(fval):
        raise RuntimeError("no start converged to a finite objective")
    return _finish(problem, fun, theta, fval, converged, n_starts, compute_matrices)


def std_errors(
    fit_result: FitResult,
    k: int,
    cone: Cone,
    n_draws: int = 100_000,
    seed: int = 0,
) -> np.ndarray:
    """Per-coordinate standard errors honoring the boundary geometry.

    Interior coordinates use sqrt(diag(J^-1 calJ J^-1) / k); coordinates
    tested on the boundary are summarized by the standard deviation of the
    simulated cone-projected limit, scaled by 1/sqrt(k).
    """
    if fit_result.J is None or fit_result.calJ is None or fit_result.Sigma is None:
        raise ValueError("fit result carries no limit matrices")
    J, calJ = fit_result.J, fit_result.calJ
    Jinv = np.linalg.inv(J)
    se = np.sqrt(np.clip(np.diag(Jinv @ calJ @ Jinv), 0, None) / k)
    boundary_tested = [
        (i, t) for i, t in zip(cone.tested, cone.tags) if t != "free"
    ]
    if boundary_tested:
        H = np.zeros((cone.c, cone.p))
        for row, i in enumerate(cone.tested):
            H[row, i] = 1.0
        spec = LimitSpec(
            J=J, Sigma=fit_result.Sigma, calJ=calJ,
            Ldot=np.zeros((0, cone.p)), Omega=np.zeros((0, 0)), cone=cone, H=H,
        )
        draws = sample_limit(spec, n_draws, seed=seed, want_full=True)
        sim_sd = draws.lambda_full.std(axis=0) / np.sqrt(k)
        for i, _ in boundary_tested:
            se[i] = sim_sd[i]
    return se
