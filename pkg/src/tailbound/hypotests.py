"""Deviance and Wald tests for parameters on the parameter-space boundary.

Both statistics share the same limiting law, a quadratic form in the
cone-projected Gaussian score, so a single batch of simulated draws
supplies the critical value and p-value for either. All limit ingredients
are evaluated at the full-model estimate, which remains well defined when
the null itself would degrade identifiability.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .limits import LimitSpec, sample_limit
from .models import Cone
from .wls import FitResult, WlsProblem, fit, fit_restricted

__all__ = [
    "TestSpec",
    "TestResult",
    "deviance_statistic",
    "wald_statistic",
    "run_test",
    "run_test_suite",
]

_GAP_TOL = 1e-10


@dataclass(frozen=True)
class TestSpec:
    """Which coordinates to test, against what values, and how."""

    tested: tuple[int, ...]
    beta_star: tuple[float, ...]
    kind: str = "wald"
    level: float = 0.05
    n_draws: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("deviance", "wald"):
            raise ValueError(f"unknown statistic kind {self.kind!r}")
        if len(self.tested) != len(self.beta_star) or not self.tested:
            raise ValueError("tested coordinates and null values must align")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if self.n_draws < 1:
            raise ValueError("n_draws must be positive")


@dataclass(frozen=True, eq=False)
class TestResult:
    """Observed statistic with its simulated reference distribution."""

    statistic: float
    critical_value: float
    p_value: float
    reject: bool
    kind: str
    level: float
    n_draws: int
    seed: int
    fit_full: FitResult
    fit_null: FitResult | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "statistic": self.statistic,
                "kind": self.kind,
                "critical_value": self.critical_value,
                "p_value": self.p_value,
                "level": self.level,
                "n_draws": self.n_draws,
                "seed": self.seed,
                "theta_hat": self.fit_full.theta.tolist(),
                "theta_hat_null": None
                if self.fit_null is None
                else self.fit_null.theta.tolist(),
            }
        )


def deviance_statistic(fit_full: FitResult, fit_null: FitResult, k: int) -> float:
    """k times the objective gap between the restricted and full fits.

    Tiny negative gaps from optimizer roundoff clamp to zero; anything
    beyond tolerance is an optimization failure and raises.
    """
    gap = fit_null.objective - fit_full.objective
    if gap < -_GAP_TOL:
        raise RuntimeError(
            f"restricted objective {fit_null.objective} beats the full objective "
            f"{fit_full.objective}; the full fit did not converge"
        )
    return float(k * max(gap, 0.0))


def wald_statistic(fit_full: FitResult, tested, beta_star, k: int) -> float:
    """k-scaled quadratic form in the tested block of the estimate.

    The weight is the inverse of H J^-1 H' with J evaluated at the
    full-model estimate.
    """
    if fit_full.J is None:
        raise ValueError("full fit carries no J matrix")
    tested = list(tested)
    diff = fit_full.theta[tested] - np.asarray(beta_star, dtype=np.float64)
    Jinv = np.linalg.inv(fit_full.J)
    V = Jinv[np.ix_(tested, tested)]
    try:
        Vinv = np.linalg.inv((V + V.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("H J^-1 H' is singular") from exc
    return float(k * diff @ Vinv @ diff)


def _check_product_structure(problem: WlsProblem, spec: TestSpec) -> None:
    """Warn when a pinned null value leaves no slack in a coupled cap group."""
    space = problem.space
    fixed = dict(zip(spec.tested, spec.beta_star))
    for idx, cap in space.caps:
        members = [i for i in idx if i in fixed]
        others = [i for i in idx if i not in fixed]
        if members and others:
            pinned_sum = sum(fixed[i] for i in members)
            if pinned_sum >= cap - 1e-9:
                warnings.warn(
                    "null values exhaust a coupled sum constraint; the local "
                    "product structure of the parameter space fails and the "
                    "limit theory may not apply",
                    RuntimeWarning,
                    stacklevel=3,
                )


def _cone_from_null(problem: WlsProblem, spec: TestSpec) -> Cone:
    """Cone tags read off the null values alone.

    The nuisance coordinates are not inspected: the estimate may touch a
    bound by chance without invalidating a test whose null keeps the
    nuisance parameters interior.
    """
    space = problem.space
    tags = []
    for i, b in zip(spec.tested, spec.beta_star):
        if abs(b - space.lower[i]) <= 1e-9:
            tags.append("nonneg")
        elif abs(b - space.upper[i]) <= 1e-9:
            tags.append("nonpos")
        else:
            tags.append("free")
    return Cone(p=space.p, tested=tuple(int(i) for i in spec.tested), tags=tuple(tags))


def _selection_matrix(cone: Cone) -> np.ndarray:
    H = np.zeros((cone.c, cone.p))
    for row, i in enumerate(cone.tested):
        H[row, i] = 1.0
    return H


def run_test_suite(
    problem: WlsProblem,
    spec: TestSpec,
    kinds=("wald",),
    n_starts: int = 20,
    warm_starts=(),
    cv_seed: int | None = None,
    always_fit_null: bool = False,
) -> dict[str, TestResult]:
    """Run both statistics on shared fits and one batch of limit draws.

    The restricted fit is computed when the deviance statistic is requested
    (or forced); the critical value comes from a single simulation of the
    common limiting law at the full-model estimate.
    """
    kinds = tuple(kinds)
    for kind in kinds:
        if kind not in ("deviance", "wald"):
            raise ValueError(f"unknown statistic kind {kind!r}")
    _check_product_structure(problem, spec)
    fixed = dict(zip(spec.tested, (float(b) for b in spec.beta_star)))
    # anchor the factor labeling to the hypothesis frame: tested coordinates
    # at their null values, the rest from the first warm start when given
    anchor = np.full(problem.space.p, np.nan)
    for i, b in fixed.items():
        anchor[i] = b
    if warm_starts:
        warm0 = np.asarray(warm_starts[0], dtype=np.float64)
        untested = [i for i in range(problem.space.p) if i not in fixed]
        anchor[untested] = warm0[untested]
    fit_full = fit(problem, n_starts=n_starts, warm_starts=warm_starts,
                   compute_matrices=True, frame_anchor=anchor)
    fit_null = None
    if "deviance" in kinds or always_fit_null:
        null_warm = [np.asarray(w, dtype=np.float64) for w in warm_starts]
        fit_null = fit_restricted(problem, fixed, n_starts=n_starts,
                                  warm_starts=null_warm, compute_matrices=False)
        if fit_null.objective < fit_full.objective - _GAP_TOL:
            # optimizer noise: retry the full fit from the restricted optimum
            fit_full = fit(
                problem,
                n_starts=n_starts,
                warm_starts=tuple(warm_starts) + (fit_null.theta,),
                compute_matrices=True,
                frame_anchor=anchor,
            )

    cone = _cone_from_null(problem, spec)
    q = problem.grid.q
    omega = problem.omega_at(fit_full.theta)
    limit = LimitSpec(
        J=fit_full.J,
        Sigma=fit_full.Sigma,
        calJ=fit_full.calJ,
        Ldot=np.zeros((0, cone.p)),
        Omega=np.eye(q) if omega is None else omega,
        cone=cone,
        H=_selection_matrix(cone),
    )
    seed = spec.seed if cv_seed is None else int(cv_seed)
    draws = sample_limit(limit, spec.n_draws, seed=seed)
    critical = float(np.quantile(draws.statistic, 1.0 - spec.level, method="higher"))

    out = {}
    for kind in kinds:
        if kind == "deviance":
            statistic = deviance_statistic(fit_full, fit_null, problem.k)
        else:
            statistic = wald_statistic(fit_full, spec.tested, spec.beta_star, problem.k)
        p_value = float(np.mean(draws.statistic >= statistic - 1e-15))
        out[kind] = TestResult(
            statistic=statistic,
            critical_value=critical,
            p_value=p_value,
            reject=bool(statistic > critical),
            kind=kind,
            level=spec.level,
            n_draws=spec.n_draws,
            seed=seed,
            fit_full=fit_full,
            fit_null=fit_null,
        )
    return out


def run_test(
    problem: WlsProblem,
    spec: TestSpec,
    n_starts: int = 20,
    warm_starts=(),
) -> TestResult:
    """Fit full and restricted models and calibrate the statistic by simulation.

    The critical value is the empirical (1 - level) quantile of the
    simulated limit statistic; the p-value is the share of draws at or
    above the observed statistic (resolution 1 / n_draws).
    """
    results = run_test_suite(
        problem, spec, kinds=(spec.kind,), n_starts=n_starts,
        warm_starts=warm_starts, always_fit_null=True,
    )
    return results[spec.kind]
