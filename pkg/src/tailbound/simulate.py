"""Samplers for max-stable data and the Monte Carlo experiment harness.

Max-linear sampling is exact (componentwise maxima of scaled unit Frechet
factors). Brown-Resnick sampling is approximate: each observation is the
maximum of ``accuracy`` log-Gaussian spectral functions scaled by Poisson
arrival times, with the Gaussian pinned at the centroid of the locations
to keep the truncation error small. The harness runs replicate-parallel
level, power and RMSE experiments with per-replicate seeds ``seed xor i``,
so any subset of replicates reproduces in isolation and results do not
depend on the worker count.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .dataio import DataMatrix, RankMatrix, ranks as rank_op
from .empirical import EvalGrid, estimate_on_grid
from .hypotests import TestSpec, run_test_suite
from .models import (
    ModelSpec,
    brown_resnick_model,
    canonicalize_maxlinear,
    full_loading_matrix,
    max_linear_model,
)
from .wls import WlsProblem, fit

__all__ = [
    "sample_maxlinear",
    "sample_brown_resnick",
    "grid_recipe",
    "SimDesign",
    "ExperimentTable",
    "run_level",
    "run_rmse",
    "run_power",
    "model1_design",
    "model2_design",
    "model3_design",
    "factor_count_design",
    "brown_resnick_design",
    "power_alternatives",
]

GRID_VALUES = (0.0, 0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99, 1.0)
_BR_CHUNK = 256


def sample_maxlinear(B, n: int, seed: int) -> DataMatrix:
    """Exact max-linear sample: rows are maxima of scaled Frechet factors."""
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or np.any(B < 0):
        raise ValueError("B must be a nonnegative matrix")
    if np.any(np.abs(B.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows of B must sum to one")
    if np.any(B.sum(axis=0) <= 0):
        raise ValueError("column sums of B must be positive")
    d, r = B.shape
    rng = np.random.default_rng(seed)
    S = -1.0 / np.log(rng.uniform(size=(n, r)))
    Z = np.max(S[:, :, None] * B.T[None, :, :], axis=1)
    return DataMatrix(values=Z, labels=tuple(f"z{j + 1}" for j in range(d)))


def sample_brown_resnick(
    locations,
    rho: float,
    alpha: float,
    n: int,
    seed: int,
    accuracy: int = 1000,
) -> DataMatrix:
    """Approximate Brown-Resnick sample with semivariogram (|s|/rho)^alpha.

    Each row maximizes ``accuracy`` spectral functions exp(W - gamma) / T_i
    with T_i the arrival times of a unit Poisson process and W centered
    Gaussian pinned at the centroid of the locations. Truncating the
    Poisson series biases the sample low; the bias shrinks rapidly with
    ``accuracy`` and with the spread of the locations (see the sampler
    oracle in the tests for a quantitative check).
    """
    locs = np.asarray(locations, dtype=np.float64)
    if locs.ndim != 2 or locs.shape[1] != 2:
        raise ValueError("locations must be planar")
    if rho <= 0 or not 0 < alpha <= 2:
        raise ValueError("need rho > 0 and alpha in (0, 2]")
    if accuracy < 1:
        raise ValueError("accuracy must be a positive integer")
    d = locs.shape[0]
    center = locs.mean(axis=0)
    g = (np.linalg.norm(locs - center, axis=1) / rho) ** alpha
    diff = locs[:, None, :] - locs[None, :, :]
    gam = (np.sqrt((diff**2).sum(axis=2)) / rho) ** alpha
    cov = g[:, None] + g[None, :] - gam + 1e-12 * np.eye(d)
    L = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    out = np.empty((n, d))
    for lo in range(0, n, _BR_CHUNK):
        hi = min(n, lo + _BR_CHUNK)
        m = hi - lo
        arrivals = np.cumsum(rng.exponential(size=(m, accuracy)), axis=1)
        W = rng.standard_normal((m, accuracy, d)) @ L.T
        np.exp(W - g[None, None, :], out=W)
        W /= arrivals[:, :, None]
        out[lo:hi] = W.max(axis=1)
    return DataMatrix(values=out, labels=tuple(f"s{j + 1}" for j in range(d)))


def regular_grid_locations(nx: int, ny: int) -> np.ndarray:
    """Unit-spaced rectangular lattice of nx * ny planar sites."""
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float))
    return np.column_stack([xs.ravel(), ys.ravel()])


def grid_recipe(model: ModelSpec) -> EvalGrid:
    """The evaluation points used by the experiment designs.

    Brown-Resnick: indicator vectors of location pairs at most sqrt(2)
    apart. Max-linear (and relatives): the 13-value set squared, embedded
    into every coordinate pair, keeping only points with two positive
    coordinates.
    """
    if model.family == "brown_resnick":
        locs = model.locations
        d = locs.shape[0]
        pts = []
        for a in range(d):
            for b in range(a + 1, d):
                if np.linalg.norm(locs[a] - locs[b]) <= np.sqrt(2.0) + 1e-9:
                    row = np.zeros(d)
                    row[a] = 1.0
                    row[b] = 1.0
                    pts.append(row)
        return EvalGrid(points=np.asarray(pts))
    d = model.d
    vals = [v for v in GRID_VALUES if v > 0]
    base = np.array([(a, b) for a in vals for b in vals])
    pts = []
    for i in range(d):
        for j in range(i + 1, d):
            block = np.zeros((base.shape[0], d))
            block[:, i] = base[:, 0]
            block[:, j] = base[:, 1]
            pts.append(block)
    allpts = np.vstack(pts)
    return EvalGrid(points=np.unique(allpts, axis=0))


# ---------------------------------------------------------------------------
# experiment designs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SimDesign:
    """One Monte Carlo experiment: generator, fitted model, cells to fill."""

    name: str
    model: ModelSpec
    theta0: np.ndarray
    n: int
    k_values: tuple[int, ...]
    replicates: int
    estimators: tuple[str, ...] = ("empirical",)
    statistics: tuple[str, ...] = ("wald",)
    test: TestSpec | None = None
    seed: int = 0
    sample_B: np.ndarray | None = None
    sample_br: tuple[float, float] | None = None
    accuracy: int = 1000

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if any(k >= self.n for k in self.k_values):
            raise ValueError("every k must be smaller than n")
        if (self.sample_B is None) == (self.sample_br is None):
            raise ValueError("exactly one data generator must be set")
        object.__setattr__(self, "theta0", np.asarray(self.theta0, dtype=np.float64))
        if self.sample_B is not None:
            object.__setattr__(self, "sample_B", np.asarray(self.sample_B, dtype=np.float64))

    def simulate(self, seed: int, theta_data: np.ndarray | None = None) -> DataMatrix:
        """Draw one dataset, optionally from an alternative parameter."""
        if self.sample_B is not None:
            if theta_data is None:
                B = self.sample_B
            else:
                B = full_loading_matrix(self.model, theta_data)
                B = B[:, B.sum(axis=0) > 0]  # drop empty factors before sampling
                B = B / B.sum(axis=1, keepdims=True)
            return sample_maxlinear(B, self.n, seed)
        rho, alpha = self.sample_br if theta_data is None else tuple(theta_data)
        return sample_brown_resnick(
            self.model.locations, rho, alpha, self.n, seed, accuracy=self.accuracy
        )


def model1_design(replicates=1000, n=5000, k_values=(25, 50, 75, 100),
                  estimators=("empirical",), statistics=("deviance", "wald"),
                  seed=0, n_draws=100_000) -> SimDesign:
    """Three components, two factors, one loading at its upper bound."""
    model = max_linear_model(d=3, r=2)
    theta0 = np.array([1.0, 0.7, 0.2])
    return SimDesign(
        name="M1", model=model, theta0=theta0, n=n, k_values=tuple(k_values),
        replicates=replicates, estimators=tuple(estimators),
        statistics=tuple(statistics),
        test=TestSpec(tested=(0,), beta_star=(1.0,), n_draws=n_draws),
        seed=seed, sample_B=full_loading_matrix(model, theta0),
    )


def model2_design(replicates=1000, n=5000, k_values=(25, 50, 75, 100),
                  estimators=("empirical",), statistics=("deviance", "wald"),
                  seed=0, n_draws=100_000) -> SimDesign:
    """Two loadings on opposite bounds, tested jointly."""
    model = max_linear_model(d=3, r=2)
    theta0 = np.array([1.0, 0.7, 0.0])
    return SimDesign(
        name="M2", model=model, theta0=theta0, n=n, k_values=tuple(k_values),
        replicates=replicates, estimators=tuple(estimators),
        statistics=tuple(statistics),
        test=TestSpec(tested=(0, 2), beta_star=(1.0, 0.0), n_draws=n_draws),
        seed=seed, sample_B=full_loading_matrix(model, theta0),
    )


def model3_design(replicates=1000, n=5000, k_values=(25, 50, 75, 100),
                  estimators=("empirical",), statistics=("deviance", "wald"),
                  seed=0, n_draws=100_000) -> SimDesign:
    """Two components, three factors; zeros in two loadings mean a shock model."""
    model = max_linear_model(d=2, r=3)
    theta0 = np.array([0.0, 0.8, 0.6, 0.0])
    return SimDesign(
        name="M3", model=model, theta0=theta0, n=n, k_values=tuple(k_values),
        replicates=replicates, estimators=tuple(estimators),
        statistics=tuple(statistics),
        test=TestSpec(tested=(0, 3), beta_star=(0.0, 0.0), n_draws=n_draws),
        seed=seed, sample_B=full_loading_matrix(model, theta0),
    )


def factor_count_design(replicates=1000, n=5000, k_values=(25, 50, 75, 100),
                        estimators=("empirical",), statistics=("wald",),
                        seed=0, n_draws=100_000) -> SimDesign:
    """Fit three factors to two-factor data and test the extra column.

    The fitted parameter vector stacks the two free columns as
    (b11, b21, b13, b23); the tested column sits in the free block so the
    null pins plain coordinates at zero. Data are generated from the exact
    two-factor truth.
    """
    model = max_linear_model(d=2, r=3)
    theta0 = np.array([0.8, 0.6, 0.0, 0.0])
    sample_B = np.array([[0.8, 0.2], [0.6, 0.4]])
    return SimDesign(
        name="FACTOR", model=model, theta0=theta0, n=n, k_values=tuple(k_values),
        replicates=replicates, estimators=tuple(estimators),
        statistics=tuple(statistics),
        test=TestSpec(tested=(2, 3), beta_star=(0.0, 0.0), n_draws=n_draws),
        seed=seed, sample_B=sample_B,
    )


def brown_resnick_design(nx=3, ny=2, rho=1.0, alpha=2.0, replicates=1000,
                         n=5000, k_values=(25, 50, 75, 100),
                         estimators=("empirical", "beta"), statistics=("wald",),
                         seed=0, n_draws=100_000, accuracy=1000) -> SimDesign:
    """Spatial model on a lattice with the shape parameter at its bound."""
    model = brown_resnick_model(regular_grid_locations(nx, ny))
    theta0 = np.array([rho, alpha])
    return SimDesign(
        name=f"BR{nx}x{ny}", model=model, theta0=theta0, n=n,
        k_values=tuple(k_values), replicates=replicates,
        estimators=tuple(estimators), statistics=tuple(statistics),
        test=TestSpec(tested=(1,), beta_star=(2.0,), n_draws=n_draws),
        seed=seed, sample_br=(rho, alpha), accuracy=accuracy,
    )


def power_alternatives(design: SimDesign):
    """The alternative parameter rays studied for each named design."""
    if design.name == "M1":
        return [(f"b11={v:.2f}", np.array([v, 0.7, 0.2]))
                for v in np.arange(0.8, 1.0001, 0.05)]
    if design.name == "M2":
        return [
            (f"b11={v:.2f},b31={w:.2f}", np.array([v, 0.7, w]))
            for v in np.arange(0.8, 1.0001, 0.05)
            for w in np.arange(0.0, 0.2001, 0.05)
        ]
    if design.name == "M3":
        return [
            (f"b11={v:.2f},b22={w:.2f}", np.array([v, 0.8, 0.6, w]))
            for v in np.arange(0.0, 0.2001, 0.05)
            for w in np.arange(0.0, 0.2001, 0.05)
        ]
    if design.name == "FACTOR":
        return [
            (f"b13={v:.2f},b23={w:.2f}", np.array([0.8, 0.6, v, w]))
            for v in np.arange(0.0, 0.2001, 0.05)
            for w in np.arange(0.0, 0.2001, 0.05)
        ]
    if design.name.startswith("BR"):
        return [(f"alpha={v:.2f}", np.array([design.sample_br[0], v]))
                for v in np.arange(1.5, 1.9501, 0.05)]
    raise ValueError(f"no alternative ray defined for design {design.name!r}")


# ---------------------------------------------------------------------------
# experiment tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentTable:
    """Aggregated cells of one experiment run."""

    kind: str
    rows: tuple[dict, ...]
    replicates: int
    seed: int
    n_failed: int = 0
    failures: tuple[str, ...] = field(default=())

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "replicates": self.replicates,
                "seed": self.seed,
                "n_failed": self.n_failed,
                "failures": list(self.failures),
                "rows": list(self.rows),
            },
            indent=2,
        )

    def to_csv(self) -> str:
        """Wide layout: one row per (model, statistic, metric), k x estimator columns."""
        cells = {}
        row_keys = []
        col_keys = []
        for row in self.rows:
            rk = (row["model"], row.get("statistic", ""), row.get("metric", "value"),
                  row.get("coord", ""), row.get("alt", ""))
            ck = (row["k"], row["estimator"])
            if rk not in row_keys:
                row_keys.append(rk)
            if ck not in col_keys:
                col_keys.append(ck)
            cells[(rk, ck)] = row["value"]
        col_keys.sort()
        lines = ["model,statistic,metric,coord,alt," +
                 ",".join(f"k{k}_{est}" for k, est in col_keys)]
        for rk in row_keys:
            vals = [cells.get((rk, ck)) for ck in col_keys]
            lines.append(
                ",".join(str(x) for x in rk)
                + ","
                + ",".join("" if v is None else f"{v:.6g}" for v in vals)
            )
        return "\n".join(lines) + "\n"

    def cell(self, **query):
        """The unique row matching the given fields."""
        hits = [
            r for r in self.rows
            if all(r.get(key) == val for key, val in query.items())
        ]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {query}")
        return hits[0]


def _level_binom_se(p_hat: float, n: int) -> float:
    return float(np.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n))


# ---------------------------------------------------------------------------
# replicate workers (top level so they pickle)
# ---------------------------------------------------------------------------

def _replicate_tests(design: SimDesign, rep: int, theta_data=None):
    """All test cells for one replicate: dict[(k, estimator, kind)] -> reject."""
    data = design.simulate(design.seed ^ rep, theta_data)
    rm = rank_op(data)
    grid = grid_recipe(design.model)
    out = {}
    warm = (design.theta0,) if theta_data is None else (theta_data,)
    for ci_k, k in enumerate(design.k_values):
        for ci_e, est in enumerate(design.estimators):
            lhat = estimate_on_grid(rm, int(k), grid, est)
            problem = WlsProblem(grid=grid, lhat=lhat, model=design.model,
                                 k=int(k), n=design.n)
            cv_seed = ((design.seed ^ rep) * 1_000_003 + ci_k * 97 + ci_e) % (2**63)
            results = run_test_suite(
                problem,
                design.test,
                kinds=design.statistics,
                warm_starts=warm,
                cv_seed=cv_seed,
            )
            for kind, res in results.items():
                out[(int(k), est, kind)] = bool(res.reject)
    return out


def _replicate_fits(design: SimDesign, rep: int):
    """Canonical parameter estimates for one replicate, per (k, estimator)."""
    data = design.simulate(design.seed ^ rep)
    rm = rank_op(data)
    grid = grid_recipe(design.model)
    out = {}
    for k in design.k_values:
        for est in design.estimators:
            lhat = estimate_on_grid(rm, int(k), grid, est)
            problem = WlsProblem(grid=grid, lhat=lhat, model=design.model,
                                 k=int(k), n=design.n)
            res = fit(problem, warm_starts=(design.theta0,), compute_matrices=False)
            out[(int(k), est)] = _aligned_theta(design, res.theta)
    return out


def _aligned_theta(design: SimDesign, theta: np.ndarray) -> np.ndarray:
    """Resolve factor-label switching before error aggregation.

    Columns of the estimated loading matrix are matched to the true one by
    the permutation with the smallest total absolute distance, then stacked
    in the truth's column order.
    """
    if design.model.family != "max_linear":
        return theta
    from itertools import permutations

    B_hat = full_loading_matrix(design.model, theta)
    B_true = full_loading_matrix(design.model, design.theta0)
    r = B_true.shape[1]
    best, best_cost = None, np.inf
    for perm in permutations(range(r)):
        cost = float(np.abs(B_hat[:, list(perm)] - B_true).sum())
        if cost < best_cost:
            best, best_cost = perm, cost
    aligned = B_hat[:, list(best)]
    return aligned[:, :-1].T.reshape(-1)


def _run_batch(args):
    design, reps, mode, theta_data = args
    results = []
    for rep in reps:
        try:
            if mode == "tests":
                results.append((rep, _replicate_tests(design, rep, theta_data), None))
            else:
                results.append((rep, _replicate_fits(design, rep), None))
        except Exception as exc:  # recorded and excluded by the aggregator
            results.append((rep, None, f"replicate {rep}: {exc!r}"))
    return results


def _worker_count(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("TAILBOUND_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _map_replicates(design: SimDesign, mode: str, workers, theta_data=None):
    n_workers = _worker_count(workers)
    reps = list(range(design.replicates))
    batch = max(1, min(8, design.replicates // max(n_workers, 1) or 1))
    tasks = [
        (design, reps[i : i + batch], mode, theta_data)
        for i in range(0, len(reps), batch)
    ]
    kernels.warmup()
    gathered = []
    if n_workers == 1 or design.replicates == 1:
        for t in tasks:
            gathered.extend(_run_batch(t))
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for chunk in pool.map(_run_batch, tasks):
                gathered.extend(chunk)
    gathered.sort(key=lambda item: item[0])
    ok = [(rep, payload) for rep, payload, err in gathered if err is None]
    failures = tuple(err for _, _, err in gathered if err is not None)
    if len(failures) >= max(1, design.replicates) * 0.01:
        raise RuntimeError(
            f"{len(failures)} of {design.replicates} replicates failed: "
            + "; ".join(failures[:5])
        )
    return ok, failures


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def run_level(design: SimDesign, workers: int | None = None) -> ExperimentTable:
    """Empirical rejection rate under the design's null, in percent."""
    if design.test is None:
        raise ValueError("design carries no test specification")
    ok, failures = _map_replicates(design, "tests", workers)
    n_ok = len(ok)
    rows = []
    for k in design.k_values:
        for est in design.estimators:
            for kind in design.statistics:
                hits = [payload[(int(k), est, kind)] for _, payload in ok]
                p_hat = float(np.mean(hits))
                rows.append(
                    {
                        "model": design.name, "k": int(k), "estimator": est,
                        "statistic": kind, "metric": "level",
                        "value": 100.0 * p_hat,
                        "mc_se": 100.0 * _level_binom_se(p_hat, n_ok),
                        "replicates": n_ok,
                    }
                )
    return ExperimentTable(kind="level", rows=tuple(rows), replicates=n_ok,
                           seed=design.seed, n_failed=len(failures),
                           failures=failures)


def run_rmse(design: SimDesign, workers: int | None = None) -> ExperimentTable:
    """Root mean squared error per canonical coordinate."""
    ok, failures = _map_replicates(design, "fits", workers)
    n_ok = len(ok)
    theta0 = _aligned_theta(design, design.theta0)
    rows = []
    for k in design.k_values:
        for est in design.estimators:
            thetas = np.array([payload[(int(k), est)] for _, payload in ok])
            err = thetas - theta0[None, :]
            rmse = np.sqrt((err**2).mean(axis=0))
            bias = err.mean(axis=0)
            for j in range(theta0.size):
                rows.append(
                    {
                        "model": design.name, "k": int(k), "estimator": est,
                        "metric": "rmse", "coord": j, "value": float(rmse[j]),
                        "bias": float(bias[j]), "replicates": n_ok,
                    }
                )
    return ExperimentTable(kind="rmse", rows=tuple(rows), replicates=n_ok,
                           seed=design.seed, n_failed=len(failures),
                           failures=failures)


def run_power(design: SimDesign, alternatives=None, workers: int | None = None) -> ExperimentTable:
    """Rejection rate along alternative parameters, in percent."""
    if design.test is None:
        raise ValueError("design carries no test specification")
    if alternatives is None:
        alternatives = power_alternatives(design)
    rows = []
    total_failures: list[str] = []
    n_ok_last = design.replicates
    for label, theta_alt in alternatives:
        ok, failures = _map_replicates(design, "tests", workers,
                                       theta_data=np.asarray(theta_alt, dtype=np.float64))
        total_failures.extend(failures)
        n_ok_last = len(ok)
        for k in design.k_values:
            for est in design.estimators:
                for kind in design.statistics:
                    hits = [payload[(int(k), est, kind)] for _, payload in ok]
                    p_hat = float(np.mean(hits))
                    rows.append(
                        {
                            "model": design.name, "k": int(k), "estimator": est,
                            "statistic": kind, "metric": "power", "alt": label,
                            "value": 100.0 * p_hat,
                            "mc_se": 100.0 * _level_binom_se(p_hat, len(ok)),
                            "replicates": len(ok),
                        }
                    )
    return ExperimentTable(kind="power", rows=tuple(rows), replicates=n_ok_last,
                           seed=design.seed, n_failed=len(total_failures),
                           failures=tuple(total_failures))
