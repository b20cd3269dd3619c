"""Tail dependence estimation with boundary-aware hypothesis tests.

The package fits parametric stable tail dependence models to multivariate
data by weighted least squares on rank-based estimates, and calibrates
deviance and Wald statistics for null hypotheses on the boundary of the
parameter space by simulating their cone-projected limiting law.
"""

from .dataio import DataMatrix, GpdFit, RankMatrix, fit_gpd, gpd_survival, ingest_csv, ranks
from .empirical import (
    ChiEstimate,
    EvalGrid,
    StdfEstimate,
    beta_stdf,
    chi_hat,
    empirical_stdf,
    estimate_on_grid,
)
from .hypotests import TestResult, TestSpec, deviance_statistic, run_test, wald_statistic
from .limits import (
    ConeProjection,
    LimitSpec,
    compute_sigma,
    limit_ingredients,
    project_cone,
    sample_limit,
)
from .models import (
    Cone,
    ModelSpec,
    ParamSpace,
    brown_resnick_model,
    build_L,
    build_Ldot,
    canonicalize_maxlinear,
    local_cone,
    logistic_model,
    marshall_olkin_model,
    max_linear_model,
    model_from_json,
    model_to_json,
    stdf,
    stdf_gradient,
)
from .simulate import (
    ExperimentTable,
    SimDesign,
    grid_recipe,
    run_level,
    run_power,
    run_rmse,
    sample_brown_resnick,
    sample_maxlinear,
)
from .wls import FitResult, WlsProblem, fit, fit_restricted, objective, std_errors

__version__ = "0.1.0"
