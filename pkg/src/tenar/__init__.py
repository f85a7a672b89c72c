"""Tensor autoregressive (TenAR) models: simulation, estimation, inference,
order selection and forecast evaluation."""

from .errors import (
    ConvergenceError,
    DivergenceError,
    NumericalError,
    SingularMatrixError,
    TenarError,
    ValidationError,
)
from .estimators import (
    FitOptions,
    FitReport,
    cp_rank_r,
    fit_lse,
    fit_mle,
    hier_svd_sep_cov,
    loglik,
    proj_estimator,
    residuals,
    var_ols,
)
from .forecast_eval import EvalConfig, ForecastReport, TenArMethod, detrend_exp_smooth, predict_one, rolling_eval
from .inference import AsymptoticInference, asymp_cov, build_W, conf_intervals
from .model import (
    DenseNoise,
    IdentityNoise,
    ModelSpec,
    SeparableNoise,
    TenArModel,
    causal,
    identifiability_check,
    normalize,
    var_coefficients,
)
from .selection import Penalty, SelectionReport, ic_value, select_joint, select_separate
from .simulate import NoiseSetting, noise_cov, random_model, simulate_series, spawn_seeds

__version__ = "0.1.0"
