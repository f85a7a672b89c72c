"""One-step prediction, rolling out-of-sample evaluation and baselines.

Observations are rows of a ``(T, *dims)`` array; row ``j`` is ``X_{j+1}``.
``t0`` is the 1-based index of the first predicted observation, so the
origins are ``t = t0 - 1, ..., T - 1`` and each one predicts ``X_{t+1}``
from ``X_1, ..., X_t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import TenarError, ValidationError
from .estimators import FitOptions, fit_lse, fit_mle, var_ols
from .model import ModelSpec, TenArModel, as_series, conditional_mean

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 2.0 / (63 + 1)
BASELINES = ("iAR", "VAR", "MEAN", "RW", "ES")


def predict_one(m: TenArModel, window: Sequence[np.ndarray]) -> np.ndarray:
    """Conditional mean of the next observation; ``window[0]`` is the latest."""
    if len(window) != m.spec.p:
        raise ValidationError(f"window must hold p={m.spec.p} observations, got {len(window)}")
    return conditional_mean(m, window)


def detrend_exp_smooth(series, alpha: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Trend ``S_1 = X_1, S_t = a X_t + (1 - a) S_{t-1}`` and residual ``Y = X - S``."""
    alpha = DEFAULT_ALPHA if alpha is None else float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    x = as_series(series)
    s = np.empty_like(x)
    s[0] = x[0]
    for t in range(1, x.shape[0]):
        s[t] = alpha * x[t] + (1.0 - alpha) * s[t - 1]
    return s, x - s


@dataclass(frozen=True)
class TenArMethod:
    """A TenAR configuration to evaluate; ``estimator`` is ``lse`` or ``mle``."""

    kranks: tuple[int, ...]
    estimator: str = "lse"
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"TenAR{tuple(self.kranks)}-{self.estimator.upper()}"


Method = Union[str, TenArMethod]


@dataclass
class EvalConfig:
    t0: int
    refit_every: int = 1
    order: int = 1  # lag order for the iAR and VAR baselines
    detrend_alpha: float | None = None
    fit_options: FitOptions = field(default_factory=FitOptions)

    def check(self, T: int, max_p: int) -> None:
        if not max_p < self.t0 <= T:
            raise ValidationError(f"need p < t0 <= T, got p={max_p}, t0={self.t0}, T={T}")
        if self.refit_every < 0:
            raise ValidationError("refit_every must be >= 0")
        if self.order < 1:
            raise ValidationError("baseline order must be >= 1")
        if self.detrend_alpha is not None and not 0.0 < self.detrend_alpha < 1.0:
            raise ValidationError("detrend_alpha must lie in (0, 1)")


@dataclass
class ForecastReport:
    mse: dict
    errors: dict  # method -> per-origin squared Frobenius errors
    total: float
    flags: dict  # method -> origins t (history X_1..X_t) that fell back to MEAN
    t0: int
    count: int

    def table(self) -> list[dict]:
        rows = [{"method": k, "mse": v, "fallbacks": len(self.flags[k])} for k, v in self.mse.items()]
        rows.append({"method": "TOTAL", "mse": self.total, "fallbacks": 0})
        return rows


# -- predictors -------------------------------------------------------------

class _Predictor:
    """Fitted on history ``X_1..X_t`` (rows ``0..t-1``), predicts ``X_{t+1}``."""

    uses_detrended = True
    p = 1

    def fit(self, hist: np.ndarray) -> None:
        pass

    def predict(self, hist: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _TenAR(_Predictor):
    def __init__(self, method: TenArMethod, dims, opts: FitOptions):
        if method.estimator not in ("lse", "mle"):
            raise ValidationError(f"unknown estimator {method.estimator!r}")
        self.spec = ModelSpec(tuple(dims), tuple(method.kranks))
        self.p = self.spec.p
        self.fitter = fit_lse if method.estimator == "lse" else fit_mle
        self.opts = opts
        self.model = None

    def fit(self, hist):
        self.model = self.fitter(hist, self.spec, self.opts).model

    def predict(self, hist):
        return conditional_mean(self.model, hist[::-1][: self.p])


class _VAR(_Predictor):
    def __init__(self, p: int):
        self.p = p

    def fit(self, hist):
        self.phis, _ = var_ols(hist, self.p)

    def predict(self, hist):
        y = hist.reshape(hist.shape[0], -1, order="F")
        out = sum(ph @ y[-1 - i] for i, ph in enumerate(self.phis))
        return out.reshape(hist.shape[1:], order="F")


class _IAR(_Predictor):
    """Separate AR(p) without intercept for every entry, by least squares."""

    def __init__(self, p: int):
        self.p = p

    def fit(self, hist):
        y = hist.reshape(hist.shape[0], -1)
        T = y.shape[0]
        if T <= 2 * self.p:
            raise ValidationError("too little history for the entrywise AR fit")
        target = y[self.p:]
        lags = np.stack([y[self.p - i:T - i] for i in range(1, self.p + 1)], axis=-1)  # (n, d, p)
        gram = np.einsum("ndi,ndj->dij", lags, lags)
        cross = np.einsum("ndi,nd->di", lags, target)
        scale = np.trace(gram, axis1=1, axis2=2) / self.p
        ridge = np.where(scale > 0, 1e-10 * scale, 1e-300)
        gram = gram + ridge[:, None, None] * np.eye(self.p)
        self.coef = np.linalg.solve(gram, cross[..., None])[..., 0]

    def predict(self, hist):
        y = hist.reshape(hist.shape[0], -1)
        recent = np.stack([y[-i] for i in range(1, self.p + 1)], axis=-1)
        return np.sum(self.coef * recent, axis=-1).reshape(hist.shape[1:])


class _Mean(_Predictor):
    uses_detrended = False

    def predict(self, hist):
        return hist.mean(axis=0)


class _RW(_Predictor):
    uses_detrended = False

    def predict(self, hist):
        return hist[-1].copy()


def _make(method: Method, dims, cfg: EvalConfig) -> tuple[str, _Predictor]:
    if isinstance(method, TenArMethod):
        return method.label, _TenAR(method, dims, cfg.fit_options)
    if method == "iAR":
        return method, _IAR(cfg.order)
    if method == "VAR":
        return method, _VAR(cfg.order)
    if method == "MEAN":
        return method, _Mean()
    if method == "RW":
        return method, _RW()
    if method == "ES":
        return method, None  # handled inline: needs the trend
    raise ValidationError(f"unknown method {method!r}; baselines are {BASELINES}")


def rolling_eval(series, methods: Sequence[Method], cfg: EvalConfig) -> ForecastReport:
    """Rolling one-step forecasts from every origin ``t0 - 1 .. T - 1``.

    With ``cfg.detrend_alpha`` set, model-based methods work on ``Y = X - S``
    and predict ``S_t + Y_hat_{t+1}``; MEAN and RW use the raw series. ES
    predicts ``S_t``, the latest trend value available at the origin. Fits
    are refreshed every ``refit_every`` origins (0: only at the first).
    """
    x = as_series(series)
    T = x.shape[0]
    dims = x.shape[1:]
    if not methods:
        raise ValidationError("no methods to evaluate")
    built = [_make(mth, dims, cfg) for mth in methods]
    names = [b[0] for b in built]
    if len(set(names)) != len(names):
        raise ValidationError("method labels must be unique")
    cfg.check(T, max((b[1].p for b in built if b[1] is not None), default=0))

    needs_trend = cfg.detrend_alpha is not None or any(mth == "ES" for mth in methods)
    trend, resid = detrend_exp_smooth(x, cfg.detrend_alpha) if needs_trend else (None, None)
    detrend = cfg.detrend_alpha is not None
    origins = range(cfg.t0 - 1, T)
    errors = {name: np.empty(len(origins)) for name in names}
    flags = {name: [] for name in names}
    fitted = {name: False for name in names}

    for j, t in enumerate(origins):
        target = x[t]
        raw_hist = x[:t]
        fallback = raw_hist.mean(axis=0)
        refit = j == 0 or (cfg.refit_every > 0 and j % cfg.refit_every == 0)
        for name, pred in built:
            if pred is None:  # ES
                guess = trend[t - 1]
            else:
                hist = resid[:t] if detrend and pred.uses_detrended else raw_hist
                try:
                    if refit or not fitted[name]:
                        fitted[name] = False
                        pred.fit(hist)
                        fitted[name] = True
                    guess = pred.predict(hist)
                    if detrend and pred.uses_detrended:
                        guess = trend[t - 1] + guess
                    if not np.all(np.isfinite(guess)):
                        raise ValidationError("non-finite prediction")
                except (TenarError, np.linalg.LinAlgError) as exc:
                    log.warning("%s failed at origin %d: %s", name, t, exc)
                    flags[name].append(t)
                    guess = fallback
            errors[name][j] = float(np.sum((guess - target) ** 2))

    d = int(np.prod(dims))
    count = len(origins)
    targets = x[cfg.t0 - 1:]
    total = float(np.sum((targets - targets.mean(axis=0)) ** 2)) / (d * count)
    mse = {name: float(errors[name].sum()) / (d * count) for name in names}
    return ForecastReport(mse, errors, total, flags, cfg.t0, count)
