"""Plug-in asymptotic covariances for the alternating LSE and MLE, and
entrywise confidence intervals.

Parameters are stacked as ``vec A_1^(11), ..., vec A_K^(11), vec A_1^(12), ...``
(lags outer, terms middle, modes inner), the order of
:meth:`TenArModel.stacked_params`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import SingularMatrixError, ValidationError
from .estimators import FitReport, residuals
from .model import SeparableNoise, TenArModel, as_series
from .tensor_core import kron_chain, mode_dot, perm_Q_index, vec

PSD_TOL = 1e-8


@dataclass
class AsymptoticInference:
    xi: np.ndarray
    stderr: np.ndarray
    method: str
    estimate: np.ndarray
    n_obs: int
    h: np.ndarray
    middle: np.ndarray
    flags: list = field(default_factory=list)


class ConfidenceIntervals(NamedTuple):
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    labels: list


def param_labels(m: TenArModel) -> list[tuple[int, int, int, int, int]]:
    """``(lag, term, mode, row, col)`` for each stacked entry, all 1-based."""
    out = []
    for i, r, term in m.terms():
        for k, a in enumerate(term):
            n = a.shape[0]
            for col in range(n):
                for row in range(n):
                    out.append((i + 1, r + 1, k + 1, row + 1, col + 1))
    return out


def _unfold_rows(w: np.ndarray, k: int) -> np.ndarray:
    """Per-time mode-``k`` unfolding of a stacked array: ``(n, d_k, d / d_k)``."""
    arr = np.moveaxis(w, k + 1, 1)
    rest = list(range(arr.ndim - 1, 1, -1))
    return arr.transpose([0, 1] + rest).reshape(arr.shape[0], arr.shape[1], -1)


def _stacked_W(m: TenArModel, lagged: Sequence[np.ndarray]) -> np.ndarray:
    """``W_t`` for a batch: ``lagged[i]`` holds ``X_{t+1-i}`` rows; returns ``(n, q, d)``."""
    dims = m.dims
    d = m.spec.d
    n = lagged[0].shape[0]
    blocks = []
    for i, _, term in m.terms():
        for k, dk in enumerate(dims):
            w = lagged[i]
            for j, a in enumerate(term):
                if j != k:
                    w = mode_dot(w, a, j + 1)
            mk = _unfold_rows(w, k)  # X_(k) Phi_k'
            b = np.einsum("nac,be->nabce", mk, np.eye(dk)).reshape(n, dk * dk, d)
            out = np.empty_like(b)
            out[:, :, perm_Q_index(k, dims)] = b
            blocks.append(out)
    if not blocks:
        return np.zeros((n, 0, d))
    return np.concatenate(blocks, axis=1)


def build_W(m: TenArModel, window: Sequence[np.ndarray]) -> np.ndarray:
    """Regressor matrix ``W_t`` (``q x d``) for the next observation.

    ``window[0]`` is the most recent observation, ``window[i]`` lag ``i + 1``.
    """
    if len(window) != m.spec.p:
        raise ValidationError(f"window must hold p={m.spec.p} observations, got {len(window)}")
    lagged = []
    for x in window:
        x = np.asarray(x, dtype=float)
        if x.shape != m.dims:
            raise ValidationError(f"observation of shape {x.shape} does not match dims {m.dims}")
        lagged.append(x[None])
    return _stacked_W(m, lagged)[0]


def padding_vectors(m: TenArModel) -> list[np.ndarray]:
    """Zero-padded ``vec A_k^(ir)`` for ``k < K`` at their stacked offsets."""
    q = m.spec.n_params
    K = m.spec.K
    out = []
    offset = 0
    for _, _, term in m.terms():
        for k, a in enumerate(term):
            size = a.size
            if k < K - 1:
                g = np.zeros(q)
                g[offset:offset + size] = vec(a)
                out.append(g)
            offset += size
    return out


def _separable_cov(noise: SeparableNoise, inverse: bool) -> np.ndarray:
    mats = [np.linalg.inv(s) for s in noise.factors] if inverse else list(noise.factors)
    return kron_chain(mats)


def asymp_cov(series, m: TenArModel, method: str = "lse") -> AsymptoticInference:
    """Sandwich ``H^-1 M H^-1`` with sample averages over the fitted equations.

    LSE uses the residual covariance of ``m`` on ``series`` for ``Sigma``. MLE
    uses the fitted separable covariance, for which the middle term equals the
    ``E(W Sigma^-1 W')`` part of ``H``.
    """
    method = method.lower()
    if method not in ("lse", "mle"):
        raise ValidationError(f"unknown method {method!r}")
    x = as_series(series, m.dims)
    p = m.spec.p
    T = x.shape[0]
    lagged = [x[p - i:T - i] for i in range(1, p + 1)]
    W = _stacked_W(m, lagged)
    n = W.shape[0]
    if method == "lse":
        r = residuals(x, m).reshape(n, -1, order="F")
        sigma = r.T @ r / n
        gram = np.einsum("nqd,nrd->qr", W, W) / n
        middle = np.einsum("nqd,de,nre->qr", W, sigma, W, optimize=True) / n
    else:
        if not isinstance(m.noise, SeparableNoise):
            raise ValidationError("MLE inference requires separable noise")
        sinv = _separable_cov(m.noise, inverse=True)
        gram = np.einsum("nqd,de,nre->qr", W, sinv, W, optimize=True) / n
        middle = gram
    h = gram.copy()
    for g in padding_vectors(m):
        h += np.outer(g, g)
    h = (h + h.T) / 2
    q = h.shape[0]
    flags = []
    try:
        hinv = np.linalg.inv(h)
        if not np.all(np.isfinite(hinv)) or np.linalg.cond(h) > 1e14:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        # e.g. several terms of a matrix model, whose mixing is not identified
        flags.append("H is singular or ill-conditioned; ridge applied")
        h = h + 1e-10 * np.trace(h) / q * np.eye(q)
        try:
            hinv = np.linalg.inv(h)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError("H is singular after ridge") from exc
    xi = hinv @ middle @ hinv
    xi = (xi + xi.T) / 2
    stderr = np.sqrt(np.clip(np.diag(xi), 0.0, None) / T)
    return AsymptoticInference(xi, stderr, method, m.stacked_params(), T, h, middle, flags)


def normal_quantile(prob: float) -> float:
    if not 0.0 < prob < 1.0:
        raise ValidationError("probability must lie in (0, 1)")
    return float(ndtri(prob))


def conf_intervals(fit, inf: AsymptoticInference, level: float = 0.95) -> ConfidenceIntervals:
    """Entrywise ``estimate +/- z * stderr`` in the stacked order."""
    if not 0.0 < level < 1.0:
        raise ValidationError("level must lie in (0, 1)")
    model = fit.model if isinstance(fit, FitReport) else fit
    est = model.stacked_params()
    if est.shape != inf.stderr.shape:
        raise ValidationError("inference result does not match the model")
    z = normal_quantile((1.0 + level) / 2.0)
    half = z * inf.stderr
    return ConfidenceIntervals(est, est - half, est + half, level, param_labels(model))


def align_to_reference(m: TenArModel, ref: TenArModel) -> TenArModel:
    """Permute terms within each lag and flip sign pairs ``(A_k, A_K)`` so
    that ``m`` is oriented like ``ref``. The implied ``Phi^(i)`` is unchanged."""
    if m.spec.dims != ref.spec.dims or m.spec.kranks != ref.spec.kranks:
        raise ValidationError("models have different specs")
    K = m.spec.K
    lags = []
    for lag, rlag in zip(m.coeffs, ref.coeffs):
        R = len(lag)
        phis = [kron_chain(t) for t in lag]
        rphis = [kron_chain(t) for t in rlag]
        best = min(
            itertools.permutations(range(R)),
            key=lambda perm: sum(np.linalg.norm(phis[perm[r]] - rphis[r]) for r in range(R)),
        ) if R else ()
        terms = []
        for r, src in enumerate(best):
            mats = [np.array(a) for a in lag[src]]
            for k in range(K - 1):
                if np.sum(mats[k] * rlag[r][k]) < 0:
                    mats[k] = -mats[k]
                    mats[K - 1] = -mats[K - 1]
            terms.append(mats)
        lags.append(terms)
    return TenArModel(m.spec, lags, m.noise)
