"""Estimation: VAR least squares, projection initializer, alternating least
squares and alternating maximum likelihood under separable noise.

All routines take a series array of shape ``(T, d_1, ..., d_K)``. With order
``p`` the fitted equations are ``t = p, ..., T-1`` (0-based), so sums run over
``n = T - p`` terms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DivergenceError, NumericalError, SingularMatrixError, ValidationError
from .model import (
    DenseNoise,
    IdentityNoise,
    ModelSpec,
    SeparableNoise,
    TenArModel,
    as_series,
    normalize,
)
from .simulate import make_rng
from .tensor_core import kron_chain, matricize, mode_dot, rearrange_phi, unvec

log = logging.getLogger(__name__)

WRONG_WAY_TOL = 1e-10
# Objective moves below these fractions of the data energy are rounding noise:
# the first bounds tolerated wrong-way steps, the second declares convergence.
DIVERGENCE_FLOOR = 1e-18
CONVERGENCE_FLOOR = 1e-26


@dataclass
class FitOptions:
    max_sweeps: int = 200
    rel_tol: float = 1e-8
    ridge: float = 1e-10
    init: Union[str, TenArModel, float] = "projection"
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValidationError("max_sweeps must be >= 1")
        if not self.rel_tol > 0:
            raise ValidationError("rel_tol must be positive")
        if self.ridge < 0:
            raise ValidationError("ridge must be non-negative")
        if isinstance(self.init, str) and self.init != "projection":
            raise ValidationError(f"unknown init {self.init!r}")


@dataclass
class FitReport:
    model: TenArModel
    objective_trace: list[float]
    sweeps_used: int
    converged: bool
    residual_cov: np.ndarray
    method: str
    flags: list[str] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


# -- VAR -------------------------------------------------------------------

def _vectorized(series: np.ndarray) -> np.ndarray:
    return series.reshape(series.shape[0], -1, order="F")


def _lagged_design(y: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    T = y.shape[0]
    target = y[p:]
    design = np.hstack([y[p - i:T - i] for i in range(1, p + 1)])
    return target, design


def var_ols(series, p: int, ridge: float = 0.0) -> tuple[list[np.ndarray], np.ndarray]:
    """Least squares VAR(p) on ``vec(X_t)``; returns ``([Phi_1..Phi_p], Sigma)``.

    ``Sigma`` is the residual covariance with divisor ``T - p``.
    """
    x = as_series(series)
    T = x.shape[0]
    y = _vectorized(x)
    d = y.shape[1]
    if p < 1:
        raise ValidationError("VAR order must be >= 1")
    if T <= p * d + p:
        raise ValidationError(f"VAR({p}) on d={d} needs T > {p * d + p}, got T={T}")
    target, design = _lagged_design(y, p)
    gram = design.T @ design
    if ridge > 0:
        gram = gram + ridge * np.mean(np.diag(gram)) * np.eye(gram.shape[0])
    try:
        coef = cho_solve(cho_factor(gram), design.T @ target)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("VAR regressor Gram matrix is singular") from exc
    phis = [coef[i * d:(i + 1) * d].T for i in range(p)]
    resid = target - design @ coef
    sigma = resid.T @ resid / (T - p)
    return phis, (sigma + sigma.T) / 2


# -- rank-R approximation ---------------------------------------------------

class CPResult(NamedTuple):
    weights: np.ndarray  # (R,)
    factors: list  # K arrays of shape (n_k, R) with unit columns
    residual: float


def _khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product, first matrix's row index fastest."""
    out = mats[0]
    for m in mats[1:]:
        out = (m[:, None, :] * out[None, :, :]).reshape(-1, out.shape[1])
    return out


def _cp_reconstruct(weights: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    shape = tuple(f.shape[0] for f in factors)
    flat = _khatri_rao(list(factors)) @ weights
    return flat.reshape(shape, order="F")


def _cp_als(t: np.ndarray, init: list[np.ndarray], max_iter: int, tol: float):
    K = t.ndim
    R = init[0].shape[1]
    factors = [f.copy() for f in init]
    unfold = [matricize(t, k) for k in range(K)]
    norm2 = float(np.sum(t * t))
    weights = np.ones(R)
    prev = np.inf
    res = np.sqrt(norm2)
    for _ in range(max_iter):
        for k in range(K):
            others = [factors[j] for j in range(K) if j != k]
            v = np.ones((R, R))
            for f in others:
                v *= f.T @ f
            rhs = unfold[k] @ _khatri_rao(others)
            try:
                u = np.linalg.solve(v, rhs.T).T
            except np.linalg.LinAlgError:
                u = np.linalg.lstsq(v, rhs.T, rcond=None)[0].T
            weights = np.linalg.norm(u, axis=0)
            weights[weights == 0] = 1.0
            factors[k] = u / weights
        # ||t - fit||^2 from the last update without rebuilding the fit
        inner = float(np.sum(rhs * u))
        fit2 = float(np.sum(v * (u.T @ u)))
        res = np.sqrt(max(norm2 - 2 * inner + fit2, 0.0))
        if abs(prev - res) <= tol * max(np.sqrt(norm2), 1e-300):
            break
        prev = res
    return weights, factors, float(np.linalg.norm(t - _cp_reconstruct(weights, factors)))


def cp_rank_r(t: np.ndarray, R: int, restarts: int = 10, seed=0, max_iter: int = 300, tol: float = 1e-10) -> CPResult:
    """Best rank-``R`` approximation ``sum_r w_r u_1^(r) o ... o u_K^(r)``.

    Order 2 uses the truncated SVD (exact optimum). Higher orders run CP-ALS
    from an HOSVD start plus ``restarts`` Gaussian starts and keep the best fit.
    """
    t = np.asarray(t, dtype=float)
    K = t.ndim
    if R < 1:
        raise ValidationError("rank must be >= 1")
    if R > min(t.shape):
        raise ValidationError(f"rank {R} exceeds the smallest dimension of a {t.shape} tensor")
    if K == 1:
        nrm = np.linalg.norm(t)
        u = t / nrm if nrm > 0 else np.eye(t.size)[:, 0]
        return CPResult(np.array([nrm]), [u[:, None]], 0.0)
    if K == 2:
        u, s, vt = np.linalg.svd(t, full_matrices=False)
        res = float(np.sqrt(np.sum(s[R:] ** 2)))
        return CPResult(s[:R].copy(), [u[:, :R].copy(), vt[:R].T.copy()], res)

    rng = make_rng(seed)
    starts = [[np.linalg.svd(matricize(t, k), full_matrices=False)[0][:, :R] for k in range(K)]]
    for _ in range(restarts):
        starts.append([rng.standard_normal((n, R)) for n in t.shape])
    best = None
    for init in starts:
        w, f, res = _cp_als(t, init, max_iter, tol)
        if best is None or res < best[2]:
            best = (w, f, res)
        if res <= 1e-13 * np.linalg.norm(t):
            break
    w, f, res = best
    # fold signs into the last factor so weights are non-negative, then sort
    sign = np.sign(w)
    sign[sign == 0] = 1.0
    w = w * sign
    f = [fac.copy() for fac in f]
    f[-1] = f[-1] * sign
    order = np.argsort(-w, kind="stable")
    return CPResult(w[order], [fac[:, order] for fac in f], res)


# -- covariance initializer -------------------------------------------------

def _sym_psd(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    if w[0] >= 0:
        return m
    out = (v * np.clip(w, 0.0, None)) @ v.T
    return (out + out.T) / 2


def hier_svd_sep_cov(sigma: np.ndarray, dims: Sequence[int]) -> list[np.ndarray]:
    """Separable factors ``Sigma_1, ..., Sigma_K`` from a ``d x d`` covariance by
    peeling one mode at a time with a rank-one SVD of the rearranged matrix."""
    dims = tuple(int(d) for d in dims)
    d = int(np.prod(dims))
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (d, d):
        raise ValidationError(f"covariance of shape {sigma.shape} does not match dims {dims}")
    factors = []
    rest = (sigma + sigma.T) / 2
    for k in range(len(dims) - 1):
        dk = dims[k]
        dr = int(np.prod(dims[k + 1:]))
        u, s, vt = np.linalg.svd(rearrange_phi(rest, (dk, dr)), full_matrices=False)
        left = unvec(u[:, 0], (dk, dk))
        right = unvec(s[0] * vt[0], (dr, dr))
        if np.trace(left) < 0:
            left, right = -left, -right
        factors.append(_sym_psd(left))
        rest = (right + right.T) / 2
    factors.append(_sym_psd(rest))
    return list(SeparableNoise(tuple(factors)).normalized().factors)


# -- projection estimator ---------------------------------------------------

def projected_terms(phi: np.ndarray, dims, R: int, restarts: int = 10, seed=0) -> list:
    """``R`` Kronecker terms approximating one VAR coefficient matrix."""
    if R == 0:
        return []
    cp = cp_rank_r(rearrange_phi(phi, dims), R, restarts=restarts, seed=seed)
    terms = []
    for r in range(R):
        mats = [unvec(cp.factors[k][:, r], (dk, dk)) for k, dk in enumerate(dims)]
        mats[-1] = cp.weights[r] * mats[-1]
        terms.append(mats)
    return terms


def proj_estimator(
    series, spec: ModelSpec, seed=0, separable: bool = False, restarts: int = 10, ridge: float = 0.0
) -> TenArModel:
    """Project the unrestricted VAR(p) fit onto sums of Kronecker products."""
    x = as_series(series, spec.dims)
    phis, sigma = var_ols(x, spec.p, ridge=ridge)
    lags = [projected_terms(phis[i], spec.dims, R, restarts, seed) for i, R in enumerate(spec.kranks)]
    noise = SeparableNoise(tuple(hier_svd_sep_cov(sigma, spec.dims))) if separable else DenseNoise(sigma)
    return normalize(TenArModel(spec, lags, noise))


# -- alternating fits -------------------------------------------------------
#
# Block updates work on second moments of the stacked regressors, so one sweep
# costs O(d^3) per block independently of T. Objectives reported in traces are
# always recomputed from the data residuals.

def _partial_trace_spec(K: int, k: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    rows = letters[:K]
    cols = "".join("Z" if j == k else rows[j] for j in range(K))
    return f"{rows}{cols}->{rows[k]}Z"


def _partial_trace(g: np.ndarray, dims: Sequence[int], k: int) -> np.ndarray:
    """Contract a ``d x d`` matrix over every mode except ``k``; ``d_k x d_k``."""
    t = g.reshape(tuple(dims) * 2, order="F")
    return np.einsum(_partial_trace_spec(len(dims), k), t)


def _kron_except(mats: Sequence[np.ndarray], k: int) -> np.ndarray:
    return kron_chain([np.eye(a.shape[0]) if j == k else a for j, a in enumerate(mats)])


class _Workspace:
    """Moments of targets and lags plus the current coefficients of one fit."""

    def __init__(self, x: np.ndarray, spec: ModelSpec, coeffs):
        self.spec = spec
        p, d = spec.p, spec.d
        T = x.shape[0]
        self.n = T - p
        self.x = x
        self.target = x[p:]
        z = _vectorized(x)
        stacked = np.hstack([z[p - i:T - i] for i in range(0, p + 1)])  # [y, l_1, ..., l_p]
        mom = stacked.T @ stacked
        self.mom = [[mom[a * d:(a + 1) * d, b * d:(b + 1) * d] for b in range(p + 1)] for a in range(p + 1)]
        self.coeffs = [[list(term) for term in lag] for lag in coeffs]
        self.phi = {(i, r): kron_chain(term) for i, lag in enumerate(self.coeffs) for r, term in enumerate(lag)}
        # fitted[j] = sum_t yhat_t l_{j,t}'
        self.fitted = [np.zeros((d, d)) for _ in range(p)]
        for (i, _), ph in self.phi.items():
            for j in range(p):
                self.fitted[j] += ph @ self.mom[i + 1][j + 1]

    def residual(self) -> np.ndarray:
        """Exact residual tensors from the data, shape ``(n, *dims)``."""
        p, d = self.spec.p, self.spec.d
        T = self.x.shape[0]
        z = _vectorized(self.x)
        out = z[p:].copy()
        lag_phi = [np.zeros((d, d)) for _ in range(p)]
        for (i, _), ph in self.phi.items():
            lag_phi[i] += ph
        for i in range(p):
            if self.spec.kranks[i]:
                out -= z[p - i - 1:T - i - 1] @ lag_phi[i].T
        return out.reshape((self.n,) + self.spec.dims, order="F")

    def normal_equations(self, i: int, r: int, k: int, weight: np.ndarray | None):
        """Gram and cross products for block ``A_k^(ir)`` given all others."""
        dims = self.spec.dims
        b = _kron_except(self.coeffs[i][r], k)
        c = self.mom[i + 1][i + 1]
        cross = self.mom[0][i + 1] - self.fitted[i] + self.phi[i, r] @ c
        gram_full = b @ c @ b.T
        cross_full = cross @ b.T
        if weight is not None:
            gram_full = gram_full @ weight
            cross_full = cross_full @ weight
        return _partial_trace(gram_full, dims, k), _partial_trace(cross_full, dims, k)

    def replace(self, i: int, r: int, k: int, a: np.ndarray) -> None:
        self.coeffs[i][r][k] = a
        new = kron_chain(self.coeffs[i][r])
        delta = new - self.phi[i, r]
        self.phi[i, r] = new
        for j in range(self.spec.p):
            self.fitted[j] += delta @ self.mom[i + 1][j + 1]

    def renormalize(self) -> None:
        K = self.spec.K
        for lag in self.coeffs:
            for term in lag:
                carry = 1.0
                for k in range(K - 1):
                    nrm = np.linalg.norm(term[k])
                    if nrm > 0:
                        term[k] = term[k] / nrm
                        carry *= nrm
                term[K - 1] = term[K - 1] * carry

    def blocks(self):
        for i, lag in enumerate(self.coeffs):
            for r in range(len(lag)):
                for k in range(self.spec.K):
                    yield i, r, k


def _unfold_stack(arr: np.ndarray, k: int) -> np.ndarray:
    """Mode-``k`` unfolding with time folded into the columns."""
    return np.moveaxis(arr, k + 1, 0).reshape(arr.shape[k + 1], -1)


def _solve_block(gram: np.ndarray, cross: np.ndarray, ridge: float) -> np.ndarray:
    """``cross @ inv(gram + ridge)`` for symmetric ``gram``."""
    gram = (gram + gram.T) / 2
    scale = float(np.mean(np.diag(gram)))
    if ridge > 0 and scale > 0:
        gram = gram + ridge * scale * np.eye(gram.shape[0])
    try:
        return cho_solve(cho_factor(gram), cross.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("block Gram matrix is singular after ridge") from exc


def _initial_coeffs(x: np.ndarray, spec: ModelSpec, opts: FitOptions, separable: bool) -> TenArModel:
    init = opts.init
    if isinstance(init, TenArModel):
        if init.spec.dims != spec.dims or init.spec.kranks != spec.kranks:
            raise ValidationError("provided initial model does not match the requested spec")
        return init
    if isinstance(init, (int, float)) and not isinstance(init, bool):
        lags = [[[float(init) * np.eye(dk) for dk in spec.dims] for _ in range(R)] for R in spec.kranks]
        return TenArModel(spec, lags, IdentityNoise())
    return proj_estimator(x, spec, seed=opts.seed, separable=separable, restarts=opts.restarts, ridge=opts.ridge)


def _finish(ws: _Workspace, resid: np.ndarray, noise, trace, sweeps, converged, method, flags) -> FitReport:
    r = resid.reshape(ws.n, -1, order="F")
    rcov = r.T @ r / ws.n
    rcov = (rcov + rcov.T) / 2
    if noise is None:
        noise = DenseNoise(rcov)
    model = normalize(TenArModel(ws.spec, ws.coeffs, noise))
    return FitReport(model, trace, sweeps, converged, rcov, method, flags)


def _check_step(prev: float, cur: float, slack: float, maximize: bool, trace) -> None:
    worse = (prev - cur) if maximize else (cur - prev)
    if worse > WRONG_WAY_TOL * abs(prev) + slack:
        what = "log-likelihood decreased" if maximize else "sum of squares increased"
        raise DivergenceError(f"{what}: {prev!r} -> {cur!r}", trace)


def _check_fit_inputs(series, spec: ModelSpec) -> np.ndarray:
    x = as_series(series, spec.dims)
    if x.shape[0] <= spec.p:
        raise ValidationError(f"need T > p = {spec.p}, got T = {x.shape[0]}")
    return x


def fit_lse(series, spec: ModelSpec, opts: FitOptions | None = None) -> FitReport:
    """Alternating least squares over the blocks ``A_k^(ir)``.

    Sweeps run lags outer, terms middle, modes inner. Each block update is the
    exact minimizer of the sum of squares given all other blocks.
    """
    opts = opts or FitOptions()
    x = _check_fit_inputs(series, spec)
    init = _initial_coeffs(x, spec, opts, separable=False)
    ws = _Workspace(x, spec, init.coeffs)
    energy = float(np.sum(ws.target ** 2))
    slack, floor = DIVERGENCE_FLOOR * energy, CONVERGENCE_FLOOR * energy

    resid = ws.residual()
    sse = float(np.sum(resid ** 2))
    trace = [sse]
    converged = False
    sweeps = 0
    for sweeps in range(1, opts.max_sweeps + 1):
        for i, r, k in ws.blocks():
            gram, cross = ws.normal_equations(i, r, k, None)
            ws.replace(i, r, k, _solve_block(gram, cross, opts.ridge))
        ws.renormalize()
        resid = ws.residual()
        new = float(np.sum(resid ** 2))
        _check_step(sse, new, slack, maximize=False, trace=trace + [new])
        trace.append(new)
        done = abs(sse - new) <= opts.rel_tol * abs(sse) + floor
        sse = new
        if done:
            converged = True
            break
    return _finish(ws, resid, None, trace, sweeps, converged, "lse", [])


def _inverse_factors(factors: Sequence[np.ndarray]) -> list[np.ndarray]:
    out = []
    for s in factors:
        try:
            c = cho_factor(s)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("covariance factor is not positive definite") from exc
        inv = cho_solve(c, np.eye(s.shape[0]))
        out.append((inv + inv.T) / 2)
    return out


def _logdet(s: np.ndarray) -> float:
    try:
        c, _ = cho_factor(s)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance factor is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.abs(np.diag(c)))))


def _whiten(arr: np.ndarray, inv_factors: Sequence[np.ndarray], skip: int | None) -> np.ndarray:
    out = arr
    for k, s in enumerate(inv_factors):
        if k != skip:
            out = mode_dot(out, s, k + 1)
    return out


def _gaussian_loglik(resid: np.ndarray, factors: Sequence[np.ndarray]) -> float:
    n = resid.shape[0]
    dims = resid.shape[1:]
    d = int(np.prod(dims))
    inv = _inverse_factors(factors)
    quad = float(np.sum(resid * _whiten(resid, inv, None)))
    logdet = sum((d // dk) * _logdet(s) for dk, s in zip(dims, factors))
    return -0.5 * n * d * math.log(2 * math.pi) - 0.5 * n * logdet - 0.5 * quad


def residuals(series, m: TenArModel) -> np.ndarray:
    """Residual tensors ``R_t`` for ``t = p, ..., T-1``; shape ``(T - p, *dims)``."""
    x = _check_fit_inputs(series, m.spec)
    return _Workspace(x, m.spec, m.coeffs).residual()


def loglik(series, m: TenArModel, mode: int | None = None) -> float:
    """Gaussian log-likelihood under separable noise, conditional on the first ``p`` values.

    With ``mode`` given, the quadratic term is evaluated through the mode-``mode``
    unfolding, ``sum_t tr(Sigma_k^-1 R_(k) S_k^-1 R_(k)')``; the value does not
    depend on the mode.
    """
    if not isinstance(m.noise, SeparableNoise):
        raise ValidationError("log-likelihood requires separable noise")
    resid = residuals(series, m)
    factors = m.noise.factors
    if mode is None:
        return _gaussian_loglik(resid, factors)
    n = resid.shape[0]
    dims = m.dims
    d = m.spec.d
    inv = _inverse_factors(factors)
    rk = _unfold_stack(resid, mode)
    whitened = _unfold_stack(_whiten(resid, inv, mode), mode)
    quad = float(np.sum((inv[mode] @ rk) * whitened))
    logdet = sum((d // dk) * _logdet(s) for dk, s in zip(dims, factors))
    return -0.5 * n * d * math.log(2 * math.pi) - 0.5 * n * logdet - 0.5 * quad


def _pd_or_ridge(s: np.ndarray, flags: list[str], k: int) -> np.ndarray:
    s = (s + s.T) / 2
    w = np.linalg.eigvalsh(s)
    if w[0] <= 0:
        dk = s.shape[0]
        s = s + (1e-10 * max(np.trace(s), 1e-300) / dk - min(w[0], 0.0)) * np.eye(dk)
        flags.append(f"ridge applied to covariance factor {k}")
    return s


def fit_mle(series, spec: ModelSpec, opts: FitOptions | None = None) -> FitReport:
    """Alternating maximum likelihood with ``Cov(vec E_t) = Sigma_K kron ... kron Sigma_1``.

    Each sweep updates every ``A_k^(ir)`` by weighted least squares and then
    each ``Sigma_k`` in closed form. The scale of the covariance factors is
    re-normalized after every sweep.
    """
    opts = opts or FitOptions()
    x = _check_fit_inputs(series, spec)
    init = _initial_coeffs(x, spec, opts, separable=True)
    ws = _Workspace(x, spec, init.coeffs)
    dims = spec.dims
    d = spec.d
    flags: list[str] = []
    resid = ws.residual()
    if isinstance(init.noise, SeparableNoise):
        factors = [np.array(s) for s in init.noise.factors]
    else:
        r = resid.reshape(ws.n, -1, order="F")
        factors = hier_svd_sep_cov(r.T @ r / ws.n, dims)
    factors = [_pd_or_ridge(s, flags, k) for k, s in enumerate(factors)]

    ll = _gaussian_loglik(resid, factors)
    # log-likelihood units: rounding scales with the number of scalar equations
    slack, floor = 1e-12 * ws.n * d, 1e-14 * ws.n * d
    trace = [ll]
    converged = False
    sweeps = 0
    for sweeps in range(1, opts.max_sweeps + 1):
        inv = _inverse_factors(factors)
        for i, r, k in ws.blocks():
            weight = _kron_except(inv, k)
            gram, cross = ws.normal_equations(i, r, k, weight)
            ws.replace(i, r, k, _solve_block(gram, cross, opts.ridge))
        ws.renormalize()
        resid = ws.residual()
        rv = resid.reshape(ws.n, -1, order="F")
        crr = rv.T @ rv
        for k, dk in enumerate(dims):
            inv = _inverse_factors(factors)
            s_k = _partial_trace(crr @ _kron_except(inv, k), dims, k) / (ws.n * (d // dk))
            factors[k] = _pd_or_ridge(s_k, flags, k)
        factors = [np.array(s) for s in SeparableNoise(tuple(factors)).normalized().factors]
        new = _gaussian_loglik(resid, factors)
        _check_step(ll, new, slack, maximize=True, trace=trace + [new])
        trace.append(new)
        done = abs(new - ll) <= opts.rel_tol * abs(ll) + floor
        ll = new
        if done:
            converged = True
            break
    return _finish(ws, resid, SeparableNoise(tuple(factors)), trace, sweeps, converged, "mle", flags)
