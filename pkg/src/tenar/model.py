"""TenAR(p) model representation.

A model holds, for every lag ``i``, term ``r`` and mode ``k``, a square
coefficient matrix ``A_k^(ir)`` so that

    X_t = sum_i sum_r X_{t-i} x_1 A_1^(ir) x_2 ... x_K A_K^(ir) + E_t.

``coeffs[i][r][k]`` uses 0-based lag, term and mode indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from .errors import ValidationError
from .tensor_core import kron_chain, multi_mode_product, rearrange_phi, spectral_radius, vec

MODEL_FORMAT = "tenar-model"
MODEL_VERSION = 1

SIGN_THRESHOLD = 1e-10
CAUSAL_MARGIN = 1e-10


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions plus the K-rank vector ``(R_1, ..., R_p)``; ``p = len(kranks)``."""

    dims: tuple[int, ...]
    kranks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "kranks", tuple(int(r) for r in self.kranks))
        if len(self.dims) < 1 or any(d < 1 for d in self.dims):
            raise ValidationError(f"dims must be positive, got {self.dims}")
        if len(self.kranks) < 1 or any(r < 0 for r in self.kranks):
            raise ValidationError(f"kranks must be non-negative with p >= 1, got {self.kranks}")
        if sum(self.kranks) < 1:
            raise ValidationError("a model needs at least one term")

    @property
    def K(self) -> int:
        return len(self.dims)

    @property
    def p(self) -> int:
        return len(self.kranks)

    @property
    def d(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_params(self) -> int:
        """Length of the stacked coefficient vector, ``sum_i R_i (d_1^2 + ... + d_K^2)``."""
        return sum(self.kranks) * sum(dk * dk for dk in self.dims)


def _check_cov(mat: np.ndarray, what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(f"{what} must be square, got shape {mat.shape}")
    norm = np.linalg.norm(mat)
    if np.linalg.norm(mat - mat.T) > 1e-10 * max(norm, 1e-300):
        raise ValidationError(f"{what} is not symmetric")
    eig = np.linalg.eigvalsh((mat + mat.T) / 2)
    if eig.size and eig[0] < -1e-10 * max(abs(eig[-1]), 1e-300):
        raise ValidationError(f"{what} is not positive semi-definite (min eigenvalue {eig[0]:.3g})")
    return mat


@dataclass(frozen=True)
class IdentityNoise:
    kind = "identity"

    def covariance(self, dims: Sequence[int]) -> np.ndarray:
        return np.eye(int(np.prod(dims)))


@dataclass(frozen=True, eq=False)
class DenseNoise:
    sigma: np.ndarray
    kind = "dense"

    def __post_init__(self):
        object.__setattr__(self, "sigma", _check_cov(self.sigma, "noise covariance"))

    def covariance(self, dims: Sequence[int]) -> np.ndarray:
        return self.sigma


@dataclass(frozen=True, eq=False)
class SeparableNoise:
    """``Cov(vec E_t) = Sigma_K kron ... kron Sigma_1``."""

    factors: tuple[np.ndarray, ...]
    kind = "separable"

    def __post_init__(self):
        facs = tuple(_check_cov(s, f"covariance factor {k}") for k, s in enumerate(self.factors))
        object.__setattr__(self, "factors", facs)

    def covariance(self, dims: Sequence[int]) -> np.ndarray:
        return kron_chain(list(self.factors))

    def normalized(self) -> "SeparableNoise":
        """Put ``||Sigma_k||_F = 1`` for ``k < K`` and move the scale into ``Sigma_K``."""
        facs = [np.array(s, dtype=float) for s in self.factors]
        scale = 1.0
        for k in range(len(facs) - 1):
            nrm = np.linalg.norm(facs[k])
            if nrm > 0:
                facs[k] = facs[k] / nrm
                scale *= nrm
        facs[-1] = facs[-1] * scale
        return SeparableNoise(tuple(facs))


NoiseSpec = Union[IdentityNoise, DenseNoise, SeparableNoise]


@dataclass(frozen=True, eq=False)
class TenArModel:
    spec: ModelSpec
    coeffs: tuple  # coeffs[i][r][k] -> (d_k, d_k) array
    noise: NoiseSpec = field(default_factory=IdentityNoise)

    def __post_init__(self):
        coeffs = tuple(
            tuple(tuple(np.array(a, dtype=float) for a in term) for term in lag)
            for lag in self.coeffs
        )
        spec = self.spec
        if len(coeffs) != spec.p:
            raise ValidationError(f"expected {spec.p} lags of coefficients, got {len(coeffs)}")
        for i, lag in enumerate(coeffs):
            if len(lag) != spec.kranks[i]:
                raise ValidationError(f"lag {i + 1}: expected {spec.kranks[i]} terms, got {len(lag)}")
            for r, term in enumerate(lag):
                if len(term) != spec.K:
                    raise ValidationError(f"lag {i + 1} term {r + 1}: expected {spec.K} matrices")
                for k, a in enumerate(term):
                    if a.shape != (spec.dims[k], spec.dims[k]):
                        raise ValidationError(
                            f"A[{i}][{r}][{k}] has shape {a.shape}, expected {(spec.dims[k],) * 2}"
                        )
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.spec.dims

    def terms(self):
        """Iterate ``(i, r, [A_1, ..., A_K])`` with 0-based lag and term."""
        for i, lag in enumerate(self.coeffs):
            for r, term in enumerate(lag):
                yield i, r, list(term)

    def with_noise(self, noise: NoiseSpec) -> "TenArModel":
        return TenArModel(self.spec, self.coeffs, noise)

    def stacked_params(self) -> np.ndarray:
        """``(vec A_1^(11), ..., vec A_K^(11), ..., vec A_K^(pR_p))`` as one vector."""
        parts = [vec(a) for _, _, term in self.terms() for a in term]
        return np.concatenate(parts) if parts else np.zeros(0)


def var_coefficients(m: TenArModel) -> list[np.ndarray]:
    """``Phi^(i) = sum_r A_K^(ir) kron ... kron A_1^(ir)`` for each lag."""
    d = m.spec.d
    phis = [np.zeros((d, d)) for _ in range(m.spec.p)]
    for i, _, term in m.terms():
        phis[i] = phis[i] + kron_chain(term)
    return phis


def companion(phis: Sequence[np.ndarray]) -> np.ndarray:
    """Block companion matrix of a VAR(p)."""
    p = len(phis)
    d = phis[0].shape[0]
    out = np.zeros((p * d, p * d))
    out[:d, :] = np.hstack(phis)
    if p > 1:
        out[d:, :-d] = np.eye((p - 1) * d)
    return out


class Causality(NamedTuple):
    causal: bool
    radius: float
    margin: float

    def __bool__(self) -> bool:
        return self.causal


def causal(m: TenArModel) -> Causality:
    """Causality via the companion spectral radius (strictly below ``1 - 1e-10``)."""
    radius = spectral_radius(companion(var_coefficients(m)))
    return Causality(radius < 1.0 - CAUSAL_MARGIN, radius, 1.0 - radius)


def _leading_sign(a: np.ndarray) -> float:
    v = vec(a)
    big = np.flatnonzero(np.abs(v) > SIGN_THRESHOLD)
    if big.size == 0:
        return 1.0
    return 1.0 if v[big[0]] > 0 else -1.0


def normalize(m: TenArModel) -> TenArModel:
    """Rescale so ``||A_k^(ir)||_F = 1`` with a positive leading entry for ``k < K``.

    Scale and sign are pushed into ``A_K^(ir)``. Terms within a lag are ordered
    by descending ``||A_K^(ir)||_F``. Separable noise factors are normalized too.
    """
    K = m.spec.K
    lags = []
    for i, lag in enumerate(m.coeffs):
        terms = []
        for r, term in enumerate(lag):
            mats = [np.array(a) for a in term]
            carry = 1.0
            for k in range(K - 1):
                nrm = np.linalg.norm(mats[k])
                if nrm == 0.0:
                    raise ValidationError(f"A[{i}][{r}][{k}] is zero; cannot normalize")
                s = _leading_sign(mats[k])
                mats[k] = mats[k] * (s / nrm)
                carry *= s * nrm
            mats[K - 1] = mats[K - 1] * carry
            terms.append(mats)
        terms.sort(key=lambda t: -np.linalg.norm(t[K - 1]))
        lags.append(terms)
    noise = m.noise.normalized() if isinstance(m.noise, SeparableNoise) else m.noise
    return TenArModel(m.spec, lags, noise)


@dataclass
class LagIdentifiability:
    lag: int
    n_terms: int
    ranks: list[int]
    orthogonality_residual: float | None
    distinct_singular_values: bool | None
    holds: bool
    reason: str = ""


def identifiability_check(m: TenArModel, rank_tol: float = 1e-8, orth_tol: float = 1e-8) -> list[LagIdentifiability]:
    """Sufficient identifiability check, lag by lag.

    For ``K >= 3`` each matrix ``[vec A_k^(i1), ..., vec A_k^(iR_i)]`` must have
    full column rank ``R_i``. For ``K = 2`` the factor matrices of different
    terms must be pairwise trace-orthogonal and the rearranged ``Phi^(i)``
    must have ``R_i`` distinct nonzero singular values.
    """
    K = m.spec.K
    if K < 2:
        raise ValidationError("identifiability check needs K >= 2")
    phis = var_coefficients(m)
    out = []
    for i, lag in enumerate(m.coeffs):
        R = len(lag)
        if R == 0:
            out.append(LagIdentifiability(i + 1, 0, [0] * K, None, None, True, "no terms"))
            continue
        ranks = []
        for k in range(K):
            mat = np.column_stack([vec(term[k]) for term in lag])
            s = np.linalg.svd(mat, compute_uv=False)
            ranks.append(int(np.sum(s > rank_tol * s[0])) if s[0] > 0 else 0)
        too_many = [k for k in range(K) if R > m.spec.dims[k] ** 2]
        orth = distinct = None
        if too_many:
            holds, reason = False, f"R={R} exceeds d_k^2 for modes {too_many}"
        elif K >= 3:
            holds = all(rk == R for rk in ranks)
            reason = "" if holds else "factor matrices are rank deficient"
        else:
            orth = 0.0
            for k in range(K):
                for r in range(R):
                    for l in range(r + 1, R):
                        orth = max(orth, abs(float(np.trace(lag[r][k] @ lag[l][k].T))))
            s = np.linalg.svd(rearrange_phi(phis[i], m.spec.dims), compute_uv=False)[:R]
            distinct = bool(s[-1] > rank_tol * s[0] and np.all(np.diff(s) < -rank_tol * s[0]))
            holds = orth <= orth_tol and distinct and all(rk == R for rk in ranks)
            reason = "" if holds else "orthogonality or distinct-singular-value condition fails"
        out.append(LagIdentifiability(i + 1, R, ranks, orth, distinct, holds, reason))
    return out


def as_series(x, dims: Sequence[int] | None = None) -> np.ndarray:
    """Validate a series array of shape ``(T, d_1, ..., d_K)``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim < 2:
        raise ValidationError("a series needs shape (T, d_1, ..., d_K)")
    if dims is not None and arr.shape[1:] != tuple(dims):
        raise ValidationError(f"series dims {arr.shape[1:]} do not match {tuple(dims)}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("series contains non-finite values")
    return arr


def conditional_mean(m: TenArModel, window: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_i sum_r X_{t+1-i} x_1 A_1^(ir) ... x_K A_K^(ir)``; ``window[0]`` is the most recent."""
    if len(window) < m.spec.p:
        raise ValidationError(f"need {m.spec.p} lagged observations, got {len(window)}")
    out = np.zeros(m.dims)
    for i, _, term in m.terms():
        x = np.asarray(window[i])
        if x.shape != m.dims:
            raise ValidationError(f"observation of shape {x.shape} does not match dims {m.dims}")
        out = out + multi_mode_product(x, term)
    return out


# -- serialization ---------------------------------------------------------

def _mat_to_rows(a: np.ndarray) -> list[list[float]]:
    return [[float(v) for v in row] for row in np.asarray(a)]


def _rows_to_mat(rows, path: str) -> np.ndarray:
    try:
        arr = np.array(rows, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: not a numeric matrix") from exc
    if arr.ndim != 2:
        raise ValidationError(f"{path}: expected a list of rows")
    return arr


def noise_to_dict(noise: NoiseSpec) -> dict:
    if isinstance(noise, IdentityNoise):
        return {"kind": "identity"}
    if isinstance(noise, DenseNoise):
        return {"kind": "dense", "sigma": _mat_to_rows(noise.sigma)}
    return {"kind": "separable", "factors": [_mat_to_rows(s) for s in noise.factors]}


def noise_from_dict(obj: dict, dims: Sequence[int], path: str = "noise") -> NoiseSpec:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ValidationError(f"{path}: missing 'kind'")
    kind = obj["kind"]
    d = int(np.prod(dims))
    try:
        if kind == "identity":
            return IdentityNoise()
        if kind == "dense":
            sigma = _rows_to_mat(obj.get("sigma"), f"{path}.sigma")
            if sigma.shape != (d, d):
                raise ValidationError(f"{path}.sigma: expected {d}x{d}, got {sigma.shape}")
            return DenseNoise(sigma)
        if kind == "separable":
            facs = obj.get("factors")
            if not isinstance(facs, list) or len(facs) != len(dims):
                raise ValidationError(f"{path}.factors: expected {len(dims)} matrices")
            mats = []
            for k, f in enumerate(facs):
                s = _rows_to_mat(f, f"{path}.factors[{k}]")
                if s.shape != (dims[k], dims[k]):
                    raise ValidationError(f"{path}.factors[{k}]: expected {dims[k]}x{dims[k]}")
                mats.append(s)
            return SeparableNoise(tuple(mats))
    except ValidationError as exc:
        if str(exc).startswith(path):
            raise
        raise ValidationError(f"{path}: {exc}") from exc
    raise ValidationError(f"{path}.kind: unknown noise kind {kind!r}")


def model_to_dict(m: TenArModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "dims": list(m.spec.dims),
        "kranks": list(m.spec.kranks),
        "coeffs": [
            [[_mat_to_rows(a) for a in term] for term in lag] for lag in m.coeffs
        ],
        "noise": noise_to_dict(m.noise),
    }


def model_from_dict(obj: dict) -> TenArModel:
    if not isinstance(obj, dict):
        raise ValidationError("model: expected an object")
    if obj.get("format") != MODEL_FORMAT:
        raise ValidationError(f"format: expected {MODEL_FORMAT!r}, got {obj.get('format')!r}")
    if obj.get("version") != MODEL_VERSION:
        raise ValidationError(f"version: unsupported model version {obj.get('version')!r}")
    for key in ("dims", "kranks", "coeffs", "noise"):
        if key not in obj:
            raise ValidationError(f"{key}: missing")
    unknown = set(obj) - {"format", "version", "dims", "kranks", "coeffs", "noise"}
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}")
    spec = ModelSpec(tuple(obj["dims"]), tuple(obj["kranks"]))
    coeffs = []
    for i, lag in enumerate(obj["coeffs"]):
        coeffs.append([
            [_rows_to_mat(a, f"coeffs[{i}][{r}][{k}]") for k, a in enumerate(term)]
            for r, term in enumerate(lag)
        ])
    noise = noise_from_dict(obj["noise"], spec.dims)
    return TenArModel(spec, coeffs, noise)
