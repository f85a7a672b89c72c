"""Random TenAR(p) models and simulated series.

Randomness comes from numpy's counter-based Philox generator. Replications
should draw their seeds from :func:`spawn_seeds` so streams stay disjoint.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .errors import NumericalError, ValidationError
from .model import (
    DenseNoise,
    IdentityNoise,
    ModelSpec,
    NoiseSpec,
    SeparableNoise,
    TenArModel,
    causal,
    companion,
    normalize,
    var_coefficients,
)
from .tensor_core import mode_dot, spectral_radius

DEFAULT_BURN_IN = 500


class NoiseSetting(str, enum.Enum):
    I = "I"  # noqa: E741
    II = "II"
    III = "III"


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def spawn_seeds(seed: int, n: int) -> list[int]:
    """``n`` independent 64-bit seeds derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def _scaled(m: TenArModel, c: float) -> TenArModel:
    lags = [[list(term[:-1]) + [term[-1] * c] for term in lag] for lag in m.coeffs]
    return TenArModel(m.spec, lags, m.noise)


def _companion_radius(phis: Sequence[np.ndarray], c: float) -> float:
    return spectral_radius(companion([c * ph for ph in phis]))


def random_model(spec: ModelSpec, rho: float = 0.8, seed=0, noise: NoiseSpec | None = None) -> TenArModel:
    """Gaussian factors, normalized, then one global scalar on every ``A_K``
    chosen so the companion spectral radius equals ``rho``."""
    if not 0.0 < rho < 1.0:
        raise ValidationError(f"rho must lie in (0, 1), got {rho}")
    rng = make_rng(seed)
    for _ in range(10):
        lags = [
            [[rng.standard_normal((dk, dk)) for dk in spec.dims] for _ in range(R)]
            for R in spec.kranks
        ]
        if any(np.linalg.norm(a) == 0 for lag in lags for term in lag for a in term):
            continue
        base = normalize(TenArModel(spec, lags, noise or IdentityNoise()))
        phis = var_coefficients(base)
        r0 = _companion_radius(phis, 1.0)
        if r0 > 1e-12:
            break
    else:
        raise NumericalError("could not draw a non-degenerate model in 10 attempts")

    if spec.p == 1:
        c = rho / r0
    else:
        lo, hi = 0.0, rho / r0
        while _companion_radius(phis, hi) < rho:
            lo, hi = hi, 2 * hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _companion_radius(phis, mid) < rho:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * hi:
                break
        c = 0.5 * (lo + hi)
    model = _scaled(base, c)
    check = causal(model)
    if not check or abs(check.radius - rho) > 1e-6:
        raise NumericalError(f"scaling failed: radius {check.radius} for target {rho}")
    return model


def haar_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign-fixed R)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _spectral_cov(n: int, rng: np.random.Generator) -> np.ndarray:
    q = haar_orthogonal(n, rng)
    lam = np.abs(rng.standard_normal(n))
    s = (q * lam) @ q.T
    return (s + s.T) / 2


def noise_cov(setting, dims: Sequence[int], seed=0) -> NoiseSpec:
    """Noise covariance for the three simulation settings.

    I: identity. II: ``Q diag(|z|) Q'`` with Haar ``Q``. III: separable, each
    factor drawn as in II at its own size.
    """
    setting = NoiseSetting(setting)
    rng = make_rng(seed)
    dims = tuple(int(d) for d in dims)
    if setting is NoiseSetting.I:
        return IdentityNoise()
    if setting is NoiseSetting.II:
        return DenseNoise(_spectral_cov(int(np.prod(dims)), rng))
    return SeparableNoise(tuple(_spectral_cov(dk, rng) for dk in dims)).normalized()


def sym_sqrt(s: np.ndarray) -> np.ndarray:
    """Symmetric square root with eigenvalues clamped at zero."""
    w, v = np.linalg.eigh((s + s.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _dense_factor(sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(sigma)
        if w[0] < -1e-10 * max(abs(w[-1]), 1e-300):
            raise NumericalError("noise covariance is not positive semi-definite")
        return sym_sqrt(sigma)


def draw_noise(noise: NoiseSpec, dims: Sequence[int], n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. noise tensors, returned vectorized with shape ``(n, d)``."""
    dims = tuple(dims)
    d = int(np.prod(dims))
    z = rng.standard_normal((n, d))
    if isinstance(noise, IdentityNoise):
        return z
    if isinstance(noise, DenseNoise):
        return z @ _dense_factor(noise.sigma).T
    zt = z.reshape((n,) + dims, order="F")
    for k, s in enumerate(noise.factors):
        zt = mode_dot(zt, sym_sqrt(s), k + 1)
    return zt.reshape(n, d, order="F")


def simulate_series(
    m: TenArModel,
    T: int,
    burn_in: int = DEFAULT_BURN_IN,
    seed=0,
    noise_scale: float = 1.0,
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Simulate ``T`` observations; returns an array of shape ``(T, d_1, ..., d_K)``.

    The pre-sample is zero unless ``initial`` (shape ``(p, *dims)``, most
    recent first) is given, and the first ``burn_in`` steps are discarded.
    Noise is drawn from ``m.noise`` and multiplied by ``noise_scale``.
    """
    if T < 1 or burn_in < 0:
        raise ValidationError("need T >= 1 and burn_in >= 0")
    if not causal(m):
        raise ValidationError("cannot simulate a non-causal model")
    rng = make_rng(seed)
    p, d = m.spec.p, m.spec.d
    n = T + burn_in
    phis = var_coefficients(m)
    eps = noise_scale * draw_noise(m.noise, m.dims, n, rng)
    y = np.zeros((n + p, d))
    if initial is not None:
        init = np.asarray(initial, dtype=float)
        if init.shape != (p,) + m.dims:
            raise ValidationError(f"initial values must have shape {(p,) + m.dims}")
        y[:p] = init.reshape(p, d, order="F")[::-1]
    big = np.hstack(phis)  # y_t = [Phi_1 ... Phi_p] [y_{t-1}; ...; y_{t-p}]
    for t in range(p, n + p):
        y[t] = big @ y[t - p:t][::-1].reshape(-1) + eps[t - p]
    return y[p + burn_in:].reshape((T,) + m.dims, order="F")
