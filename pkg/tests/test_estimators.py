from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import orthogonal_model
from tenar.errors import NumericalError, ValidationError
from tenar.estimators import (
    FitOptions,
    _Workspace,
    _solve_block,
    cp_rank_r,
    fit_lse,
    fit_mle,
    hier_svd_sep_cov,
    loglik,
    proj_estimator,
    residuals,
    var_ols,
)
from tenar.model import ModelSpec, SeparableNoise, TenArModel, normalize, var_coefficients
from tenar.simulate import make_rng, noise_cov, random_model, simulate_series
from tenar.tensor_core import kron_chain, outer, rearrange_phi, unvec


def _spd(rng, n):
    g = rng.standard_normal((n, n))
    return g @ g.T + n * np.eye(n)


def _noiseless(m, T=200, seed=0):
    init = make_rng(1000 + seed).standard_normal((m.spec.p,) + m.dims)
    return simulate_series(m, T, burn_in=0, seed=seed, noise_scale=1e-12, initial=init)


# -- VAR ---------------------------------------------------------------------

def test_var_ols_matches_lstsq(rng):
    m = random_model(ModelSpec((2, 2), (1, 1)), 0.7, seed=3)
    x = simulate_series(m, 300, seed=1)
    phis, sigma = var_ols(x, 2)
    y = x.reshape(300, -1, order="F")
    design = np.hstack([y[1:-1], y[:-2]])
    coef, *_ = np.linalg.lstsq(design, y[2:], rcond=None)
    np.testing.assert_allclose(np.hstack(phis), coef.T, rtol=1e-10, atol=1e-12)
    resid = y[2:] - design @ coef
    np.testing.assert_allclose(sigma, resid.T @ resid / 298, rtol=1e-10, atol=1e-12)


def test_var_ols_scalar_decay():
    x = 0.5 ** np.arange(12.0)
    phis, _ = var_ols(x[:, None], 1)
    assert phis[0][0, 0] == pytest.approx(0.5, rel=1e-12)


def test_var_ols_noiseless_recovery():
    # (2, 3) avoids the repeated eigenvalues of a product of two 2x2 reflections
    m = orthogonal_model((2, 3), 1, 0.9, seed=1)
    phis, _ = var_ols(_noiseless(m, 60), 1)
    assert np.linalg.norm(phis[0] - var_coefficients(m)[0]) <= 1e-8


def test_var_ols_needs_enough_rows(rng):
    with pytest.raises(ValidationError):
        var_ols(rng.standard_normal((8, 2, 2)), 2)


# -- rank-R approximation ----------------------------------------------------

def test_cp_rank_one_exact(rng):
    t = outer([rng.standard_normal(n) for n in (3, 4, 5)])
    res = cp_rank_r(t, 1, seed=0)
    assert res.residual <= 1e-10 * np.linalg.norm(t)
    assert np.allclose(np.linalg.norm(res.factors[0], axis=0), 1.0)


def test_cp_order_two_is_truncated_svd(rng):
    t = rng.standard_normal((5, 4))
    res = cp_rank_r(t, 2)
    s = np.linalg.svd(t, compute_uv=False)
    np.testing.assert_allclose(res.weights, s[:2], rtol=1e-12)
    assert res.residual ** 2 == pytest.approx(np.sum(s[2:] ** 2), rel=1e-10)


def test_cp_rank_two_recovery(rng):
    factors = [np.linalg.qr(rng.standard_normal((n, 2)))[0] for n in (4, 4, 4)]
    t = 2 * outer([f[:, 0] for f in factors]) + outer([f[:, 1] for f in factors])
    res = cp_rank_r(t, 2, restarts=10, seed=1)
    assert res.residual <= 1e-6 * np.linalg.norm(t)
    np.testing.assert_allclose(res.weights, [2.0, 1.0], rtol=1e-6)


def test_cp_rank_checks(rng):
    with pytest.raises(ValidationError):
        cp_rank_r(rng.standard_normal((2, 3, 4)), 3)
    with pytest.raises(ValidationError):
        cp_rank_r(rng.standard_normal((3, 3)), 0)


# -- separable covariance ---------------------------------------------------

def test_hier_svd_identity():
    for f in hier_svd_sep_cov(np.eye(12), (2, 3, 2)):
        np.testing.assert_allclose(f / f[0, 0], np.eye(f.shape[0]), atol=1e-12)


def test_hier_svd_exact_recovery(rng):
    dims = (2, 3, 2)
    facs = [_spd(rng, d) for d in dims]
    got = hier_svd_sep_cov(kron_chain(facs), dims)
    want = SeparableNoise(tuple(facs)).normalized().factors
    for a, b in zip(got, want):
        assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)


def test_hier_svd_perturbed_stays_psd(rng):
    dims = (3, 2, 2)
    sigma = kron_chain([_spd(rng, d) for d in dims])
    e = rng.standard_normal(sigma.shape)
    for f in hier_svd_sep_cov(sigma + 1e-3 * (e + e.T), dims):
        assert np.array_equal(f, f.T)
        assert np.linalg.eigvalsh(f)[0] >= -1e-12


# -- projection --------------------------------------------------------------

def test_projection_noiseless_recovery():
    m = orthogonal_model((3, 3, 3), 1, 0.9, seed=2)
    est = proj_estimator(_noiseless(m), m.spec)
    assert np.linalg.norm(var_coefficients(est)[0] - var_coefficients(m)[0]) <= 1e-6


def test_projection_matrix_case_is_top_singular_pair():
    m = random_model(ModelSpec((3, 4), (1,)), 0.8, seed=1)
    x = simulate_series(m, 400, seed=2)
    est = proj_estimator(x, m.spec)
    phi_hat = var_ols(x, 1)[0][0]
    u, s, vt = np.linalg.svd(rearrange_phi(phi_hat, (3, 4)))
    want = s[0] * np.kron(unvec(vt[0], (4, 4)), unvec(u[:, 0], (3, 3)))
    np.testing.assert_allclose(var_coefficients(est)[0], want, rtol=1e-10, atol=1e-12)
    a1 = est.coeffs[0][0][0]
    assert np.linalg.norm(a1) == pytest.approx(1.0)


# -- alternating least squares ----------------------------------------------

def test_lse_scalar_reduces_to_ols():
    m = TenArModel(ModelSpec((1,), (1,)), [[[np.array([[0.6]])]]])
    x = simulate_series(m, 500, seed=4)
    rep = fit_lse(x, m.spec, FitOptions(ridge=0.0))
    assert rep.model.coeffs[0][0][0][0, 0] == pytest.approx(var_ols(x, 1)[0][0][0, 0], rel=1e-12)


def test_lse_vector_reduces_to_var(rng):
    m = random_model(ModelSpec((3,), (1,)), 0.7, seed=4)
    x = simulate_series(m, 400, seed=1)
    rep = fit_lse(x, m.spec, FitOptions(ridge=0.0))
    np.testing.assert_allclose(var_coefficients(rep.model)[0], var_ols(x, 1)[0][0], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("R", [1, 2])
def test_lse_noiseless_recovery(R):
    m = orthogonal_model((3, 3, 3), R, 0.9, seed=R)
    rep = fit_lse(_noiseless(m), m.spec)
    assert np.linalg.norm(var_coefficients(rep.model)[0] - var_coefficients(m)[0]) <= 1e-6


def test_lse_trace_monotone_and_report_fields():
    m = random_model(ModelSpec((3, 2, 2), (2, 1)), 0.8, seed=6)
    x = simulate_series(m, 400, seed=6)
    rep = fit_lse(x, m.spec)
    tr = np.array(rep.objective_trace)
    assert np.all(np.diff(tr) <= 1e-10 * tr[:-1])
    assert rep.sweeps_used == len(tr) - 1 and rep.method == "lse"
    r = residuals(x, rep.model).reshape(len(x) - 2, -1, order="F")
    assert rep.objective == pytest.approx(float(np.sum(r ** 2)), rel=1e-12)
    np.testing.assert_allclose(rep.residual_cov, r.T @ r / r.shape[0], rtol=1e-10)


def test_lse_stationary_point():
    m = random_model(ModelSpec((3, 3), (2,)), 0.8, seed=7)
    x = simulate_series(m, 500, seed=7)
    rep = fit_lse(x, m.spec, FitOptions(rel_tol=1e-14, max_sweeps=2000))
    assert rep.converged
    ws = _Workspace(x, m.spec, rep.model.coeffs)
    for i, r, k in ws.blocks():
        gram, cross = ws.normal_equations(i, r, k, None)
        step = _solve_block(gram, cross, 0.0)
        assert np.linalg.norm(step - ws.coeffs[i][r][k]) < 1e-6


def test_lse_scaling_invariance():
    m = random_model(ModelSpec((2, 3), (1,)), 0.8, seed=8)
    x = simulate_series(m, 300, seed=8)
    a = fit_lse(x, m.spec).model
    b = fit_lse(3.0 * x, m.spec).model
    for u, v in zip(a.coeffs[0][0], b.coeffs[0][0]):
        np.testing.assert_allclose(u, v, atol=1e-10)


def test_lse_initializers():
    m = random_model(ModelSpec((2, 2), (1,)), 0.5, seed=2)
    x = simulate_series(m, 300, seed=2)
    base = fit_lse(x, m.spec)
    scalar = fit_lse(x, m.spec, FitOptions(init=0.1))
    given = fit_lse(x, m.spec, FitOptions(init=m))
    assert scalar.objective == pytest.approx(base.objective, rel=1e-6)
    assert given.objective == pytest.approx(base.objective, rel=1e-6)
    with pytest.raises(ValidationError):
        fit_lse(x, ModelSpec((2, 2), (2,)), FitOptions(init=m))
    with pytest.raises(ValidationError):
        FitOptions(init="random")
    with pytest.raises(ValidationError):
        fit_lse(x[:1], m.spec)


# -- likelihood --------------------------------------------------------------

def test_loglik_identity_covariance(rng):
    dims = (2, 3)
    m = random_model(ModelSpec(dims, (1,)), 0.6, seed=1)
    m = m.with_noise(SeparableNoise((np.eye(2), np.eye(3))))
    x = simulate_series(m, 40, seed=3)
    r = residuals(x, m)
    want = -0.5 * 39 * 6 * math.log(2 * math.pi) - 0.5 * float(np.sum(r ** 2))
    assert loglik(x, m) == pytest.approx(want, rel=1e-12)


def test_loglik_mode_invariance(rng):
    dims = (2, 3, 2)
    m = random_model(ModelSpec(dims, (1,)), 0.6, seed=1)
    m = m.with_noise(SeparableNoise(tuple(_spd(rng, d) for d in dims)))
    x = simulate_series(m, 60, seed=3)
    vals = [loglik(x, m, mode=k) for k in range(3)] + [loglik(x, m)]
    assert max(vals) - min(vals) <= 1e-9 * abs(vals[0])


def test_loglik_scalar_by_hand():
    x = np.array([0.3, -0.1, 0.4, 0.2, -0.5])
    a, s2 = 0.4, 1.7
    m = TenArModel(ModelSpec((1,), (1,)), [[[np.array([[a]])]]], SeparableNoise((np.array([[s2]]),)))
    e = x[1:] - a * x[:-1]
    want = sum(-0.5 * math.log(2 * math.pi * s2) - 0.5 * v * v / s2 for v in e)
    assert loglik(x[:, None], m) == pytest.approx(want, rel=1e-12)


def test_loglik_rejects_dense_noise():
    m = random_model(ModelSpec((2,), (1,)), 0.5, seed=0)
    with pytest.raises(ValidationError):
        loglik(np.zeros((5, 2)), m)
    bad = m.with_noise(SeparableNoise((np.diag([1.0, 0.0]),)))
    with pytest.raises(NumericalError):
        loglik(np.ones((5, 2)), bad)


def test_mle_monotone_and_improves_on_projection():
    dims = (3, 3, 2)
    spec = ModelSpec(dims, (2,))
    m = random_model(spec, 0.8, seed=5, noise=noise_cov("III", dims, seed=5))
    x = simulate_series(m, 600, seed=5)
    rep = fit_mle(x, spec)
    tr = np.array(rep.objective_trace)
    assert np.all(np.diff(tr) >= -1e-10 * np.abs(tr[:-1]))
    start = proj_estimator(x, spec, separable=True)
    assert loglik(x, rep.model) >= loglik(x, start)
    assert isinstance(rep.model.noise, SeparableNoise)
    assert loglik(x, rep.model) == pytest.approx(rep.objective, rel=1e-10)


def test_mle_matches_lse_under_identity_noise():
    dims = (3, 3, 3)
    spec = ModelSpec(dims, (1,))
    gaps, errs = [], []
    for s in range(5):
        m = random_model(spec, 0.8, seed=s)
        x = simulate_series(m, 2000, seed=100 + s)
        phi = var_coefficients(m)[0]
        a = var_coefficients(fit_lse(x, spec).model)[0]
        b = var_coefficients(fit_mle(x, spec).model)[0]
        gaps.append(np.linalg.norm(a - b))
        errs.append(min(np.linalg.norm(a - phi), np.linalg.norm(b - phi)))
    assert np.median(gaps) < 0.1 * np.median(errs)


def test_fit_results_are_normalized():
    m = random_model(ModelSpec((2, 2, 2), (2,)), 0.8, seed=1)
    x = simulate_series(m, 300, seed=1)
    est = fit_lse(x, m.spec).model
    again = normalize(est)
    for t1, t2 in zip(est.coeffs[0], again.coeffs[0]):
        for a, b in zip(t1, t2):
            np.testing.assert_allclose(a, b, atol=1e-14)
