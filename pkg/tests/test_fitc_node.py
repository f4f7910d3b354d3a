import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from conftest import rel_err
from oracles import grid_posterior
from fedgp.deep_kernel import KernelConfig, gram, prior_gram
from fedgp.fitc_node import (
    fitc_cache,
    fitc_marginal_grad,
    fitc_marginal_loglik_given_omega,
    fitc_posterior_f,
    fitc_posterior_fbar,
    fitc_predictive,
    fitc_predictive_grad,
    fitc_run_gibbs,
    fitc_sample_f,
)
from fedgp.gpc_node import (
    conditional_moments,
    marginal_loglik_given_omega,
    predictive_posterior,
    run_gibbs,
)
from fedgp.linalg import FactorizationLog

CFG = KernelConfig(output_scale=2.0)


def _instance(rng, n, m, d=2):
    x = rng.normal(scale=1.2, size=(n, d))
    xb = rng.normal(scale=1.2, size=(m, d))
    y = rng.integers(0, 2, n).astype(float)
    om = rng.uniform(0.1, 1.5, n)
    kmm = prior_gram(CFG, xb)
    knm = gram(CFG, x, xb)
    knn = np.full(n, CFG.output_scale + CFG.jitter)
    return x, xb, y, om, knn, knm, kmm


def _saturated(rng, n):
    x = rng.normal(scale=1.5, size=(n, 2))
    k = prior_gram(CFG, x)
    y = rng.integers(0, 2, n).astype(float)
    om = rng.uniform(0.1, 1.5, n)
    return x, k, y, om


@pytest.mark.parametrize("n", [2, 4, 6])
def test_saturated_posterior_matches_exact(rng, n):
    _, k, y, om = _saturated(rng, n)
    mean, cov = fitc_posterior_f(np.diag(k), k, k, y, om)
    em, ec = conditional_moments(k, om, y)
    np.testing.assert_allclose(mean, em, atol=1e-8)
    np.testing.assert_allclose(cov, ec, atol=1e-8)
    # the full-K_NN form agrees too
    mean2, cov2 = fitc_posterior_f(k, k, k, y, om)
    np.testing.assert_allclose(cov2, ec, atol=1e-8)


@pytest.mark.parametrize("n", [2, 4, 6])
def test_saturated_fbar_matches_f(rng, n):
    _, k, y, om = _saturated(rng, n)
    mb, cb = fitc_posterior_fbar(np.diag(k), k, k, y, om)
    mf, cf = fitc_posterior_f(np.diag(k), k, k, y, om)
    np.testing.assert_allclose(mb, mf, atol=1e-8)
    np.testing.assert_allclose(cb, cf, atol=1e-8)


@pytest.mark.parametrize("n", [2, 4, 6])
def test_saturated_predictive_matches_exact(rng, n):
    x, k, y, om = _saturated(rng, n)
    xs = rng.normal(size=(5, 2))
    ks = gram(CFG, x, xs)
    kss = np.full(5, CFG.output_scale)
    cache = fitc_cache(np.diag(k), k, k, y, om)
    mu, var = fitc_predictive(ks.T, kss, cache)
    emu, evar = predictive_posterior(k, y, om, ks, kss)
    np.testing.assert_allclose(mu, emu, atol=1e-8)
    np.testing.assert_allclose(var, evar, atol=1e-8)


@pytest.mark.parametrize("n", [2, 4, 6])
def test_saturated_marginal_matches_exact(rng, n):
    _, k, y, om = _saturated(rng, n)
    a = fitc_marginal_loglik_given_omega(np.diag(k), k, k, y, om)
    b = marginal_loglik_given_omega(k, y, om)
    assert a == pytest.approx(b, abs=1e-8)


def test_scalar_marginal_hand_computed():
    # N = M = 1, k_nn = 2, k_nm = 1, k_mm = 1: Q = 1, d = 1, Lambda = 1/omega + 1
    omega, y = 0.5, 1.0
    val = fitc_marginal_loglik_given_omega(np.array([2.0]), np.array([[1.0]]), np.array([[1.0]]), [y], [omega])
    z = 0.5 / omega
    var = 1 / omega + 1 + 1
    assert val == pytest.approx(-0.5 * z * z / var - 0.5 * np.log(2 * np.pi * var), abs=1e-14)


def test_woodbury_matches_dense(rng):
    _, _, y, om, knn, knm, kmm = _instance(rng, 6, 2)
    q = knm @ np.linalg.solve(kmm, knm.T)
    lam = 1 / om + knn - np.diag(q)
    dense = multivariate_normal(np.zeros(6), np.diag(lam) + q).logpdf((y - 0.5) / om)
    assert fitc_marginal_loglik_given_omega(knn, knm, kmm, y, om) == pytest.approx(dense, abs=1e-8)


def test_large_omega_mean_is_nystrom_projection(rng):
    _, _, y, _, knn, knm, kmm = _instance(rng, 4, 2)
    om = np.full(4, 1e4)
    q = knm @ np.linalg.solve(kmm, knm.T)
    lam = 1 / om + knn - np.diag(q)
    z = (y - 0.5) / om
    dense = q @ np.linalg.solve(q + np.diag(lam), z)
    mean, _ = fitc_posterior_f(knn, knm, kmm, y, om)
    np.testing.assert_allclose(mean, dense, atol=1e-12, rtol=1e-8)


def test_zero_kappa_zero_mean(rng):
    _, _, _, om, knn, knm, kmm = _instance(rng, 5, 3)
    mean, _ = fitc_posterior_f(knn, knm, kmm, np.full(5, 0.5), om)
    assert np.all(mean == 0)


def test_fbar_without_data_is_prior(rng):
    kmm = prior_gram(CFG, rng.normal(size=(3, 2)))
    mean, cov = fitc_posterior_fbar(np.zeros(0), np.zeros((0, 3)), kmm, np.zeros(0), np.zeros(0))
    assert np.all(mean == 0) and np.array_equal(cov, kmm)


def test_fbar_covariance_spd(rng):
    for _ in range(100):
        n, m = rng.integers(1, 8), rng.integers(1, 5)
        _, _, y, om, knn, knm, kmm = _instance(rng, n, m)
        _, cov = fitc_posterior_fbar(knn, knm, kmm, y, om)
        np.linalg.cholesky(0.5 * (cov + cov.T))


def test_predictive_prior_recovery_and_contraction(rng):
    _, _, y, om, knn, knm, kmm = _instance(rng, 5, 3)
    cache = fitc_cache(knn, knm, kmm, y, om)
    mu, var = fitc_predictive(np.zeros((1, 3)), np.array([2.0]), cache)
    assert mu[0] == 0 and var[0] == pytest.approx(2.0, abs=1e-14)
    for _ in range(100):
        xs = rng.normal(scale=2, size=(4, 2))
        _, xb, y, om, knn, knm, kmm = _instance(rng, 5, 3)
        cache = fitc_cache(knn, knm, kmm, y, om)
        _, var = fitc_predictive(gram(CFG, xs, xb), np.full(4, CFG.output_scale), cache)
        assert np.all(var <= CFG.output_scale + 1e-12) and np.all(var > 0)


def test_stale_cache_is_rejected(rng):
    _, _, y, om, knn, knm, kmm = _instance(rng, 4, 2)
    cache = fitc_cache(knn, knm, kmm, y, om)
    with pytest.raises(ValueError):
        fitc_predictive(np.zeros((1, 2)), np.ones(1), cache, omega=om * 2)
    fitc_predictive(np.zeros((1, 2)), np.ones(1), cache, omega=om)


def test_no_n_by_n_factorization(rng):
    n, m = 40, 4
    _, xb, y, om, knn, knm, kmm = _instance(rng, n, m)
    oms = rng.uniform(0.1, 1, (3, n))
    with FactorizationLog() as log:
        cache = fitc_cache(knn, knm, kmm, y, oms)
        fitc_predictive(gram(CFG, rng.normal(size=(7, 2)), xb), np.full(7, 2.0), cache)
        fitc_marginal_grad(knn, knm, kmm, y, oms)
        fitc_posterior_f(knn, knm, kmm, y, om)
        fitc_posterior_fbar(knn, knm, kmm, y, om)
        fitc_sample_f(knn, knm, kmm, y, oms, rng)
        fitc_run_gibbs(knn, knm, kmm, y, 4, rng, burn_in=1, thin=1)
        ksm = gram(CFG, rng.normal(size=(3, 2)), xb)
        fitc_predictive_grad(knm, ksm, np.full(3, 2.0), cache, np.ones((3, 3)), np.ones((3, 3)))
    assert log.sizes and log.max_size == m


def test_sampler_moments(rng):
    _, _, y, om, knn, knm, kmm = _instance(rng, 3, 2)
    f = fitc_sample_f(knn, knm, kmm, y, np.tile(om, (40000, 1)), rng)
    mean, cov = fitc_posterior_f(knn, knm, kmm, y, om)
    se = np.sqrt(np.diag(cov) / f.shape[0])
    assert np.all(np.abs(f.mean(0) - mean) < 4 * se)
    np.testing.assert_allclose(np.cov(f.T), cov, atol=0.05)


def test_saturated_gibbs_matches_quadrature():
    rng = np.random.default_rng(21)
    k = np.array([[2.0, 1.2], [1.2, 2.0]])
    y = np.array([1.0, 0.0])
    run = fitc_run_gibbs(np.diag(k), k, k, y, 1000, rng, burn_in=10, thin=2, n_samples=20)
    per_chain = run.f.mean(axis=0)
    est = per_chain.mean(0)
    se = per_chain.std(0, ddof=1) / np.sqrt(per_chain.shape[0])
    pts, w = grid_posterior(k, y)
    assert np.all(np.abs(est - w @ pts) < 3 * se + 1e-3)


def _sym_fd(fun, a, i, j, h=1e-6):
    e = np.zeros_like(a)
    e[i, j] = h
    e[j, i] = h
    return (fun(a + e) - fun(a - e)) / (2 * h)


def test_marginal_gradients_finite_difference(rng):
    _, _, y, _, knn, knm, kmm = _instance(rng, 5, 3)
    oms = rng.uniform(0.2, 1.0, (3, 5))
    _, g_knm, g_kmm = fitc_marginal_grad(knn, knm, kmm, y, oms)
    f_nm = lambda a: fitc_marginal_grad(knn, a, kmm, y, oms)[0]
    fd = np.zeros_like(knm)
    for i in range(5):
        for j in range(3):
            e = np.zeros_like(knm)
            e[i, j] = 1e-6
            fd[i, j] = (f_nm(knm + e) - f_nm(knm - e)) / 2e-6
    assert rel_err(fd, g_knm) < 1e-6
    f_mm = lambda a: fitc_marginal_grad(knn, knm, a, y, oms)[0]
    for i, j in [(0, 0), (1, 0), (2, 1), (2, 2)]:
        expected = g_kmm[i, j] + g_kmm[j, i] if i != j else g_kmm[i, j]
        assert _sym_fd(f_mm, kmm, i, j) == pytest.approx(expected, rel=1e-5, abs=1e-8)


def test_predictive_gradients_finite_difference(rng):
    _, xb, y, _, knn, knm, kmm = _instance(rng, 5, 3)
    oms = rng.uniform(0.2, 1.0, (2, 5))
    ksm = gram(CFG, rng.normal(size=(4, 2)), xb)
    kss = np.full(4, CFG.output_scale)
    gm, gv = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

    def obj(knm_, kmm_, ksm_):
        mu, var = fitc_predictive(ksm_, kss, fitc_cache(knn, knm_, kmm_, y, oms), return_all=True)
        return np.sum(gm * mu + gv * var)

    cache = fitc_cache(knn, knm, kmm, y, oms)
    g_knm, g_kmm, g_ksm = fitc_predictive_grad(knm, ksm, kss, cache, gm, gv)
    h = 1e-6
    fd = np.zeros_like(knm)
    for i in range(5):
        for j in range(3):
            e = np.zeros_like(knm)
            e[i, j] = h
            fd[i, j] = (obj(knm + e, kmm, ksm) - obj(knm - e, kmm, ksm)) / (2 * h)
    assert rel_err(fd, g_knm) < 1e-6
    fd = np.zeros_like(ksm)
    for i in range(4):
        for j in range(3):
            e = np.zeros_like(ksm)
            e[i, j] = h
            fd[i, j] = (obj(knm, kmm, ksm + e) - obj(knm, kmm, ksm - e)) / (2 * h)
    assert rel_err(fd, g_ksm) < 1e-6
    for i, j in [(0, 0), (1, 0), (2, 1)]:
        expected = g_kmm[i, j] + g_kmm[j, i] if i != j else g_kmm[i, j]
        assert _sym_fd(lambda a: obj(knm, a, ksm), kmm, i, j) == pytest.approx(expected, rel=1e-5, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_lambda_positive_and_b_factorizable(n, m, seed):
    rng = np.random.default_rng(seed)
    _, _, y, om, knn, knm, kmm = _instance(rng, n, m)
    c = fitc_cache(knn, knm, kmm, y, om)
    assert np.all(c.lam > 0) and np.all(np.isfinite(c.chol_b))
