import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd
from oracles import grid_posterior
from fedgp.bound import (
    BoundReport,
    bayes_empirical_risk,
    bound_report,
    epsilon,
    gaussian_kl_given_omega,
    gibbs_empirical_risk,
    kl_ber,
    kl_estimate,
    kl_inverse_ber,
    mutual_information_term,
    to_pm,
)
from fedgp.gpc_node import run_gibbs
from fedgp.pg import sample_pg


def separable_client(rng, n_train, n_test, gap=2.0):
    y = rng.integers(0, 2, n_train + n_test)
    x = rng.normal(scale=0.5, size=(y.size, 2))
    x[:, 0] += np.where(y == 1, gap, -gap)
    return x[:n_train], y[:n_train], x[n_train:], y[n_train:]


def test_kl_ber_values():
    assert kl_ber(0.3, 0.3) == 0.0
    assert np.isclose(kl_ber(0.0, 0.5), np.log(2))
    assert np.isclose(kl_ber(0.5, 0.25), 0.5 * np.log(2) + 0.5 * np.log(2 / 3))


def test_kl_inverse_trivial():
    assert kl_inverse_ber(0.37, 0.0) == 0.37
    assert kl_inverse_ber(1.0, 0.5) == 1.0
    assert kl_inverse_ber(0.2, 50.0) > 1 - 1e-9


@pytest.mark.parametrize("eps", [0.01, 0.1, 0.5, 2.0])
def test_kl_inverse_at_zero(eps):
    assert abs(kl_inverse_ber(0.0, eps) - (1 - np.exp(-eps))) < 1e-9


def test_kl_inverse_grid_oracle():
    p = np.linspace(0, 1, 1_000_001)
    ok = p[kl_ber(0.1, p) <= 0.05]
    assert abs(kl_inverse_ber(0.1, 0.05) - ok.max()) < 1e-5


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 3), st.floats(0, 3))
def test_kl_inverse_monotone(q1, q2, e1, e2):
    qa, qb = sorted((q1, q2))
    ea, eb = sorted((e1, e2))
    assert kl_inverse_ber(qa, ea) <= kl_inverse_ber(qb, ea) + 1e-9
    assert kl_inverse_ber(qa, ea) <= kl_inverse_ber(qa, eb) + 1e-9
    assert kl_inverse_ber(qa, ea) >= qa


def test_epsilon_decreases_with_n():
    eps = [epsilon(3.0, n, 0.01) for n in (8, 16, 32, 64, 128)]
    assert np.all(np.diff(eps) < 0)
    with pytest.raises(ValueError):
        epsilon(1.0, 10, 1.0)


def test_to_pm():
    assert np.array_equal(to_pm([0, 1, 1]), [-1, 1, 1])
    with pytest.raises(ValueError):
        to_pm([0, 2])


def test_gibbs_risk_degenerate():
    y = np.array([1.0, -1.0, 1.0])
    f = np.tile(y * 1e6, (50, 1))
    assert gibbs_empirical_risk(f, y) == 0.0
    assert bayes_empirical_risk(f, y) == 0.0


def test_gibbs_risk_symmetric(rng):
    k = random_spd(rng, 4)
    f = rng.multivariate_normal(np.zeros(4), k, size=20000)
    y = np.array([1.0, -1.0, 1.0, -1.0])
    r = gibbs_empirical_risk(f, y)
    assert abs(r - 0.5) < 3 * np.sqrt(0.25 / 20000)


def test_gibbs_risk_quadrature_oracle(rng):
    k = np.array([[2.0, 1.2], [1.2, 2.0]])
    y01 = np.array([1.0, 0.0])
    pts, w = grid_posterior(k, y01, n_grid=401, lim=10.0)
    y = to_pm(y01)
    exact = float(w @ np.mean(np.sign(pts) != y, axis=1))
    run = run_gibbs(k, y01, 4000, rng, burn_in=30, thin=1, n_samples=1)
    per = np.mean(np.sign(run.f[0]) != y, axis=1)
    est = gibbs_empirical_risk(run.f[0], y)
    se = per.std(ddof=1) / np.sqrt(per.size)
    assert abs(est - exact) < 3 * se


def test_gaussian_kl_hand_value():
    v = gaussian_kl_given_omega(np.array([[1.0]]), [1.0], [[1.0]])[0]
    assert np.isclose(v, 0.5 * (np.log(2) - 1 + 0.5 + 1 / 16), rtol=0, atol=1e-12)


def test_gaussian_kl_matches_direct(rng):
    k = random_spd(rng, 3)
    y = np.array([1.0, 0.0, 1.0])
    om = rng.uniform(0.1, 1.0, 3)
    s = np.linalg.inv(np.linalg.inv(k) + np.diag(om))
    m = s @ (y - 0.5)
    ki = np.linalg.inv(k)
    direct = 0.5 * (np.trace(ki @ s) + m @ ki @ m - 3 + np.linalg.slogdet(k)[1] - np.linalg.slogdet(s)[1])
    assert np.isclose(gaussian_kl_given_omega(k, y, om[None, :])[0], direct, rtol=1e-10)


def test_kl_q_equals_p(rng):
    # prior scale near zero: the f-conditional collapses onto the prior and
    # omega carries no information about f
    n, s = 3, 200
    k = 1e-10 * np.eye(n)
    om = sample_pg(1, np.zeros((s, n)), rng)
    fs = rng.normal(scale=1e-5, size=(s, n))
    kl, se = kl_estimate(k, np.array([1.0, 0.0, 1.0]), om, fs)
    assert abs(kl) < max(3 * se, 1e-8)


def test_mi_term_nonpositive(rng):
    for _ in range(20):
        n = int(rng.integers(2, 5))
        k = random_spd(rng, n, scale=2.0)
        y = rng.integers(0, 2, n).astype(float)
        run = run_gibbs(k, y, 60, rng, burn_in=15, thin=1, n_samples=1)
        per = mutual_information_term(run.omega[0], run.f[0])
        assert per.mean() <= 3 * per.std(ddof=1) / np.sqrt(per.size)


def test_mi_needs_two_samples():
    with pytest.raises(ValueError):
        mutual_information_term(np.ones((1, 2)), np.zeros((1, 2)))


def test_kl_nonnegative(rng):
    for _ in range(5):
        k = random_spd(rng, 4, scale=3.0)
        y = rng.integers(0, 2, 4).astype(float)
        run = run_gibbs(k, y, 200, rng, burn_in=20, thin=1, n_samples=1)
        kl, se = kl_estimate(k, y, run.omega[0], run.f[0])
        assert kl >= -3 * se


def test_bound_report_end_to_end(rng):
    xtr, ytr, xte, yte = separable_client(rng, 64, 200)
    rep = bound_report(xtr, ytr, xte, yte, 0.01, rng, n_kl_samples=100, n_risk_samples=1000)
    assert isinstance(rep, BoundReport)
    for r in (rep.empirical_gibbs_risk, rep.test_gibbs_risk, rep.empirical_bayes_risk, rep.test_bayes_risk):
        assert 0 <= r <= 1
    assert rep.epsilon >= 0
    assert rep.bound >= rep.empirical_gibbs_risk
    assert rep.bound < 0.5
    assert rep.test_gibbs_risk <= rep.bound
    assert rep.test_bayes_risk <= 2 * rep.test_gibbs_risk + 1e-12
    assert rep.empirical_bayes_risk <= 2 * rep.empirical_gibbs_risk + 1e-12
    rec = rep.to_record()
    assert rec["n_train"] == 64 and isinstance(rec["bound"], float)


def test_bound_report_bad_delta(rng):
    xtr, ytr, xte, yte = separable_client(rng, 8, 4)
    with pytest.raises(ValueError):
        bound_report(xtr, ytr, xte, yte, 0.0, rng)
