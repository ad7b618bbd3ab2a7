import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcpo.advantage import (
    additional_cost_diag, combined_advantage, log_mu_weight, mu_weight, normalize, quantile_advantage,
    quantile_at, reward_advantage, smooth_mu,
)
from qcpo.critic import quantile_fractions
from qcpo.oracle import bernoulli_chain, td_identity_check
from qcpo.tail import WeibullParams, weibull_pdf


def test_mu_identical_tails_gives_inverse_gamma():
    p = WeibullParams(1.3, 2.0)
    gamma, q_s = 0.9, 3.0
    assert mu_weight((1 - gamma) * q_s, q_s, p, p, gamma) == pytest.approx(1 / gamma, rel=1e-12)


def test_mu_one_when_numerator_is_gamma_times_denominator():
    # exponential tails: pdf ratio at matching points is controlled by the scale
    gamma, q_s, c = 0.8, 2.0, 0.4
    den = WeibullParams(1.0, 1.0)
    x = (q_s - c) / gamma
    target = gamma * weibull_pdf(q_s, den)
    # solve beta * exp(-x / beta) form numerically for an exponential numerator
    betas = np.linspace(0.05, 50, 200001)
    dens = np.exp(-x / betas) / betas
    beta = betas[np.argmin(np.abs(dens - target))]
    num = WeibullParams(1.0, float(beta))
    assert weibull_pdf(x, num) == pytest.approx(target, rel=1e-3)
    assert mu_weight(c, q_s, num, den, gamma) == pytest.approx(1.0, rel=1e-3)


def test_mu_floor_and_gamma_check():
    p = WeibullParams(2.0, 1.0)
    assert np.isfinite(mu_weight(10.0, 1.0, p, p, 0.9))  # target below zero is floored
    with pytest.raises(ValueError):
        log_mu_weight(0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


def test_mu_nonfinite_names_state():
    p = WeibullParams(3.9, 1e-3)
    with pytest.raises(FloatingPointError, match="cell-7"):
        mu_weight(0.0, 1e3, p, WeibullParams(0.1, 1.0), 0.5, state="cell-7")


def test_mu_has_unit_mean_on_chain():
    rep = td_identity_check(bernoulli_chain(), "s1", u=0.9, n_mc=10**6, seed=0)
    assert abs(rep.mu_z_score) <= 3


@pytest.mark.parametrize("log_mu, expected", [(0.0, 1.0), (2.0, 1.5), (-0.3, 0.7), (-4.0, 0.5)])
def test_smooth_mu_examples(log_mu, expected):
    assert smooth_mu(math.exp(log_mu), 0.5) == pytest.approx(expected, abs=1e-15)
    assert smooth_mu(None, 0.5, log_mu=log_mu) == pytest.approx(expected, abs=1e-15)


def test_smooth_mu_rejects_nonpositive():
    with pytest.raises(ValueError):
        smooth_mu(0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 2.0))
def test_smooth_mu_clamp(log_mu, c_clip):
    v = smooth_mu(None, c_clip, log_mu=log_mu)
    assert 1 - c_clip <= v <= 1 + c_clip
    if abs(log_mu) <= c_clip:
        assert v == pytest.approx(1 + log_mu)


def test_quantile_advantage_examples():
    assert quantile_advantage(1.0, 3.0, 2.0, False, 1.0, smoothed_mu=1.37) == 0.0
    assert quantile_advantage(1.0, 2.0, 2.0, False, 1.0) == 1.0
    assert quantile_advantage(1.0, 2.0, 2.0 / 0.5, False, 0.5) == 1.0
    assert quantile_advantage(1.0, 2.0, 50.0, True, 0.99, smoothed_mu=1.5) == pytest.approx(-1.5)


def test_reward_advantage_examples():
    assert reward_advantage(0.0, 0.0, 0.0, False, 0.99) == 0.0
    assert reward_advantage(1.0, 10.0, 10.0, False, 0.99) == pytest.approx(0.9)
    assert reward_advantage(1.0, 10.0, 10.0, True, 0.99) == pytest.approx(-9.0)


def test_reward_advantage_zero_mean_at_true_values():
    # chain s0 -> s1 -> end with Bernoulli rewards; V is the exact on-policy value
    rng = np.random.default_rng(0)
    gamma, n = 0.9, 200_000
    r1 = rng.random(n) < 0.3
    r0 = rng.random(n) < 0.6
    v1, v0 = 0.3, 0.6 + gamma * 0.3
    adv = np.concatenate([reward_advantage(r0, v0, v1, False, gamma), reward_advantage(r1, v1, 0.0, True, gamma)])
    assert abs(adv.mean()) < 3 * adv.std() / math.sqrt(adv.size)


def test_combined_examples():
    r = np.random.default_rng(0).normal(size=50)
    q = np.random.default_rng(1).normal(size=50)
    out = combined_advantage(r, q, 0.0)
    assert np.array_equal(out, r)
    assert combined_advantage(1.0, 2.0, 0.5) == 0.0
    assert combined_advantage(1.0, 2.5, 0.5) < 0
    with pytest.raises(ValueError):
        combined_advantage(1.0, 1.0, -0.1)


def test_additional_cost_examples():
    assert additional_cost_diag(1.0, 3.0, 5.0, False, 0.9) == 0.0
    assert additional_cost_diag(2.0, 1.0, 3.0, False, 1.0) == 4.0


def test_additional_cost_form_matches_weighted_td_in_expectation():
    rng = np.random.default_rng(5)
    for _ in range(20):
        k = 6
        p = rng.dirichlet(np.ones(k))
        mu = rng.exponential(size=k)
        mu /= p @ mu  # unit mean under the behaviour distribution
        c, qn, q_s, gamma = rng.uniform(0, 2, k), rng.uniform(0, 5, k), rng.uniform(0, 5), 0.95
        lhs = p @ (c + additional_cost_diag(mu, c, qn, False, gamma) + gamma * qn - q_s)
        rhs = p @ (mu * (c + gamma * qn - q_s))
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_quantile_at_grid_and_interpolation():
    u = quantile_fractions(25)
    q = np.arange(25.0)
    assert quantile_at(q, u, 0.9) == 22.0
    assert quantile_at(q, u, 0.8) == pytest.approx(19.5)
    assert quantile_at(q, u, 0.999) == 24.0
    qb = np.stack([q, 2 * q])
    np.testing.assert_allclose(quantile_at(qb, u, 0.8), [19.5, 39.0])


def test_normalize():
    x = normalize(np.array([1.0, 2.0, 3.0, 10.0]))
    assert x.mean() == pytest.approx(0, abs=1e-12)
    assert x.std() == pytest.approx(1, abs=1e-6)
