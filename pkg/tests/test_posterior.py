import inspect

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from synthverify.posterior import (
    GRID_POINTS,
    mcmc_r_oracle,
    posterior_count,
    posterior_r,
    theta_decision,
)

STEP = 1.0 / (GRID_POINTS - 1)


def tv_against_draws(post, draws, bins=50):
    edges = np.linspace(0, 1, bins + 1)
    hist = np.histogram(draws, edges)[0] / len(draws)
    idx = np.clip(np.digitize(post.grid, edges) - 1, 0, bins - 1)
    return 0.5 * np.abs(hist - np.bincount(idx, weights=post.density, minlength=bins)).sum()


def test_noiseless_limit_mode():
    post = posterior_r(37.0, 50, 1e6)
    assert abs(post.mode - 0.74) <= STEP
    ref = stats.beta(38, 14).pdf(post.grid)
    assert 0.5 * np.abs(post.density - ref / ref.sum()).sum() <= 1e-3


def test_symmetric_case():
    assert abs(posterior_r(25.0, 50, 1.0).mode - 0.5) <= 0.02


def test_count_above_M():
    assert posterior_r(53.0, 50, 1.0).mode >= 0.97


def test_out_of_range_input_is_valid():
    post = posterior_r(-7.5, 10, 0.5)
    assert post.mode < 0.2
    assert post.density.sum() == pytest.approx(1.0, abs=1e-12)


def test_theta_decision():
    near_one = posterior_r(1000.0, 1000, 1e6)
    near_zero = posterior_r(0.0, 1000, 1e6)
    assert theta_decision(near_one, 0.9) == 1
    assert theta_decision(near_zero, 0.9) == 0
    assert theta_decision(posterior_r(50.0, 50, 1.0), 0.95) == 1
    with pytest.raises(ValueError):
        theta_decision(near_one, 1.0)


def test_summary_fields():
    post = posterior_r(30.0, 50, 1.0)
    lo, hi = post.ci95
    assert lo <= post.mode <= hi
    assert post.density[post.grid == post.mode][0] == post.density.max()
    doc = post.to_json(full=True)
    assert len(doc["density"]) == GRID_POINTS
    assert doc["inputs"] == {"S_noisy": 30.0, "M": 50, "epsilon": 1.0}


def test_uses_only_public_inputs():
    # the signature carries nothing but the released count and the query's public settings
    params = list(inspect.signature(posterior_r).parameters)
    assert params == ["s_noisy", "M", "epsilon", "sensitivity", "grid_points"]


def test_posterior_count_is_normalized():
    w = posterior_count(3.2, 10, 1.0, 2.0)
    assert w.sum() == pytest.approx(1.0)
    assert int(np.argmax(w)) == 3


def test_oracle_agrees_on_reference_case():
    post = posterior_r(40.0, 50, 1.0)
    assert tv_against_draws(post, mcmc_r_oracle(40.0, 50, 1.0, seed=1)) <= 0.02


def test_oracle_noiseless_moments():
    draws = mcmc_r_oracle(20.0, 50, 1e6, seed=2)
    ref = stats.beta(21, 31)
    assert round(draws.mean(), 2) == round(ref.mean(), 2)
    assert round(draws.std(), 2) == round(ref.std(), 2)


def test_oracle_mode_agrees_under_heavy_noise():
    draws = mcmc_r_oracle(10.0, 50, 0.1, seed=3)
    post = posterior_r(10.0, 50, 0.1)
    kde = stats.gaussian_kde(draws)
    grid = np.linspace(0, 1, 1001)
    # reflect at the boundaries so the estimate is not biased down near 0
    dens = kde(grid) + kde(-grid) + kde(2 - grid)
    assert abs(grid[np.argmax(dens)] - post.mode) <= 0.03


def test_oracle_rejects_small_draws():
    with pytest.raises(ValueError):
        mcmc_r_oracle(1.0, 10, 1.0, draws=1000)


triples = st.tuples(st.integers(1, 300), st.floats(0.05, 50.0), st.floats(-20, 320, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(triples)
def test_normalized(triple):
    M, eps, s = triple
    post = posterior_r(s, M, eps)
    assert (post.density >= 0).all()
    assert post.density.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("M,eps", [(10, 0.1), (50, 1.0), (200, 10.0), (5, 3.0)])
def test_mean_is_monotone_in_released_count(M, eps):
    means = [posterior_r(s, M, eps).mean for s in np.linspace(-5, M + 5, 121)]
    assert all(b >= a - 1e-12 for a, b in zip(means, means[1:]))
