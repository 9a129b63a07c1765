import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from safeflow.special import (
    INV_E,
    MatchingProblem,
    display_residual,
    gaussian_force_magnitude,
    lambert_w0,
    match_bandwidth,
    matching_residual,
    positive_argument_sigma,
    spell_magnitude,
)
from safeflow.verify import random_matching_problem
from safeflow import rng


def test_lambert_examples():
    assert lambert_w0(0.0) == 0.0
    assert lambert_w0(-INV_E) == pytest.approx(-1.0, abs=1e-12)
    # bisection oracle on w e^w = 1
    oracle = brentq(lambda w: w * math.exp(w) - 1.0, 0.0, 1.0, xtol=1e-15)
    assert lambert_w0(1.0) == pytest.approx(oracle, abs=1e-14)
    assert lambert_w0(1.0) == pytest.approx(0.567143, abs=1e-6)


def test_lambert_domain_error():
    with pytest.raises(ValueError):
        lambert_w0(-0.5)


def test_lambert_residual_logspaced():
    zs = np.concatenate([-INV_E + np.logspace(-9, math.log10(INV_E), 500), np.logspace(-6, 6, 500)])
    for z in zs:
        w = lambert_w0(float(z))
        assert w >= -1.0
        assert abs(w * math.exp(w) - z) <= 1e-12 * max(1.0, abs(z))


def test_lambert_monotone():
    zs = np.linspace(-INV_E + 1e-12, 50.0, 5000)
    ws = np.array([lambert_w0(float(z)) for z in zs])
    assert np.all(np.diff(ws) > 0)


def test_matching_example_unit():
    p = MatchingProblem(1.0, 1.0, 1.0, 0.5)
    sigma = match_bandwidth(p)
    a = spell_magnitude(1.0, 1.0, 0.5)
    b = gaussian_force_magnitude(1.0, sigma, 0.5)
    assert abs(a - b) / a < 1e-9
    assert matching_residual(p, sigma) < 1e-9


def test_matching_infeasible():
    with pytest.raises(ValueError, match="1/e"):
        match_bandwidth(MatchingProblem(1.0, 1.0, 4.0, 2.0))
    with pytest.raises(ValueError):
        MatchingProblem(1.0, 1.0, 1.0, 0.0)


def test_matching_small_d0_limit():
    # argument -> 0 and W0(-a) ~ -a, so sigma^2 ~ 2 lambda d0 / (alpha (r - d0)) -> 0
    for d in (1e-4, 1e-6, 1e-8):
        s2 = match_bandwidth(MatchingProblem(1.5, 0.7, 1.0, d)) ** 2
        assert s2 == pytest.approx(2 * 0.7 * d / (1.5 * (1.0 - d)), rel=10 * d)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_matching_soundness(seed):
    p = random_matching_problem(rng.generator(seed, 0, rng.TRIAL))
    sigma = match_bandwidth(p)
    m_s = spell_magnitude(p.alpha, p.r, p.d0)
    assert abs(m_s - gaussian_force_magnitude(p.lambda_g, sigma, p.d0)) / m_s < 1e-9
    assert matching_residual(p, sigma) < 1e-9


def test_display_variant_off_by_d0_squared():
    # the variant with 2 lambda / (alpha d0) on the right is a different equation:
    # at the force-balance sigma its relative residual is |d0^2 - 1|
    for d0 in (0.3, 0.5, 0.9):
        p = MatchingProblem(1.0, 1.0, 1.0, d0)
        assert display_residual(p, match_bandwidth(p)) == pytest.approx(abs(d0 ** 2 - 1), rel=1e-9)


def test_positive_argument_form_does_not_balance_forces():
    p = MatchingProblem(1.0, 1.0, 1.0, 0.5)
    sigma = positive_argument_sigma(p.r, p.d0)
    assert matching_residual(p, sigma) > 1.0
    m_s = spell_magnitude(1.0, 1.0, 0.5)
    assert abs(m_s - gaussian_force_magnitude(1.0, sigma, 0.5)) / m_s > 0.1
