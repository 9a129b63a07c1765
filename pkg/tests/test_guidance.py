import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from safeflow import rng
from safeflow.guidance import (
    GuidanceSpec,
    Schedule,
    beta_hat,
    evaluate_guidance,
    field_value,
    lambda_at,
    random_instance,
    safe_denoiser_direction,
    spell_force,
    unsafe_mean,
    verify_prop1,
    verify_spell_as_mmd,
)
from safeflow.kernel import KernelConfig, gamma_to_sigma, grad_mmd2, kernel_mass
from safeflow.special import MatchingProblem


def test_schedule_examples():
    s = Schedule(1.0, 0.6, 0.03)
    assert lambda_at(s, 0.8) == 0.03
    for mode in ("equal_strength", "shifted_window"):
        assert lambda_at(Schedule(1.0, 0.6, 0.03, mode), 0.3) == 0.0
    eb = Schedule(1.0, 0.4, 0.03, "equal_budget", 0.2)
    assert lambda_at(eb, 0.7) == pytest.approx(0.01, rel=1e-14)
    assert lambda_at(Schedule(1.0, 0.6, 0.03, "equal_budget", 0.2), 0.3) == 0.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(1.0, 1.0, 0.1, "equal_budget", 0.2)
    with pytest.raises(ValueError):
        Schedule(0.4, 0.6)
    with pytest.raises(ValueError):
        Schedule(1.0, 0.0, 0.1, "bogus")
    with pytest.raises(ValueError):
        lambda_at(Schedule(), 1.5)


def _trapezoid_budget(s: Schedule, n: int = 10_000) -> float:
    # the step edges are resolved by placing the grid exactly on them
    t = np.linspace(s.t_end, s.t_start, n)
    return float(np.trapezoid([s.lambda_at(v) for v in t], t))


@pytest.mark.parametrize("windows", [((1.0, 0.8), (1.0, 0.4)), ((1.0, 0.8), (0.6, 0.05)), ((0.9, 0.7), (1.0, 0.0))])
def test_equal_budget_conserved(windows):
    a, b = (Schedule(w[0], w[1], 0.03, "equal_budget", 0.2) for w in windows)
    assert _trapezoid_budget(a) == pytest.approx(_trapezoid_budget(b), rel=1e-6)
    assert a.budget == pytest.approx(0.03 * 0.2, rel=1e-14)


def test_forward_window_map():
    assert Schedule(1.0, 0.5, 0.1).forward_window() == (0.0, 0.5)
    assert Schedule(0.8, 0.3).forward_window() == pytest.approx((0.2, 0.7), abs=1e-16)


def test_spell_examples():
    y = np.array([[0.0, 0.0]])
    assert np.all(spell_force([2.0, 0.0], y, 2.0, 1.0) == 0.0)
    assert spell_force([0.75, 0.0], y, 1.5, 1.0) == pytest.approx([0.75, 0.0], rel=1e-14)
    sym = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert np.allclose(spell_force([0.0, 0.0], sym, 2.0, 1.0), 0.0, atol=1e-15)


def test_spell_coincident_flag():
    y = np.array([[0.0, 0.0], [0.5, 0.0]])
    f, flag = spell_force([0.0, 0.0], y, 1.0, 1.0, return_flags=True)
    assert flag
    assert f == pytest.approx([-0.5, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_spell_sparsity_is_exact_zero(seed):
    gen = rng.generator(seed, 0, rng.TRIAL)
    y = gen.normal(size=(6, 2))
    z = y[0] + 5.0 * gen.normal(size=2)
    r = float(np.min(np.linalg.norm(y - z, axis=1)))
    assert np.all(spell_force(z, y, r, 2.0) == 0.0)
    assert np.all(spell_force(z, y, 0.999 * r, 2.0) == 0.0)


def test_unsafe_mean_examples():
    y = np.array([[1.0, 2.0]])
    assert unsafe_mean([5.0, 5.0], y, 0.3) == pytest.approx([1.0, 2.0])
    y2 = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert unsafe_mean([0.0, 3.0], y2, 0.3) == pytest.approx([0.0, 0.0], abs=1e-15)
    y3 = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    z = np.array([0.4, 0.2])
    w = softmax(-0.8 * np.sum((y3 - z) ** 2, axis=1))
    assert unsafe_mean(z, y3, 0.8) == pytest.approx(w @ y3, rel=1e-13)


def test_unsafe_mean_underflow_fallback():
    y = np.array([[0.0, 0.0], [10.0, 0.0]])
    m, flag = unsafe_mean([1e4, 1.0], y, 5.0, return_flags=True)
    assert flag
    assert m == pytest.approx([10.0, 0.0])


def test_beta_hat_examples():
    y = np.array([[0.3, 0.3]])
    assert beta_hat([0.3, 0.3], y, 1.0, 2.5) == pytest.approx(2.5)
    assert beta_hat([1e4, 0.0], y, 10.0, 1.0) == 0.0
    # kernel values e^-1 and e^-2 at gamma = 1: (e^-1 + e^-2) / 2 = 0.2516074
    y2 = np.array([[1.0, 0.0], [0.0, math.sqrt(2)]])
    assert beta_hat([0.0, 0.0], y2, 1.0, 1.0) == pytest.approx((math.exp(-1) + math.exp(-2)) / 2, rel=1e-14)
    assert beta_hat([0.0, 0.0], y2, 1.0, 1.0) == pytest.approx(0.2516074, abs=1e-7)


def test_beta_hat_monotone_in_distance():
    y = np.array([[0.0, 0.0]])
    vals = [beta_hat([d, 0.0], y, 0.5, 1.0) for d in np.linspace(0, 4, 20)]
    assert np.all(np.diff(vals) < 0)


def test_safe_denoiser_direction_examples():
    y = np.array([[1.0, -1.0]])
    z = np.array([0.5, 2.0])
    assert safe_denoiser_direction(z, y, 0.7) == pytest.approx(z - y[0])
    sym = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert np.allclose(safe_denoiser_direction([0.0, 0.0], sym, 0.7), 0.0, atol=1e-15)


def test_prop1_identity_random_2d():
    gen = rng.generator(4, 0, rng.TRIAL)
    z, neg, gamma = random_instance(gen, 2)
    lhs = safe_denoiser_direction(z, neg, gamma)
    rhs = gamma_to_sigma(gamma) ** 2 / (2 * kernel_mass(z, neg, gamma)) * grad_mmd2(z, neg, gamma)
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs) < 1e-10


@pytest.mark.parametrize("dim", [2, 4, 8])
def test_verify_prop1(dim):
    rep = verify_prop1(100, dim, seed=1)
    assert rep.passed and rep.max_error < 1e-10


def test_verify_prop1_single_point():
    z = np.array([0.2, 0.1])
    assert np.all(safe_denoiser_direction(z, z[None], 1.0) == 0.0)
    assert np.all(grad_mmd2(z, z[None], 1.0) == 0.0)


def test_verify_prop1_negative_control():
    rep = verify_prop1(20, 2, seed=0, kde_gamma_factor=1.7)
    assert not rep.passed
    assert rep.failures[0]["seed"] == 0


def test_verify_spell_as_mmd():
    rep = verify_spell_as_mmd(MatchingProblem(1.0, 1.0, 1.0, 0.5), probe_count=16)
    assert rep.passed
    assert rep.extra["min_cosine"] > 1 - 1e-12
    assert rep.extra["outside_spell_max"] == 0.0
    assert rep.extra["outside_mmd_min"] > 0.0


def test_evaluate_guidance_window_and_composition():
    gen = rng.generator(9, 0, rng.TRIAL)
    z, neg, gamma = random_instance(gen, 2)
    spec = GuidanceSpec("mmd", Schedule(1.0, 0.5, 0.02), KernelConfig(gamma))
    assert np.all(evaluate_guidance(spec, z, 0.3, neg) == 0.0)
    assert evaluate_guidance(spec, z, 0.7, neg) == pytest.approx(0.02 * grad_mmd2(z, neg, gamma), rel=1e-14)
    ks = GuidanceSpec("mmd", Schedule(1.0, 0.5, 0.02), KernelConfig(gamma), mmd_scale="kernel_sum")
    assert evaluate_guidance(ks, z, 0.7, neg) == pytest.approx(
        0.02 * len(neg) / 2 * grad_mmd2(z, neg, gamma), rel=1e-14)


@pytest.mark.parametrize("field", ["mmd", "spell", "safe_denoiser"])
def test_window_causality_all_fields(field):
    spec = GuidanceSpec(field, Schedule(0.8, 0.4, 0.5), KernelConfig(1.0), r=3.0)
    neg = np.array([[0.0, 0.0], [1.0, 1.0]])
    for t in (0.0, 0.2, 0.39, 0.81, 1.0):
        assert np.all(evaluate_guidance(spec, [0.3, 0.2], t, neg) == 0.0)


def test_safe_denoiser_proportional_to_mmd():
    gen = rng.generator(10, 0, rng.TRIAL)
    z, neg, gamma = random_instance(gen, 3)
    sched = Schedule(1.0, 0.0, 0.1)
    sd = evaluate_guidance(GuidanceSpec("safe_denoiser", sched, KernelConfig(gamma), eta=0.7), z, 0.5, neg)
    mmd = evaluate_guidance(GuidanceSpec("mmd", sched, KernelConfig(gamma)), z, 0.5, neg)
    factor = beta_hat(z, neg, gamma, 0.7) * gamma_to_sigma(gamma) ** 2 / (2 * kernel_mass(z, neg, gamma))
    assert sd == pytest.approx(factor * mmd, rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(["mmd", "spell", "safe_denoiser"]))
def test_fields_translation_equivariant(seed, field):
    gen = rng.generator(seed, 0, rng.TRIAL)
    z, neg, gamma = random_instance(gen, 2)
    c = gen.normal(scale=5.0, size=2)
    spec = GuidanceSpec(field, Schedule(1.0, 0.0, 1.0), KernelConfig(gamma), r=2.0)
    a = field_value(spec, z + c, neg + c)
    b = field_value(spec, z, neg)
    assert np.allclose(a, b, rtol=1e-8, atol=1e-12)


def test_beta_min_threshold():
    neg = np.array([[0.0, 0.0]])
    spec = GuidanceSpec("safe_denoiser", Schedule(1.0, 0.0, 1.0), KernelConfig(1.0), beta_min=0.5)
    assert np.all(field_value(spec, [2.0, 0.0], neg) == 0.0)   # beta_hat = e^-4 < 0.5
    assert np.any(field_value(spec, [0.3, 0.0], neg) != 0.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        GuidanceSpec("spell", r=0.0)
    with pytest.raises(ValueError):
        GuidanceSpec("safe_denoiser", eta=0.0)
    with pytest.raises(ValueError):
        GuidanceSpec("classifier")
