import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeflow import rng
from safeflow.metrics import mmd_to_target, unsafe_rate, w2_squared
from safeflow.verify import brute_force_w2


def test_w2_examples():
    a = np.random.default_rng(0).normal(size=(10, 2))
    assert w2_squared(a, a) == 0.0
    assert w2_squared([[1.0, 2.0]], [[4.0, 6.0]]) == 25.0


def test_w2_size_mismatch():
    with pytest.raises(ValueError):
        w2_squared(np.zeros((3, 2)), np.zeros((4, 2)))


def test_w2_six_points_brute_force():
    gen = rng.generator(1, 0, rng.TRIAL)
    a, b = gen.normal(size=(6, 2)), gen.normal(size=(6, 2))
    assert w2_squared(a, b) == brute_force_w2(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 7))
def test_w2_exact_small(seed, n):
    gen = rng.generator(seed, 0, rng.TRIAL)
    a, b = gen.normal(size=(n, 2)), gen.normal(size=(n, 2))
    assert w2_squared(a, b) == brute_force_w2(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.1, 10.0))
def test_w2_invariances(seed, c):
    gen = rng.generator(seed, 0, rng.TRIAL)
    a, b = gen.normal(size=(30, 2)), gen.normal(size=(30, 2))
    base = w2_squared(a, b)
    assert w2_squared(gen.permutation(a), gen.permutation(b)) == pytest.approx(base, rel=1e-12)
    assert w2_squared(c * a, c * b) == pytest.approx(c * c * base, rel=1e-10)
    d = gen.normal(size=(30, 2))
    assert np.sqrt(w2_squared(a, d)) <= np.sqrt(base) + np.sqrt(w2_squared(b, d)) + 1e-9


def test_unsafe_rate_examples():
    c = np.array([4.0, 0.0])
    assert unsafe_rate(np.tile(c, (5, 1)), c, 1.2) == 1.0
    assert unsafe_rate(c + np.array([[2.4, 0.0], [0.0, -2.4]]), c, 1.2) == 0.0
    pts = c + np.array([[0.1, 0.0], [0.0, 1.2], [-0.5, 0.5], [3.0, 0.0]])
    assert unsafe_rate(pts, c, 1.2) == 0.75
    with pytest.raises(ValueError):
        unsafe_rate(pts, c, 0.0)


def test_mmd_to_target_examples():
    gen = rng.generator(2, 0, rng.TRIAL)
    x = gen.normal(size=(8, 2))
    assert mmd_to_target(x, x, 1.0) == pytest.approx(0.0, abs=1e-15)
    far = mmd_to_target(x, x + 1e3, 50.0)
    # cross terms vanish: only the two self averages remain
    kx = np.exp(-50.0 * ((x[:, None] - x[None]) ** 2).sum(-1)).mean()
    assert far == pytest.approx(2 * kx, rel=1e-12)
    assert far <= 2.0


def test_mmd_to_target_hand_sums():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    y = np.array([[0.5, 0.5], [2.0, 0.0], [0.0, -1.0]])
    g = 0.7

    def k(a, b):
        return np.exp(-g * np.sum((a - b) ** 2))

    xx = sum(k(a, b) for a in x for b in x) / 9
    yy = sum(k(a, b) for a in y for b in y) / 9
    xy = sum(k(a, b) for a in x for b in y) / 9
    assert mmd_to_target(x, y, g) == pytest.approx(xx + yy - 2 * xy, rel=1e-13)
