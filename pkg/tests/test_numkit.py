import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exefuse.numkit import (
    Adam,
    finite_difference_check,
    gelu,
    gelu_grad,
    hadamard,
    kmeans,
    make_rng,
    sigmoid,
    softmax,
)

finite = st.floats(-30, 30, allow_nan=False)


def phi_series(x: float) -> float:
    """Gaussian CDF from the Maclaurin series of erf (independent of scipy)."""
    z = x / math.sqrt(2.0)
    total, term, n = 0.0, z, 0
    while abs(term) > 1e-18:
        total += term / (2 * n + 1)
        n += 1
        term = -term * z * z / n
    return 0.5 * (1.0 + 2.0 / math.sqrt(math.pi) * total)


def test_gelu_zero():
    assert gelu(0.0) == 0.0


def test_gelu_one_is_phi_one():
    assert abs(float(gelu(1.0)) - phi_series(1.0)) < 1e-12
    assert abs(float(gelu(1.0)) - 0.841345) < 1e-6


@settings(max_examples=200)
@given(st.floats(-8, 8, allow_nan=False))
def test_gelu_odd_part_identity(x):
    lhs = float(gelu(x) + gelu(-x))
    # 2*Phi(x) - 1 = erf(x / sqrt 2); stdlib erf keeps this independent of scipy
    rhs = x * math.erf(x / math.sqrt(2.0))
    assert abs(lhs - rhs) < 1e-12


@settings(max_examples=100)
@given(st.floats(-6, 6, allow_nan=False))
def test_gelu_grad_matches_central_difference(x):
    h = 1e-6
    num = (float(gelu(x + h)) - float(gelu(x - h))) / (2 * h)
    assert abs(float(gelu_grad(x)) - num) < 1e-7


def test_softmax_closed_forms():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-12, rtol=0)
    np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-12, rtol=0)


@settings(max_examples=100)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-100, 100))
def test_softmax_shift_invariant_and_a_distribution(v, c):
    p = softmax(v)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(softmax(v + c), p, atol=1e-12, rtol=0)


def test_softmax_survives_huge_logits():
    p = softmax([1e308, 0.0])
    assert np.all(np.isfinite(p))


def test_sigmoid_half_at_zero_and_open_interval():
    assert float(sigmoid(np.array([0.0]))[0]) == 0.5
    p = sigmoid(np.linspace(-30, 30, 1001))
    assert np.all((p > 0) & (p < 1))
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))


@settings(max_examples=50)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_hadamard_identities(a, b):
    np.testing.assert_array_equal(hadamard(a, np.ones(5)), a)
    np.testing.assert_array_equal(hadamard(a, np.zeros(5)), np.zeros(5))
    np.testing.assert_array_equal(hadamard(a, b), hadamard(b, a))


def test_hadamard_dim_mismatch():
    with pytest.raises(ValueError):
        hadamard(np.ones(3), np.ones(4))


def test_rng_streams_reproducible_and_distinct():
    a = make_rng(5, 1).random(4)
    np.testing.assert_array_equal(a, make_rng(5, 1).random(4))
    assert not np.array_equal(a, make_rng(5, 2).random(4))


def test_kmeans_k_equals_n_is_fixpoint(rng):
    pts = rng.normal(size=(6, 3))
    cents = kmeans(pts, 6, seed=0)
    assert sorted(map(tuple, cents.round(12))) == sorted(map(tuple, pts.round(12)))


def test_kmeans_recovers_blob_means():
    r = make_rng(9)
    means = np.array([[0.0, 0.0], [10.0, 10.0]])
    pts = np.vstack([m + 0.3 * r.normal(size=(200, 2)) for m in means])
    cents = kmeans(pts, 2, seed=3)
    cents = cents[np.argsort(cents[:, 0])]
    # sample means are the exact fixpoint; blob means within 0.1
    assert np.abs(cents - means).max() < 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_kmeans_sse_monotone_hull_and_count(seed, k):
    pts = make_rng(seed).normal(size=(40, 3))
    cents, sse = kmeans(pts, k, seed, return_sse=True)
    assert cents.shape == (k, 3)
    assert all(b <= a + 1e-9 for a, b in zip(sse, sse[1:]))
    lo, hi = pts.min(0) - 1e-12, pts.max(0) + 1e-12
    assert np.all((cents >= lo) & (cents <= hi))


def test_kmeans_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4, seed=0)


def test_kmeans_deterministic(rng):
    pts = rng.normal(size=(50, 4))
    np.testing.assert_array_equal(kmeans(pts, 5, 11), kmeans(pts, 5, 11))


def test_fd_check_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    params = {"x": np.array([0.7, -1.3])}

    def loss(p):
        x = p["x"]
        return float(x @ A @ x), {"x": 2 * A @ x}

    assert finite_difference_check(loss, params) < 1e-9


def test_fd_check_zero_gradient_point():
    params = {"x": np.zeros(3)}

    def loss(p):
        return float((p["x"] ** 2).sum()), {"x": 2 * p["x"]}

    _, g = loss(params)
    assert np.all(g["x"] == 0)
    assert finite_difference_check(loss, params) < 1e-4


def test_fd_check_flags_wrong_gradient():
    params = {"x": np.array([1.0, 2.0])}

    def loss(p):
        return float((p["x"] ** 2).sum()), {"x": 3 * p["x"]}

    assert finite_difference_check(loss, params) > 0.1


def test_adam_minimises_a_bowl():
    params = {"x": np.array([3.0, -2.0])}
    opt = Adam(params, lr=0.1)
    for _ in range(500):
        opt.step(params, {"x": 2 * params["x"]})
    assert np.abs(params["x"]).max() < 1e-2
