import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize

from dpsw.errors import InvalidInputError, InvalidParameterError
from dpsw.nnet import autodiff as ad
from dpsw.softrank import hard_rank, isotonic_regression, soft_rank, soft_rank_t, soft_rank_vjp

from conftest import central_diff, rel_err

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(min_size=1, max_size=30):
    return arrays(np.float64, st.integers(min_size, max_size), elements=finite)


def brute_isotonic(y):
    """Oracle: constrained least squares over nondecreasing vectors."""
    n = len(y)
    cons = [{"type": "ineq", "fun": lambda x, i=i: x[i + 1] - x[i]} for i in range(n - 1)]
    res = minimize(lambda x: np.sum((x - y) ** 2), np.full(n, np.mean(y)), constraints=cons,
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


def brute_permutahedron_projection(z):
    """Oracle for small n: minimize ||r - z||^2 over the permutahedron via its vertices."""
    n = len(z)
    verts = np.array(list(itertools.permutations(range(1, n + 1))), dtype=float)
    # solve the QP over convex combinations of vertices
    k = len(verts)
    obj = lambda lam: np.sum((lam @ verts - z) ** 2)
    cons = [{"type": "eq", "fun": lambda lam: lam.sum() - 1}]
    res = minimize(obj, np.full(k, 1 / k), bounds=[(0, 1)] * k, constraints=cons, method="SLSQP",
                   options={"ftol": 1e-15, "maxiter": 1000})
    return res.x @ verts


class TestHardRank:
    @pytest.mark.parametrize("w, expected", [([5, 1, 3], [3, 1, 2]), ([1, 2, 3], [1, 2, 3]), ([2, 2], [1, 2])])
    def test_examples(self, w, expected):
        np.testing.assert_array_equal(hard_rank(w).values, expected)
        assert hard_rank(w).epsilon == 0

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            hard_rank([1.0, np.nan])
        with pytest.raises(InvalidInputError):
            hard_rank([])

    @given(vectors())
    def test_bijection(self, w):
        r = hard_rank(w).values
        np.testing.assert_array_equal(np.sort(r), np.arange(1, len(w) + 1))

    def test_descending_via_negation(self):
        np.testing.assert_array_equal(hard_rank(-np.array([5.0, 1, 3])).values, [1, 3, 2])


class TestIsotonic:
    @pytest.mark.parametrize("y, expected", [([1, 2, 3], [1, 2, 3]), ([3, 1], [2, 2]), ([4, 2, 6], [3, 3, 6])])
    def test_examples(self, y, expected):
        np.testing.assert_allclose(isotonic_regression(y), expected, atol=1e-12)

    def test_matches_qp_oracle(self, rng):
        for _ in range(15):
            y = rng.normal(size=rng.integers(2, 9))
            np.testing.assert_allclose(isotonic_regression(y), brute_isotonic(y), atol=1e-5)

    @given(vectors())
    def test_monotone_and_mean_preserving(self, y):
        fit = isotonic_regression(y)
        assert np.all(np.diff(fit) >= -1e-9 * (1 + np.abs(fit[:-1])))
        assert np.isclose(fit.sum(), y.sum(), rtol=1e-9, atol=1e-6)


class TestSoftRank:
    def test_constant_input_is_centroid(self):
        np.testing.assert_allclose(soft_rank([7.0, 7.0, 7.0], 0.1).values, [2, 2, 2])

    def test_small_epsilon_recovers_hard(self):
        np.testing.assert_allclose(soft_rank([1.0, 2.0, 3.0], 1e-6).values, [1, 2, 3], atol=1e-3)

    def test_bad_epsilon(self):
        for eps in (0.0, -1.0):
            with pytest.raises(InvalidParameterError):
                soft_rank([1.0, 2.0], eps)

    def test_matches_projection_oracle(self, rng):
        for _ in range(6):
            w = rng.normal(size=4)
            eps = float(rng.uniform(0.2, 3.0))
            np.testing.assert_allclose(soft_rank(w, eps).values, brute_permutahedron_projection(w / eps), atol=1e-4)

    @given(vectors(), st.floats(1e-3, 1e3))
    def test_sum_and_bounds(self, w, eps):
        r = soft_rank(w, eps).values
        n = len(w)
        assert abs(r.sum() - n * (n + 1) / 2) <= 1e-9 * n * n
        assert r.min() >= 1 - 1e-9 and r.max() <= n + 1e-9

    @given(vectors(2), st.floats(1e-2, 10), st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, w, eps, rnd):
        perm = list(range(len(w)))
        rnd.shuffle(perm)
        np.testing.assert_allclose(soft_rank(w[perm], eps).values, soft_rank(w, eps).values[perm], atol=1e-9)

    @given(vectors(2), st.floats(1e-2, 10), st.floats(-100, 100))
    def test_shift_invariance(self, w, eps, c):
        np.testing.assert_allclose(soft_rank(w + c, eps).values, soft_rank(w, eps).values, atol=1e-6)


class TestSoftRankGradient:
    def test_vjp_matches_finite_differences_singletons(self, rng):
        w = np.array([0.0, 3.0, 1.0, 7.0, 5.0])
        eps = 0.5  # gaps exceed eps so each block is a singleton
        for i in range(5):
            u = np.eye(5)[i]
            fd = central_diff(lambda x: soft_rank(x, eps).values @ u, w)
            assert rel_err(soft_rank_vjp(w, eps, u), fd) <= 1e-6

    def test_vjp_matches_finite_differences_pooled(self, rng):
        w = rng.normal(size=8) * 0.3
        eps = 1.0  # heavy pooling, generic point
        u = rng.normal(size=8)
        fd = central_diff(lambda x: soft_rank(x, eps).values @ u, w)
        assert rel_err(soft_rank_vjp(w, eps, u), fd) <= 1e-6

    def test_constant_input_perturbed(self, rng):
        w = np.full(4, 2.0) + rng.normal(size=4) * 1e-3
        u = rng.normal(size=4)
        fd = central_diff(lambda x: soft_rank(x, 1.0).values @ u, w, h=1e-7)
        assert rel_err(soft_rank_vjp(w, 1.0, u), fd) <= 1e-6

    def test_zero_upstream(self, rng):
        np.testing.assert_array_equal(soft_rank_vjp(rng.normal(size=6), 0.3, np.zeros(6)), np.zeros(6))

    def test_tensor_node_matches_vjp(self, rng):
        w = rng.normal(size=7)
        u = rng.normal(size=7)
        t = ad.Tensor(w, requires_grad=True)
        tape = ad.backward((soft_rank_t(t, 0.4) * u).sum(), {"w": t})
        np.testing.assert_allclose(tape.grads["w"], soft_rank_vjp(w, 0.4, u), atol=1e-12)

    def test_upstream_shape_checked(self):
        with pytest.raises(InvalidInputError):
            soft_rank_vjp([1.0, 2.0], 1.0, [1.0])
