import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpsw.errors import ConfigurationError, EmptyGroupError, InvalidInputError, InvalidParameterError, PositivityError
from dpsw.gpd import gpd_quantile, tail_size
from dpsw.nnet import autodiff as ad
from dpsw.smoothing import (
    Scheme,
    WeightVector,
    apply_scheme,
    crump_thresholds,
    ignore_mask,
    ipw_weights,
    pareto_smooth_diff,
    pareto_smooth_diff_t,
    pareto_smooth_hard,
    self_normalize,
    self_normalize_t,
    sigmoid_gate,
    truncate,
)
from dpsw.softrank import soft_rank

from conftest import central_diff, rel_err

positive = arrays(np.float64, st.integers(3, 60), elements=st.floats(0.05, 500))


def lognormal(rng, n=100):
    return np.exp(rng.normal(size=n))


class TestIPW:
    def test_examples(self):
        assert ipw_weights([0.25], [1], 0.5).values[0] == pytest.approx(4.0)
        assert ipw_weights([0.5], [0], 0.8).values[0] == pytest.approx(1.25)

    def test_no_confounding_gives_two(self):
        a = np.array([1, 0, 1, 1])
        p = 0.7
        pi_a = np.where(a == 1, p, 1 - p)
        np.testing.assert_allclose(ipw_weights(pi_a, a, p).values, 2.0)

    def test_positivity(self):
        for bad in (0.0, 1.0, 1.2):
            with pytest.raises(PositivityError):
                ipw_weights([0.5, bad], [1, 0], 0.5)
        with pytest.raises(InvalidParameterError):
            ipw_weights([0.5], [1], 1.0)


class TestSimpleSchemes:
    def test_truncate_examples(self):
        np.testing.assert_allclose(truncate([0.05, 5.0, 20.0], 0.1, 10.0).values, [0.1, 5.0, 10.0])
        with pytest.raises(InvalidParameterError):
            truncate([1.0], 2.0, 1.0)

    def test_crump_thresholds(self):
        L, U = crump_thresholds(np.array([1, 0]), 0.5)
        np.testing.assert_allclose(L, 1 + (1 / 0.9 - 1))
        np.testing.assert_allclose(U, 1 + (1 / 0.1 - 1))

    def test_self_normalize_examples(self):
        np.testing.assert_allclose(self_normalize([2.0, 4.0], [1, 1]).values, [2 / 3, 4 / 3])
        np.testing.assert_allclose(self_normalize([2.0, 4.0, 6.0], [1, 1, 0]).values, [2 / 3, 4 / 3, 1])
        np.testing.assert_allclose(self_normalize([3.0, 3.0, 5.0], [0, 0, 1]).values, [1, 1, 1])

    def test_self_normalize_zero_group(self):
        with pytest.raises(EmptyGroupError):
            self_normalize([0.0, 0.0, 1.0], [0, 0, 1])

    @given(positive, st.randoms(use_true_random=False))
    def test_normalized_group_means(self, w, rnd):
        a = np.array([rnd.randint(0, 1) for _ in w])
        out = self_normalize(w, a).values
        for g in (0, 1):
            if (a == g).any():
                assert out[a == g].mean() == pytest.approx(1.0, abs=1e-9)

    def test_self_normalize_graph_matches(self, rng):
        w = lognormal(rng, 10)
        a = rng.integers(0, 2, 10)
        np.testing.assert_allclose(self_normalize_t(ad.Tensor(w), a).data, self_normalize(w, a).values, rtol=1e-14)

    def test_sigmoid_gate(self):
        assert sigmoid_gate(3.0, 3.0, 1.0) == 0.5
        assert sigmoid_gate(5.0, 3.0, 1.0) == pytest.approx(0.88080, abs=1e-5)
        assert sigmoid_gate(3.1, 3.0, 1e6) == pytest.approx(1.0)
        with pytest.raises(InvalidParameterError):
            sigmoid_gate(1.0, 0.0, 0.0)

    def test_ignore_mask(self):
        np.testing.assert_array_equal(ignore_mask([0.05, 0.5, 0.1, 0.9, 0.95]), [0, 1, 1, 1, 0])


class TestParetoHard:
    def test_constant_weights_fall_back(self):
        out = pareto_smooth_hard(np.full(50, 2.0))
        assert out.fallback and "reason" in out.diagnostics
        np.testing.assert_array_equal(out.values, 2.0)

    def test_m_equals_one_falls_back(self):
        w = np.array([1.0, 2.0, 3.0, 4.0, 9.0])
        out = pareto_smooth_hard(w)
        assert out.fallback and out.diagnostics["M"] == 1
        np.testing.assert_array_equal(out.values, w)

    def test_replacement_rule(self, rng):
        w = lognormal(rng)
        out = pareto_smooth_hard(w)
        assert not out.fallback
        M = tail_size(100).M
        order = np.argsort(w, kind="stable")
        body, tail = order[:-M], order[-M:]
        np.testing.assert_array_equal(out.values[body], w[body])  # bit-identical
        expected = gpd_quantile((np.arange(1, M + 1) - 0.5) / M, out.diagnostics["gpd"])
        np.testing.assert_allclose(out.values[tail], expected, rtol=1e-14)
        assert np.all(np.diff(out.values[tail]) > 0)

    @given(positive)
    def test_positive_and_body_preserved(self, w):
        out = pareto_smooth_hard(w)
        assert np.all(out.values > 0) and np.all(np.isfinite(out.values))
        M = tail_size(w.size).M
        body = np.argsort(w, kind="stable")[:-M]
        np.testing.assert_array_equal(out.values[body], w[body])

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInputError):
            pareto_smooth_hard([1.0, np.inf, 2.0])


class TestParetoDiff:
    def test_matches_hard_in_limit(self, rng):
        worst = 0.0
        for _ in range(30):
            w = lognormal(rng)
            gap = np.min(np.diff(np.sort(w)))
            diff = pareto_smooth_diff(w, 1e-6 * gap, 1e4)
            hard = pareto_smooth_hard(w)
            worst = max(worst, np.max(np.abs(diff.values - hard.values)))
        assert worst <= 1e-3

    def test_gate_off_entries_unchanged(self, rng):
        w = lognormal(rng)
        eps, kappa = 1e-2, 5.0
        out = pareto_smooth_diff(w, eps, kappa)
        r = soft_rank(w, eps).values
        gate = sigmoid_gate(r, tail_size(100).threshold, kappa)
        off = gate < 1e-6
        assert off.any()
        np.testing.assert_allclose(out.values[off], w[off], rtol=1e-6)

    def test_convex_combination(self, rng):
        w = lognormal(rng)
        eps, kappa = 1e-2, 2.0
        out = pareto_smooth_diff(w, eps, kappa)
        spec = tail_size(100)
        r = soft_rank(w, eps).values
        gate = sigmoid_gate(r, spec.threshold, kappa)
        prob = np.clip((r - (spec.n - spec.M) - 0.5) / spec.M, 0, 1 - 0.5 / spec.M)
        q = gpd_quantile(prob, out.diagnostics["gpd"])
        np.testing.assert_allclose(out.values, gate * q + (1 - gate) * w, rtol=1e-12)

    def test_sum_gradient_finite_differences(self, rng):
        w0 = lognormal(rng, 40)
        eps, kappa = 0.05, 1.5

        def total(w):
            return float(pareto_smooth_diff(w, eps, kappa).values.sum())

        t = ad.Tensor(w0, requires_grad=True)
        out, diag = pareto_smooth_diff_t(t, eps, kappa)
        assert not diag["fallback"]
        grad = ad.backward(out.sum(), {"w": t}).grads["w"]
        assert rel_err(grad, central_diff(total, w0, h=1e-7)) <= 1e-4

    def test_constant_weights_fall_back(self):
        out = pareto_smooth_diff(np.full(20, 3.0), 1e-3, 1.0)
        assert out.fallback
        np.testing.assert_array_equal(out.values, 3.0)

    def test_parameters_checked(self):
        with pytest.raises(InvalidParameterError):
            pareto_smooth_diff([1.0, 2.0, 3.0], 0.0, 1.0)


class TestApplyScheme:
    def test_raw_identity(self):
        out = apply_scheme([1.0, 2.0], [0, 1], "raw")
        np.testing.assert_array_equal(out.values, [1.0, 2.0])
        assert out.scheme is Scheme.RAW

    def test_diff_normalized_single_group(self):
        out = apply_scheme([2.0, 4.0, 3.0], [1, 1, 1], "pareto_diff_normalized", {"epsilon": 1e-3, "kappa": 1.0})
        assert out.values.mean() == pytest.approx(1.0, abs=1e-9)
        assert out.scheme is Scheme.PARETO_DIFF_NORMALIZED

    def test_ignore(self):
        out = apply_scheme([3.0, 3.0], [0, 1], "ignore", {"propensity": [0.05, 0.5]})
        np.testing.assert_array_equal(out.values, [0, 1])

    def test_truncated_from_p_treated(self):
        out = apply_scheme([1.0, 50.0], [1, 1], "truncated", {"p_treated": 0.5})
        np.testing.assert_allclose(out.values, [1 / 0.9, 10.0])

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            apply_scheme([1.0], [0], "bogus")
        with pytest.raises(ConfigurationError):
            apply_scheme([1.0, 2.0, 3.0], [0, 1, 0], "pareto_diff", {"epsilon": 0.1})

    def test_weight_vector_array_protocol(self):
        wv = WeightVector([1.0, 2.0], "raw")
        assert np.asarray(wv).sum() == 3.0 and len(wv) == 2 and not wv.fallback
