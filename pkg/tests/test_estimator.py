import math

import numpy as np
import pytest

import dpsw.estimator as est
import dpsw.smoothing as smoothing
from dpsw.datagen import gen_synthetic, split
from dpsw.errors import ConfigurationError, NumericalAbort, ShapeError
from dpsw.estimator import (
    Batch,
    DPSWModel,
    Hyperparams,
    Mode,
    outcome_loss,
    outcome_objective,
    predict_cate,
    propensity_loss,
    train,
    validation_objective,
)
from dpsw.nnet import autodiff as ad
from dpsw.nnet.autodiff import backward
from dpsw.smoothing import pareto_smooth_hard


def small_data(n=120, d=9, seed=0):
    return gen_synthetic(d, n, seed)


def batch_of(data, n):
    return Batch.of(data, np.arange(n))


def np_forward(m, x):
    """Independent forward pass used as an oracle."""
    acts = {"elu": lambda z: np.where(z > 0, z, np.exp(np.minimum(z, 0)) - 1),
            "sigmoid": lambda z: 1 / (1 + np.exp(-z)), "identity": lambda z: z}
    h = x
    for W, b, act in zip(m.weights, m.biases, m.activations):
        h = acts[act](h @ W.data.T + b.data)
    return h


class TestPropensityLoss:
    def test_half_propensity_gives_log2(self):
        data = small_data()
        model = DPSWModel.build(9, "dpsw", Hyperparams(lambda_pi=0.0))
        for t in model.pi_params().values():
            t.data = np.zeros_like(t.data)
        loss, clamped = propensity_loss(model, batch_of(data, 40))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12) and clamped == 0
        model.hp.lambda_pi = 0.3  # zero weights: penalty adds nothing
        assert propensity_loss(model, batch_of(data, 40))[0].item() == pytest.approx(math.log(2), abs=1e-12)

    def test_only_pi_receives_gradients(self):
        data = small_data()
        model = DPSWModel.build(9, "dpsw", Hyperparams())
        loss, _ = propensity_loss(model, batch_of(data, 30))
        tape = backward(loss, {**model.outcome_params(), **model.pi_params()})
        assert all(np.all(tape.grads[k] == 0) for k in model.outcome_params())
        assert any(np.any(tape.grads[k] != 0) for k in model.pi_params())

    def test_clamping_reported(self):
        data = small_data()
        model = DPSWModel.build(9, "dpsw", Hyperparams())
        model.nets["pi"].biases[-1].data[:] = 60.0
        loss, clamped = propensity_loss(model, batch_of(data, 30))
        assert clamped == 30 and np.isfinite(loss.item())

    def test_single_encoder_has_no_propensity(self):
        model = DPSWModel.build(9, "single_encoder", Hyperparams())
        with pytest.raises(ConfigurationError):
            propensity_loss(model, batch_of(small_data(), 10))


class TestOutcomeLoss:
    def test_zero_weights_leave_penalty(self):
        hp = Hyperparams(lambda_upsilon=0.0, lambda_minus_pi=0.01)
        model = DPSWModel.build(9, "dpsw", hp)
        loss = outcome_loss(model, batch_of(small_data(), 20), np.zeros(20))
        omega = sum(np.sum(W.data**2) for m in model.outcome_nets() for W in m.weights)
        assert loss.item() == pytest.approx(0.01 * omega, rel=1e-12)

    def test_identical_representations_zero_mmd(self):
        hp = Hyperparams(lambda_upsilon=5.0, lambda_minus_pi=0.0)
        model = DPSWModel.build(9, "dpsw", hp)
        for t in model.nets["upsilon"].parameters().values():
            t.data = np.zeros_like(t.data)
        b = batch_of(small_data(), 20)
        with_mmd = outcome_loss(model, b, np.ones(20)).item()
        model.hp.lambda_upsilon = 0.0
        assert with_mmd == pytest.approx(outcome_loss(model, b, np.ones(20)).item(), abs=1e-12)

    def test_hand_sized_batch_matches_recomputation(self, rng):
        hp = Hyperparams(lambda_upsilon=0.7, lambda_minus_pi=0.05)
        model = DPSWModel.build(9, "dpsw", hp)
        model.bandwidth = 1.3
        x = rng.normal(size=(4, 9))
        a = np.array([0, 1, 1, 0])
        y = rng.normal(size=4)
        w = np.array([1.5, 2.0, 0.5, 3.0])
        loss = outcome_loss(model, Batch(a, x, y), w).item()

        nets = model.nets
        z = np.concatenate([np_forward(nets["delta"], x), np_forward(nets["upsilon"], x)], axis=1)
        pred = np.where(a == 1, np_forward(nets["h1"], z)[:, 0], np_forward(nets["h0"], z)[:, 0])
        u = np_forward(nets["upsilon"], x)
        k = lambda p, q: np.exp(-((p[:, None, :] - q[None, :, :]) ** 2).sum(-1) / (2 * 1.3**2))
        u0, u1 = u[a == 0], u[a == 1]
        mmd = k(u0, u0).mean() + k(u1, u1).mean() - 2 * k(u0, u1).mean()
        omega = sum(np.sum(W.data**2) for name in ("gamma", "delta", "upsilon", "h0", "h1") for W in nets[name].weights)
        expected = np.mean(w * (pred - y) ** 2) + 0.7 * mmd + 0.05 * omega
        assert loss == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_weight_shape_checked(self):
        model = DPSWModel.build(9, "dpsw", Hyperparams())
        with pytest.raises(ShapeError):
            outcome_loss(model, batch_of(small_data(), 5), np.ones(4))

    def test_single_group_batch_skips_mmd(self):
        data = small_data()
        idx = np.flatnonzero(data.a == 1)[:10]
        model = DPSWModel.build(9, "dpsw", Hyperparams())
        diag = {}
        loss = outcome_objective(model, Batch.of(data, idx), diag)
        assert diag["mmd_skipped"] == 1 and np.isfinite(loss.item())


class TestWeightGradients:
    def _gamma_grads(self, mode, **kw):
        data = small_data(200)
        model = DPSWModel.build(9, mode, Hyperparams(lambda_minus_pi=0.0, lambda_upsilon=0.0, **kw),
                                p_treated=float(data.a.mean()))
        loss = outcome_objective(model, batch_of(data, 100))
        tape = backward(loss, model.outcome_params())
        return [tape.grads[k] for k in model.nets["gamma"].parameters()]

    def test_gamma_gets_gradient_through_weights_in_dpsw(self):
        assert any(np.any(g != 0) for g in self._gamma_grads("dpsw"))

    def test_gamma_gets_none_when_weights_constant(self):
        assert all(np.all(g == 0) for g in self._gamma_grads("drcfr_raw"))
        assert all(np.all(g == 0) for g in self._gamma_grads("dpsw", weights_differentiable=False))

    def test_drcfr_raw_equals_dpsw_without_smoothing(self, monkeypatch):
        data = small_data(200)
        hp = Hyperparams(weights_differentiable=True)
        a = DPSWModel.build(9, "dpsw", hp, p_treated=0.5)
        b = DPSWModel.build(9, "drcfr_raw", hp, p_treated=0.5)
        b.load_state_dict(a.state_dict())
        a.bandwidth = b.bandwidth = 1.0
        monkeypatch.setattr(est, "pareto_smooth_diff_t", lambda w, *args: (w, {"fallback": True}))
        batch = batch_of(data, 100)
        la, lb = outcome_objective(a, batch), outcome_objective(b, batch)
        assert la.item() == lb.item()
        ga = backward(la, a.outcome_params()).grads
        gb = backward(lb, b.outcome_params()).grads
        for k in ga:
            np.testing.assert_array_equal(ga[k], gb[k])

    def test_hard_limit_gradient_matches_fixed_hard_weights(self):
        """With kappa large and epsilon tiny, gradients for parameters that do not feed the
        weights equal those under fixed hard-smoothed weights."""
        data = small_data(300)
        batch = batch_of(data, 100)
        hp = Hyperparams(kappa=1e4, epsilon=1e-9)
        model = DPSWModel.build(9, "dpsw", hp, p_treated=float(data.a.mean()))
        model.bandwidth = 1.0
        diag = {}
        loss = outcome_objective(model, batch, diag)
        assert not diag.get("fallbacks")
        g_diff = backward(loss, model.outcome_params()).grads

        pi = model.propensity(batch.x)
        pi_a = np.where(batch.a == 1, pi, 1 - pi)
        raw = 1 + smoothing.marginal_ratio(batch.a, model.p_treated) * (1 / pi_a - 1)
        hard = pareto_smooth_hard(raw)
        assert not hard.fallback
        np.testing.assert_allclose(diag["last_weights"], hard.values, rtol=1e-3)
        g_hard = backward(outcome_loss(model, batch, hard.values), model.outcome_params()).grads
        for name in ("upsilon", "h0", "h1"):
            for k in model.nets[name].parameters():
                assert np.linalg.norm(g_diff[k] - g_hard[k]) <= 1e-3 * max(np.linalg.norm(g_hard[k]), 1e-12)


class TestPredict:
    def test_tied_heads_zero(self, rng):
        model = DPSWModel.build(9, "dpsw", Hyperparams())
        for k, t in model.nets["h1"].parameters().items():
            t.data = model.nets["h0"].parameters()[k.replace("h1", "h0")].data.copy()
        np.testing.assert_array_equal(predict_cate(model, rng.normal(size=(5, 9))), 0.0)

    def test_bias_offset(self, rng):
        model = DPSWModel.build(9, "dpsw", Hyperparams())
        for k, t in model.nets["h1"].parameters().items():
            t.data = model.nets["h0"].parameters()[k.replace("h1", "h0")].data.copy()
        model.nets["h1"].biases[-1].data += 0.75
        np.testing.assert_allclose(predict_cate(model, rng.normal(size=(5, 9))), 0.75, atol=1e-12)

    def test_matches_recomputation(self, rng):
        model = DPSWModel.build(9, "dpsw", Hyperparams(seed=4))
        x = rng.normal(size=(1, 9))
        n = model.nets
        z = np.concatenate([np_forward(n["delta"], x), np_forward(n["upsilon"], x)], axis=1)
        expected = np_forward(n["h1"], z)[:, 0] - np_forward(n["h0"], z)[:, 0]
        np.testing.assert_allclose(predict_cate(model, x), expected, rtol=1e-12, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            predict_cate(DPSWModel.build(9, "dpsw", Hyperparams()), np.ones((2, 6)))


@pytest.fixture(scope="module")
def splits():
    return split(small_data(240), (0.5, 0.25, 0.25), 0)


class TestTraining:
    @pytest.mark.parametrize("mode", [m.value for m in Mode])
    def test_every_mode_trains(self, splits, mode):
        tr, va, te = splits
        model, log = train(tr, va, Hyperparams(max_rounds=3, batch_size=40), mode)
        assert len(log.rounds) >= 1 and 0 <= log.best_round < 3
        assert np.all(np.isfinite(predict_cate(model, te.x)))
        for rec in log.rounds:
            assert {"round", "pi_loss", "val_objective", "fallbacks", "xi_mean", "unreliable_fits"} <= set(rec)

    def test_deterministic_replay(self, splits):
        tr, va, _ = splits
        hp = Hyperparams(max_rounds=3, batch_size=40, seed=5)
        _, a = train(tr, va, hp, "dpsw")
        _, b = train(tr, va, hp, "dpsw")
        assert a.best_val == b.best_val and a.rounds == b.rounds

    def test_phase_isolation(self, splits):
        tr, _, _ = splits
        hp = Hyperparams(batch_size=40)
        model = DPSWModel.build(9, "dpsw", hp, p_treated=float(tr.a.mean()))
        rng = np.random.default_rng(0)
        before = model.state_dict()
        est._propensity_epoch(model, tr, est.Adam(model.pi_params(), 1e-2), rng, {})
        mid = model.state_dict()
        for k in before:
            assert np.array_equal(before[k], mid[k]) == (k not in model.pi_params())
        est._outcome_epoch(model, tr, est.Adam(model.outcome_params(), 1e-2), rng, {})
        after = model.state_dict()
        for k in model.pi_params():
            np.testing.assert_array_equal(after[k], mid[k])
        assert any(not np.array_equal(after[k], mid[k]) for k in model.outcome_params())

    def test_single_encoder_never_smooths(self, splits, monkeypatch):
        def boom(*args, **kw):
            raise AssertionError("smoothing invoked")

        monkeypatch.setattr(est, "pareto_smooth_diff_t", boom)
        monkeypatch.setattr(est, "pareto_smooth_hard", boom)
        tr, va, _ = splits
        train(tr, va, Hyperparams(max_rounds=2, batch_size=40), "single_encoder")

    def test_psw_separate_keeps_pi_fixed(self, splits):
        tr, va, _ = splits
        hp = Hyperparams(max_rounds=2, batch_size=40)
        model, log = train(tr, va, hp, "psw_separate")
        assert model.fixed_weights.shape == (tr.n,) and np.all(model.fixed_weights > 0)
        assert log.fits == 1

    def test_weights_positive(self, splits):
        tr, _, _ = splits
        model = DPSWModel.build(9, "dpsw", Hyperparams(), p_treated=float(tr.a.mean()))
        diag = {}
        outcome_objective(model, batch_of(tr, 60), diag)
        assert np.all(diag["last_weights"] > 0)

    def test_nan_aborts_with_dump(self, splits):
        tr, va, _ = splits
        bad = tr.subset(np.arange(tr.n))
        bad.y = bad.y.copy()
        bad.y[3] = np.nan
        bad.y0 = bad.y1 = None
        with pytest.raises(NumericalAbort) as exc:
            train(bad, va, Hyperparams(max_rounds=2, batch_size=40), "dpsw")
        assert exc.value.dump["weights"] is not None

    def test_checkpoint_round_trip(self, splits, tmp_path):
        tr, va, te = splits
        model, _ = train(tr, va, Hyperparams(max_rounds=2, batch_size=40), "dpsw_norm")
        path = tmp_path / "m.json"
        model.save(path)
        loaded, meta = DPSWModel.load(path)
        assert meta["mode"] == "dpsw_norm"
        np.testing.assert_array_equal(predict_cate(loaded, te.x), predict_cate(model, te.x))

    def test_validation_objective_does_not_touch_parameters(self, splits):
        tr, va, _ = splits
        model = DPSWModel.build(9, "dpsw", Hyperparams(batch_size=40), p_treated=0.5)
        before = model.state_dict()
        v = validation_objective(model, va)
        assert np.isfinite(v)
        after = model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)


class TestHyperparams:
    def test_round_trip(self):
        hp = Hyperparams(epsilon=0.01, betas=(0.8, 0.99))
        assert Hyperparams.from_dict(hp.to_dict()) == hp

    @pytest.mark.parametrize("bad", [{"epsilon": 0}, {"batch_size": 2}, {"lambda_pi": -1}, {"bogus": 1}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigurationError):
            Hyperparams.from_dict(bad)

    def test_mode_parsing(self):
        with pytest.raises(ConfigurationError):
            est.parse_mode("tarnet")
        assert Mode("dpsw").smoothed and not Mode("single_encoder").three_encoder
