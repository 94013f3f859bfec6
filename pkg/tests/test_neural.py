import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from concord.cox import fit_cox, predict_risk
from concord.data_io import SyntheticSpec, generate_synthetic
from concord.errors import NoEvents, SchemaMismatch
from concord.neural import (
    ALPHA_PRIME,
    SELU_ALPHA,
    SELU_LAMBDA,
    DenseConfig,
    DenseNetParams,
    _dropout,
    draw_masks,
    fit_dense,
    forward,
    init_weights,
    objective_and_grad,
    selu,
)
from concord.preprocessing import FeatureVector, Standardizer
from concord.survival_stats import concordance_index, make_records

from oracles import central_diff, reference_dense, rel_err

KINDS = ("mlp_relu", "snn_selu")


def random_params(kind, p=5, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    config = DenseConfig(kind=kind)
    w = {k: v * scale for k, v in init_weights(p, config, rng).items()}
    for k in ("b1", "b2", "b3"):
        w[k] = rng.normal(0, 0.3, size=w[k].shape)
    std = Standardizer.fit(rng.normal(size=(30, p)))
    return DenseNetParams(w, config, std)


class TestSelu:
    def test_zero(self):
        assert selu(0.0) == 0.0

    def test_one(self):
        assert selu(1.0) == 1.0507009873554805

    def test_asymptote(self):
        assert selu(-30.0) == pytest.approx(-SELU_LAMBDA * SELU_ALPHA, abs=1e-6)
        assert selu(-30.0) == pytest.approx(-1.7581, abs=1e-4)


class TestForward:
    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_weights(self, kind):
        params = random_params(kind)
        zero = {k: np.zeros_like(v) for k, v in params.weights.items()}
        risk, hidden = forward(DenseNetParams(zero, params.config, params.standardizer), np.ones(5))
        assert risk == 0.0
        assert_array_equal(hidden, np.zeros(8))

    @pytest.mark.parametrize("kind", KINDS)
    def test_infer_deterministic(self, kind):
        params = random_params(kind)
        x = np.random.default_rng(1).normal(size=(4, 5))
        a, b = forward(params, x), forward(params, x)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

    @pytest.mark.parametrize("kind", KINDS)
    def test_matches_reference(self, kind):
        rng = np.random.default_rng(2)
        for seed in range(10):
            params = random_params(kind, seed=seed)
            x = rng.normal(size=5)
            risk, hidden = forward(params, x)
            ref_risk, ref_hidden = reference_dense(params.weights, kind, params.standardizer.transform(x)[0])
            assert abs(risk - ref_risk) < 1e-12
            assert_allclose(hidden, ref_hidden, atol=1e-12)

    def test_feature_vector_schema(self):
        params = random_params("mlp_relu")
        names = params.feature_names
        risk, hidden = forward(params, FeatureVector(np.zeros(5), names))
        assert isinstance(risk, float) and hidden.shape == (8,)
        with pytest.raises(SchemaMismatch):
            forward(params, FeatureVector(np.zeros(5), names[::-1]))
        with pytest.raises(SchemaMismatch):
            forward(params, np.zeros(6))

    def test_train_mode_seeded(self):
        params = random_params("snn_selu")
        x = np.random.default_rng(3).normal(size=(20, 5))
        a = forward(params, x, mode="train", seed=4)[0]
        b = forward(params, x, mode="train", seed=4)[0]
        c = forward(params, x, mode="infer")[0]
        assert_array_equal(a, b)
        assert not np.allclose(a, c)


class TestDropout:
    @pytest.mark.parametrize("kind", KINDS)
    def test_rate(self, kind):
        config = DenseConfig(kind=kind)
        rng = np.random.default_rng(0)
        a = np.abs(rng.normal(size=(10_000, 8))) + 0.5
        mask = draw_masks(10_000, config, rng)[0]
        out, _ = _dropout(kind, config.dropout_rate, a, mask)
        if kind == "snn_selu":
            scale = (0.9 + ALPHA_PRIME**2 * 0.9 * 0.1) ** -0.5
            pinned = scale * ALPHA_PRIME - scale * ALPHA_PRIME * 0.1
            frac = np.mean(np.isclose(out, pinned))
        else:
            frac = np.mean(out == 0.0)
        assert abs(frac - config.dropout_rate) <= 0.05

    def test_alpha_dropout_preserves_moments(self):
        rng = np.random.default_rng(1)
        a = selu(rng.normal(size=(200_000,)))
        mask = (rng.random(a.shape) < 0.9).astype(float)
        out, _ = _dropout("snn_selu", 0.1, a, mask)
        assert abs(out.mean() - a.mean()) < 0.02
        assert abs(out.var() - a.var()) < 0.03


class TestSelfNormalization:
    def test_activation_bands(self):
        # desk-scale widths; each standardized input meets a fresh LeCun draw
        rng = np.random.default_rng(0)
        config = DenseConfig(kind="snn_selu")
        p = 6
        h1s, h2s = [], []
        for _ in range(1000):
            x = rng.normal(size=p)
            w = init_weights(p, config, rng)
            h1 = selu(x @ w["w1"] + w["b1"])
            h1s.append(h1)
            h2s.append(selu(h1 @ w["w2"] + w["b2"]))
        for h in (np.array(h1s), np.array(h2s)):
            assert abs(h.mean()) < 0.15
            assert 0.7 <= h.var() <= 1.3

    def test_wide_single_draw(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(1000, 8))
        w = init_weights(8, DenseConfig(kind="snn_selu", hidden=(256, 256)), rng)
        h2 = selu(selu(X @ w["w1"]) @ w["w2"])
        assert abs(h2.mean()) < 0.15 and 0.7 <= h2.var() <= 1.3


class TestGradient:
    @pytest.mark.parametrize("kind", KINDS)
    def test_finite_differences(self, kind):
        rng = np.random.default_rng(5)
        for trial in range(5):
            config = DenseConfig(kind=kind, l1=0.0, l2=0.01)
            Z = rng.normal(size=(6, 3))
            times = rng.integers(1, 6, size=6).astype(float)
            events = rng.random(6) < 0.7
            events[0] = True
            w = init_weights(3, config, rng)
            for k in ("b1", "b2"):
                w[k] = rng.normal(0, 0.2, size=w[k].shape)
            _, grads = objective_and_grad(w, Z, times, events, config)
            for name in w:
                def f(x, name=name):
                    ww = dict(w)
                    ww[name] = x
                    return objective_and_grad(ww, Z, times, events, config)[0]

                num = central_diff(f, w[name])
                assert rel_err(grads[name], num) <= 1e-4 or np.abs(grads[name] - num).max() < 1e-8, (kind, name)

    def test_gradient_with_masks(self):
        rng = np.random.default_rng(6)
        config = DenseConfig(kind="snn_selu", l1=0.0, l2=0.0)
        Z = rng.normal(size=(6, 3))
        times = np.arange(1.0, 7.0)
        events = np.array([1, 1, 0, 1, 0, 1], dtype=bool)
        w = init_weights(3, config, rng)
        masks = draw_masks(6, config, rng)
        _, grads = objective_and_grad(w, Z, times, events, config, masks)

        def f(x):
            return objective_and_grad({**w, "w1": x}, Z, times, events, config, masks)[0]

        assert rel_err(grads["w1"], central_diff(f, w["w1"])) <= 1e-4


class TestFit:
    def _cohort(self, seed=0, n=120):
        spec = SyntheticSpec(n=n, p_binary=2, p_continuous=3, beta=(1.5, -1.5, 1.0, -1.0, 0.5), image_signal=0.0,
                             d_in=1, patches=(1, 1), seed=seed)
        return generate_synthetic(spec)

    def test_zero_learning_rate(self):
        c = self._cohort()
        config = DenseConfig(lr=0.0, epochs=20)
        params = fit_dense(c.features, c.records, config, seed=3)
        init = init_weights(5, config, np.random.default_rng(3))
        for k in init:
            assert_array_equal(params.weights[k], init[k])

    @pytest.mark.parametrize("kind", KINDS)
    def test_competitive_with_cox(self, kind):
        c = self._cohort(n=200)
        cox = fit_cox(c.features, c.records, binary=c.binary_mask)
        net = fit_dense(c.features, c.records, DenseConfig(kind=kind), seed=0, binary=c.binary_mask)
        c_cox = concordance_index(c.records, predict_risk(cox, c.features))
        c_net = concordance_index(c.records, forward(net, c.features)[0])
        assert c_net >= c_cox - 0.02

    def test_validation_snapshot(self):
        c = self._cohort()
        params = fit_dense(c.features[:90], c.records[:90], DenseConfig(epochs=60), seed=1,
                           validation=(c.features[90:], c.records[90:]))
        assert params.best_epoch is not None and 1 <= params.best_epoch <= 60

    def test_internal_split(self):
        c = self._cohort()
        params = fit_dense(c.features, c.records, DenseConfig(epochs=30, val_fraction=0.2), seed=1)
        assert params.best_epoch is not None

    def test_deterministic(self):
        c = self._cohort()
        a = fit_dense(c.features, c.records, DenseConfig(epochs=30), seed=9)
        b = fit_dense(c.features, c.records, DenseConfig(epochs=30), seed=9)
        assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)

    def test_no_events(self):
        with pytest.raises(NoEvents):
            fit_dense(np.eye(3), make_records([1, 2, 3], [0, 0, 0]))

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            DenseConfig(kind="tanh")
