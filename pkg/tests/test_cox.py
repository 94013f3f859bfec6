import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from concord.cox import (
    coefficient_importance,
    cox_loss,
    cox_partial_likelihood_loss,
    fit_cox,
    predict_risk,
    soft_threshold,
)
from concord.data_io import SyntheticSpec, generate_synthetic
from concord.errors import NoEvents, SchemaMismatch
from concord.preprocessing import FeatureVector
from concord.survival_stats import make_records

from oracles import central_diff, naive_cox_loss, rel_err


def random_survival(rng, n, p=3):
    X = rng.normal(size=(n, p))
    times = rng.integers(1, 8, size=n).astype(float)
    events = rng.random(n) < 0.6
    events[0] = True
    return X, make_records(times, events)


def cohort(n=500, beta=(1.0, -0.5, 0.0), seed=0):
    spec = SyntheticSpec(n=n, p_binary=0, p_continuous=len(beta), beta=beta, image_signal=0.0,
                         d_in=1, patches=(1, 1), seed=seed)
    return generate_synthetic(spec)


class TestLoss:
    def test_single_patient(self):
        assert cox_partial_likelihood_loss([3.7], make_records([2], [True])).value == 0.0

    def test_two_event_example(self):
        recs = make_records([1, 2], [True, True])
        out = cox_partial_likelihood_loss([0.0, 0.0], recs, gradient=True)
        assert abs(out.value - math.log(2) / 2) < 1e-12
        assert_allclose(out.gradient, [-0.25, 0.25], atol=1e-12)

    def test_matches_naive_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 20))
            h = rng.normal(size=n)
            times = rng.integers(1, 6, size=n).astype(float)
            events = rng.random(n) < 0.5
            events[0] = True
            assert cox_loss(h, times, events) == pytest.approx(naive_cox_loss(h, times, events), abs=1e-12)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 21))
            h = rng.normal(size=n)
            times = rng.integers(1, 10, size=n).astype(float)
            events = rng.random(n) < 0.6
            events[0] = True
            _, g = cox_loss(h, times, events, gradient=True)
            num = central_diff(lambda x: cox_loss(x, times, events), h)
            assert rel_err(g, num) < 1e-5 or np.abs(g - num).max() < 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        h = rng.normal(size=12)
        times = rng.integers(1, 5, size=12).astype(float)
        events = rng.random(12) < 0.5
        events[0] = True
        assert abs(cox_loss(h + 17.3, times, events) - cox_loss(h, times, events)) < 1e-10

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        h = rng.normal(size=15)
        times = rng.integers(1, 5, size=15).astype(float)
        events = rng.random(15) < 0.5
        events[0] = True
        perm = rng.permutation(15)
        assert cox_loss(h[perm], times[perm], events[perm]) == pytest.approx(cox_loss(h, times, events), abs=1e-13)

    def test_extreme_scores_finite(self):
        out = cox_partial_likelihood_loss([800.0, -800.0, 0.0], make_records([1, 2, 3], [1, 1, 0]))
        assert math.isfinite(out.value)

    def test_no_events(self):
        with pytest.raises(NoEvents):
            cox_partial_likelihood_loss([0.0, 1.0], make_records([1, 2], [False, False]))


class TestFit:
    def test_zero_iterations(self):
        X, recs = random_survival(np.random.default_rng(0), 20)
        params = fit_cox(X, recs, max_iter=0)
        assert_array_equal(params.beta, 0.0)
        assert np.ptp(predict_risk(params, X)) == 0.0

    def test_recovers_truth(self):
        est = []
        for seed in range(5):
            c = cohort(seed=seed)
            est.append(fit_cox(c.features, c.records, seed=seed).raw_beta())
        med = np.median(est, axis=0)
        assert np.all(np.abs(med - np.array([1.0, -0.5, 0.0])) <= 0.15), med

    def test_matches_scipy_optimum(self):
        from scipy.optimize import minimize

        c = cohort(n=120, seed=4)
        params = fit_cox(c.features, c.records, l2=0.1)
        Z = params.transform(c.features)
        times = np.array([r.time for r in c.records])
        events = np.array([r.event for r in c.records])

        def obj(b):
            v, g = cox_loss(Z @ b, times, events, gradient=True)
            return v + 0.05 * b @ b, Z.T @ g + 0.1 * b

        ref = minimize(obj, np.zeros(Z.shape[1]), jac=True, method="BFGS", options={"gtol": 1e-10})
        # the default stopping rule is on the objective, so beta is looser
        assert_allclose(params.beta, ref.x, atol=1e-3)
        tight = fit_cox(c.features, c.records, l2=0.1, tol=1e-14)
        assert_allclose(tight.beta, ref.x, atol=1e-6)

    def test_ridge_monotone(self):
        c = cohort(n=80, seed=1)
        norms = [np.linalg.norm(fit_cox(c.features, c.records, l2=l2).beta) for l2 in (0.01, 0.02, 0.04, 0.08, 0.16, 0.32)]
        assert all(b <= a + 1e-9 for a, b in zip(norms, norms[1:]))

    def test_large_l1_exact_zeros(self):
        c = cohort(n=80, seed=2)
        params = fit_cox(c.features, c.records, l1=10.0)
        assert np.all(params.beta == 0.0)

    def test_constant_column_dropped(self):
        rng = np.random.default_rng(5)
        X, recs = random_survival(rng, 30)
        X[:, 1] = 4.0
        with pytest.warns(UserWarning, match="constant"):
            params = fit_cox(X, recs, feature_names=["a", "b", "c"])
        assert params.dropped == ("b",)
        assert params.full_beta()[1] == 0.0

    def test_binary_left_unscaled(self):
        rng = np.random.default_rng(6)
        X, recs = random_survival(rng, 40, p=2)
        X[:, 0] = rng.random(40) < 0.4
        params = fit_cox(X, recs)
        assert params.standardizer.center[0] == 0.0 and params.standardizer.scale[0] == 1.0

    def test_no_events(self):
        with pytest.raises(NoEvents):
            fit_cox(np.ones((3, 1)) * [[1], [2], [3]], make_records([1, 2, 3], [0, 0, 0]))

    def test_deterministic(self):
        c = cohort(n=60, seed=3)
        a = fit_cox(c.features, c.records, l1=0.01, l2=0.1)
        b = fit_cox(c.features, c.records, l1=0.01, l2=0.1)
        assert a.beta.tobytes() == b.beta.tobytes()


class TestPredict:
    def test_zero_beta(self):
        X, recs = random_survival(np.random.default_rng(0), 10)
        params = fit_cox(X, recs, max_iter=0)
        assert predict_risk(params, X[0]) == 0.0

    def test_unit_vector(self):
        X, recs = random_survival(np.random.default_rng(1), 10)
        params = fit_cox(X, recs, max_iter=0)
        params = type(params)(**{**params.__dict__, "beta": np.array([0.0, 1.0, 0.0])})
        z = params.transform(X[3])[0]
        assert predict_risk(params, X[3]) == pytest.approx(z[1], abs=1e-15)
        raw = params.standardizer.center[1] + 1.7 * params.standardizer.scale[1]
        x = X[3].copy()
        x[1] = raw
        assert predict_risk(params, x) == pytest.approx(1.7, abs=1e-12)

    def test_shift_refit_differences(self):
        rng = np.random.default_rng(2)
        X, recs = random_survival(rng, 10, p=2)
        a = predict_risk(fit_cox(X, recs, l2=0.5), X)
        b = predict_risk(fit_cox(X + [5.0, -3.0], recs, l2=0.5), X + [5.0, -3.0])
        assert_allclose(np.diff(a), np.diff(b), atol=1e-10)

    def test_affine_rescale_ordering(self):
        rng = np.random.default_rng(3)
        X, recs = random_survival(rng, 25, p=3)
        Y = X.copy()
        Y[:, 2] = 40.0 * Y[:, 2] - 7.0
        a = predict_risk(fit_cox(X, recs, l2=0.1), X)
        b = predict_risk(fit_cox(Y, recs, l2=0.1), Y)
        assert_array_equal(np.argsort(a), np.argsort(b))

    def test_schema_mismatch(self):
        X, recs = random_survival(np.random.default_rng(4), 10)
        params = fit_cox(X, recs, feature_names=["a", "b", "c"])
        with pytest.raises(SchemaMismatch):
            predict_risk(params, np.ones(4))
        with pytest.raises(SchemaMismatch):
            predict_risk(params, FeatureVector(np.ones(3), ("a", "b", "z")))

    def test_monotone_in_feature(self):
        c = cohort(n=100, seed=7)
        params = fit_cox(c.features, c.records)
        x = c.features[0].copy()
        lo = predict_risk(params, x)
        x[0] += 1.0
        assert (predict_risk(params, x) - lo) * params.beta[0] > 0


class TestImportance:
    def _params(self, betas):
        X, recs = random_survival(np.random.default_rng(0), 10, p=len(betas[0]))
        base = fit_cox(X, recs, feature_names=[f"f{j}" for j in range(len(betas[0]))], max_iter=0)
        return [type(base)(**{**base.__dict__, "beta": np.array(b, dtype=float)}) for b in betas]

    def test_all_zero(self):
        rows = coefficient_importance(self._params([[0.0, 0.0]] * 5))
        assert all(r.p == 1.0 for r in rows)

    def test_significant_feature(self):
        coefs = [2.5, 2.9, 2.7, 3.1, 2.65]
        rows = coefficient_importance(self._params([[c, 0.1 * i] for i, c in enumerate(coefs)]))
        top = rows[0]
        assert top.feature == "f0"
        assert top.avg_coef == pytest.approx(np.mean(coefs))
        assert top.p < 0.05 and top.ci_low > 0

    def test_sorted_by_magnitude(self):
        rows = coefficient_importance(self._params([[0.1, -2.0, 1.0], [0.2, -2.2, 1.1], [0.0, -1.9, 0.9]]))
        assert [r.feature for r in rows] == ["f1", "f2", "f0"]

    def test_schema_mismatch(self):
        a = self._params([[0.1, 0.2]] * 2)
        X, recs = random_survival(np.random.default_rng(0), 10, p=2)
        other = fit_cox(X, recs, feature_names=["x", "y"], max_iter=0)
        with pytest.raises(SchemaMismatch):
            coefficient_importance([a[0], other])


def test_soft_threshold():
    assert_array_equal(soft_threshold(np.array([-3.0, -0.5, 0.0, 0.4, 2.0]), 1.0), [-2.0, 0.0, 0.0, 0.0, 1.0])
