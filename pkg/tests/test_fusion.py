import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from concord.attention import TransformerConfig, aggregate_batch, fit_aggregator
from concord.cox import fit_cox, predict_risk
from concord.data_io import SyntheticSpec, encode_model, generate_synthetic
from concord.data_io.checkpoint import canonical_json
from concord.errors import SchemaMismatch, UntrainedComponent
from concord.fusion import (
    FusionConfig,
    extract_fusion_features,
    fit_fusion_head,
    fit_nonimage,
    fusion_configs,
    predict_multimodal,
    train_multimodal,
    with_fusion_beta,
)
from concord.neural import forward
from concord.survival_stats import concordance_index

TC = TransformerConfig(d_in=8, steps=30)


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic(SyntheticSpec(n=60, d_in=8, seed=5, image_signal=1.5))


@pytest.fixture(scope="module")
def branches(cohort):
    c = cohort
    conf = FusionConfig(transformer=TC)
    nonimage = fit_nonimage(c.features, c.records, conf, c.feature_names, c.binary_mask)
    image = fit_aggregator(c.bags, c.records, TC, seed=conf.image_seed)
    return nonimage, image


def _train(c, conf, branches=None):
    ni, im = branches if branches else (None, None)
    return train_multimodal(c.features, c.bags, c.records, conf, c.feature_names, c.binary_mask, nonimage=ni, image=im)


class TestConfigs:
    def test_four_scenarios(self):
        pairs = {(c.nonimage_mode, c.image_mode) for c in fusion_configs()}
        assert pairs == {("late", "late"), ("late", "early"), ("early", "late"), ("early", "early")}

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            FusionConfig(nonimage_mode="middle")

    def test_stage_seeds(self):
        c = FusionConfig(seed=10)
        assert (c.nonimage_seed, c.image_seed, c.fusion_seed) == (11, 12, 13)


class TestSchemas:
    def test_cox_branch_lengths(self, cohort, branches):
        p = len(branches[0].standardizer.kept_names)
        lengths = []
        for conf in fusion_configs(transformer=TC):
            model = _train(cohort, conf, branches)
            F = extract_fusion_features(model.nonimage, model.image, cohort.features, cohort.bags, conf)
            assert F.shape[1] == len(model.fusion_names)
            lengths.append(F.shape[1])
        assert lengths == [2, 1 + 32, p + 1, p + 32]

    @pytest.mark.parametrize("kind", ["mlp_relu", "snn_selu"])
    def test_dense_branch_lengths(self, cohort, branches, kind):
        lengths = []
        for conf in fusion_configs(transformer=TC, nonimage_kind=kind):
            model = _train(cohort, conf, (None, branches[1]))
            lengths.append(len(model.fusion_names))
        assert lengths == [2, 33, 9, 40]

    def test_early_cox_features_are_standardized_covariates(self, cohort, branches):
        conf = FusionConfig(nonimage_mode="early", image_mode="late", transformer=TC)
        F = extract_fusion_features(*branches, cohort.features, cohort.bags, conf)
        assert_allclose(F[:, :-1], branches[0].transform(cohort.features))

    def test_untrained(self, cohort, branches):
        with pytest.raises(UntrainedComponent):
            extract_fusion_features(None, branches[1], cohort.features, cohort.bags, FusionConfig())

    def test_misaligned(self, cohort, branches):
        with pytest.raises(SchemaMismatch):
            extract_fusion_features(*branches, cohort.features[:-1], cohort.bags, FusionConfig())


class TestPrediction:
    def test_compositional_identity(self, cohort, branches):
        for conf in fusion_configs(transformer=TC):
            model = _train(cohort, conf, branches)
            F = extract_fusion_features(model.nonimage, model.image, cohort.features, cohort.bags, conf)
            assert_allclose(predict_multimodal(model, cohort.features, cohort.bags), predict_risk(model.fusion, F), atol=1e-12)

    def test_projection(self, cohort, branches):
        model = with_fusion_beta(_train(cohort, FusionConfig(transformer=TC), branches), [1.0, 0.0])
        expected = predict_risk(branches[0], cohort.features)
        assert_array_equal(predict_multimodal(model, cohort.features, cohort.bags), expected)

    def test_mean_of_risks(self, cohort, branches):
        model = with_fusion_beta(_train(cohort, FusionConfig(transformer=TC), branches), [0.5, 0.5])
        a = predict_risk(branches[0], cohort.features)
        b = aggregate_batch(branches[1], cohort.bags)[1]
        assert_allclose(predict_multimodal(model, cohort.features, cohort.bags), (a + b) / 2, atol=1e-12)

    def test_constant_image_risk(self, cohort, branches):
        nonimage, image = branches
        w = dict(image.weights)
        w["w_risk"] = np.zeros_like(w["w_risk"])
        flat = type(image)(w, image.config, image.seed)
        with pytest.warns(UserWarning, match="constant"):
            model = _train(cohort, FusionConfig(transformer=TC), (nonimage, flat))
        fused = predict_multimodal(model, cohort.features, cohort.bags)
        assert_array_equal(np.argsort(fused, kind="stable"), np.argsort(predict_risk(nonimage, cohort.features), kind="stable"))

    def test_dense_late_feature_is_risk(self, cohort, branches):
        conf = FusionConfig(nonimage_kind="snn_selu", transformer=TC)
        model = _train(cohort, conf, (None, branches[1]))
        F = extract_fusion_features(model.nonimage, model.image, cohort.features, cohort.bags, conf)
        assert_allclose(F[:, 0], forward(model.nonimage, cohort.features)[0])


class TestTraining:
    def test_stages_frozen(self, cohort, branches):
        before = {k: v.tobytes() for k, v in branches[1].weights.items()}
        beta_before = branches[0].beta.tobytes()
        for conf in fusion_configs(transformer=TC):
            _train(cohort, conf, branches)
        assert {k: v.tobytes() for k, v in branches[1].weights.items()} == before
        assert branches[0].beta.tobytes() == beta_before

    def test_head_is_stage_three_only(self, cohort, branches):
        conf = FusionConfig(transformer=TC)
        full = _train(cohort, conf)
        head = fit_fusion_head(*branches, cohort.features, cohort.bags, cohort.records, conf)
        assert_array_equal(full.fusion.beta, head.fusion.beta)

    def test_rerun_byte_identical(self, cohort):
        conf = FusionConfig(nonimage_mode="early", nonimage_kind="mlp_relu", transformer=TC, seed=4)
        a = canonical_json(encode_model(_train(cohort, conf)))
        b = canonical_json(encode_model(_train(cohort, conf)))
        assert a == b

    def test_fused_training_cindex(self):
        diffs = []
        tc = TransformerConfig(d_in=16)
        for seed in range(5):
            c = generate_synthetic(SyntheticSpec(n=150, d_in=16, seed=seed, image_signal=1.5, beta=(1.2, -1.2, 0, 1.2, 1.2, -0.6)))
            model = _train(c, FusionConfig(transformer=tc, seed=seed))
            c_ni = concordance_index(c.records, predict_risk(model.nonimage, c.features))
            c_im = concordance_index(c.records, aggregate_batch(model.image, c.bags)[1])
            c_mm = concordance_index(c.records, predict_multimodal(model, c.features, c.bags))
            diffs.append(c_mm - max(c_ni, c_im))
        assert np.median(diffs) >= 0
