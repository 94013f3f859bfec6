import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from concord.attention import EmbeddingBag, TransformerConfig, aggregate_batch, fit_aggregator
from concord.cox import fit_cox, predict_risk
from concord.data_io import (
    CELL_TYPES,
    FORMAT_VERSION,
    CohortBundle,
    SyntheticSpec,
    attention_svg,
    canonical_json,
    generate_synthetic,
    km_svg,
    load_checkpoint,
    load_model,
    load_report,
    read_bags,
    read_cohort,
    save_model,
    save_report,
    write_cohort,
    write_km_csv,
)
from concord.data_io.checkpoint import dumps_document, loads_document
from concord.data_io.cohort_io import read_features, read_records
from concord.errors import AlignmentError, CorruptCheckpoint, ParseError, VersionMismatch
from concord.fusion import FusionConfig, predict_multimodal, train_multimodal
from concord.neural import DenseConfig, fit_dense, forward
from concord.attention import bag_heatmap
from concord.survival_stats import SurvivalRecord, kaplan_meier, log_rank_test


def assert_same_cohort(a: CohortBundle, b: CohortBundle):
    assert a.records == b.records
    assert a.feature_names == b.feature_names
    assert_array_equal(a.features, b.features)
    assert a.sites == b.sites
    for x, y in zip(a.bags, b.bags):
        assert x.patient_id == y.patient_id and x.patch_ids == y.patch_ids
        assert_array_equal(x.vectors, y.vectors)
        assert_array_equal(x.coords, y.coords)
    if a.cells is None:
        assert b.cells is None
    else:
        assert_array_equal(a.cells, b.cells)


@pytest.fixture
def small():
    return generate_synthetic(SyntheticSpec(n=12, d_in=3, patches=(1, 4), seed=1))


class TestCohortFiles:
    def test_round_trip(self, small, tmp_path):
        write_cohort(tmp_path, small)
        assert_same_cohort(small, read_cohort(tmp_path))

    def test_sections_follow_records(self, small, tmp_path):
        write_cohort(tmp_path, small)
        lines = (tmp_path / "features.csv").read_text().splitlines()
        (tmp_path / "features.csv").write_text("\n".join([lines[0]] + lines[1:][::-1]) + "\n")
        assert_same_cohort(small, read_cohort(tmp_path))

    def test_unknown_patient(self, small, tmp_path):
        write_cohort(tmp_path, small)
        with open(tmp_path / "bags.ndjson", "a") as fh:
            fh.write(json.dumps({"patient_id": "GHOST", "patch_id": "g0", "vector": [0.0, 0.0, 0.0]}) + "\n")
        with pytest.raises(AlignmentError, match="GHOST"):
            read_cohort(tmp_path)

    def test_missing_patient(self, small, tmp_path):
        write_cohort(tmp_path, small)
        lines = (tmp_path / "features.csv").read_text().splitlines()
        (tmp_path / "features.csv").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(AlignmentError, match=small.patient_ids[-1]):
            read_cohort(tmp_path)

    def test_mutation_value_two(self, small, tmp_path):
        write_cohort(tmp_path, small)
        path = tmp_path / "features.csv"
        lines = path.read_text().splitlines()
        first = lines[1].split(",")
        first[1] = "2"
        lines[1] = ",".join(first)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="line 2"):
            read_features(path)

    def test_bad_time(self, tmp_path):
        path = tmp_path / "records.csv"
        path.write_text("patient_id,time,event\na,1.5,1\nb,soon,0\n")
        with pytest.raises(ParseError, match="line 3"):
            read_records(path)

    def test_bad_bag_line(self, tmp_path):
        path = tmp_path / "bags.ndjson"
        path.write_text('{"patient_id": "a", "patch_id": "x", "vector": [1.0]}\n{not json\n')
        with pytest.raises(ParseError, match="line 2"):
            read_bags(path)

    def test_ragged_vectors(self, tmp_path):
        path = tmp_path / "bags.ndjson"
        path.write_text('{"patient_id": "a", "patch_id": "x", "vector": [1.0]}\n'
                        '{"patient_id": "a", "patch_id": "y", "vector": [1.0, 2.0]}\n')
        with pytest.raises(ParseError):
            read_bags(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_cohort(tmp_path / "nope")

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(1, 8),
        d=st.integers(1, 4),
        seed=st.integers(0, 10_000),
        with_sites=st.booleans(),
        with_cells=st.booleans(),
    )
    def test_round_trip_generated(self, tmp_path_factory, n, d, seed, with_sites, with_cells):
        rng = np.random.default_rng(seed)
        ids = [f"id{i}" for i in rng.permutation(n)]
        records = [SurvivalRecord(pid, float(rng.exponential() + 1e-3), bool(rng.random() < 0.5)) for pid in ids]
        X = np.hstack([(rng.random((n, 1)) < 0.5).astype(float), rng.normal(size=(n, 2)) * 10.0 ** rng.integers(-8, 8)])
        bags = []
        for pid in ids:
            m = int(rng.integers(1, 4))
            coords = rng.integers(0, 5, size=(m, 2)) * 224
            bags.append(EmbeddingBag(pid, tuple(f"{pid}_{j}" for j in range(m)), rng.normal(size=(m, d)), coords))
        cells = None
        if with_cells:
            cells = rng.dirichlet(np.ones(len(CELL_TYPES)), size=n)
        sites = [f"s{int(k)}" for k in rng.integers(0, 3, n)] if with_sites else None
        bundle = CohortBundle(records, ("mut_X", "a", "b"), X, bags, sites, cells)
        root = tmp_path_factory.mktemp("cohort")
        write_cohort(root, bundle)
        assert_same_cohort(bundle, read_cohort(root))


class TestSynthetic:
    def test_pure_function(self):
        spec = SyntheticSpec(n=30, d_in=4, seed=7)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert_same_cohort(a, b)
        assert a.metadata == b.metadata

    def test_censoring_target(self):
        for target in (0.1, 0.3, 0.6):
            for seed in range(3):
                c = generate_synthetic(SyntheticSpec(n=400, d_in=2, patches=(1, 2), censoring=target, seed=seed))
                realized = 1.0 - np.mean([r.event for r in c.records])
                assert abs(realized - target) <= 0.05
                assert c.metadata["realized_censoring"] == pytest.approx(realized)

    def test_null_split(self):
        ps = []
        for seed in range(40):
            c = generate_synthetic(SyntheticSpec(n=120, d_in=2, patches=(1, 2), beta=(0.0,) * 6, image_signal=0.0, seed=seed))
            half = np.random.default_rng(seed).permutation(120)
            ps.append(log_rank_test([[c.records[i] for i in half[:60]], [c.records[i] for i in half[60:]]]).p_value)
        assert 0.2 <= np.median(ps) <= 0.8

    def test_feature_names(self):
        names = SyntheticSpec(p_binary=4, p_continuous=2).feature_names
        assert len(names) == 6
        assert all(n.startswith("mut_") for n in names[:4])

    def test_cells_sum_to_one(self):
        c = generate_synthetic(SyntheticSpec(n=50, d_in=2, seed=0))
        assert_allclose(c.cells.sum(axis=1), 1.0, atol=1e-12)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(censoring=0.95)
        with pytest.raises(ValueError):
            SyntheticSpec(beta=(1.0,))


@pytest.fixture(scope="module")
def trained():
    c = generate_synthetic(SyntheticSpec(n=40, d_in=6, seed=3, image_signal=1.5))
    tc = TransformerConfig(d_in=6, steps=10)
    return c, {
        "cox": fit_cox(c.features, c.records, l1=0.01, l2=0.1, feature_names=c.feature_names, binary=c.binary_mask),
        "dense": fit_dense(c.features, c.records, DenseConfig(kind="snn_selu", epochs=10), seed=1, feature_names=c.feature_names),
        "transformer": fit_aggregator(c.bags, c.records, tc, seed=2),
        "multimodal": train_multimodal(c.features, c.bags, c.records, FusionConfig(nonimage_mode="early", transformer=tc),
                                       c.feature_names, c.binary_mask),
    }


def _predict(kind, model, c):
    if kind == "cox":
        return predict_risk(model, c.features)
    if kind == "dense":
        return forward(model, c.features)[0]
    if kind == "transformer":
        return aggregate_batch(model, c.bags)[1]
    return predict_multimodal(model, c.features, c.bags)


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["cox", "dense", "transformer", "multimodal"])
    def test_round_trip(self, trained, kind, tmp_path):
        c, models = trained
        a = save_model(tmp_path / "a.json", models[kind], {"fold": 1})
        loaded, meta = load_checkpoint(a)
        assert meta == {"fold": 1}
        assert_allclose(_predict(kind, loaded, c), _predict(kind, models[kind], c), atol=1e-12)
        b = save_model(tmp_path / "b.json", loaded, {"fold": 1})
        assert a.read_bytes() == b.read_bytes()

    def test_truncated(self, trained, tmp_path):
        path = save_model(tmp_path / "m.json", trained[1]["cox"])
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(CorruptCheckpoint):
            load_model(path)

    def test_tampered(self, trained, tmp_path):
        path = save_model(tmp_path / "m.json", trained[1]["cox"], {"note": "a"})
        path.write_text(path.read_text().replace('"note":"a"', '"note":"b"'))
        with pytest.raises(CorruptCheckpoint, match="checksum"):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        doc = json.loads(dumps_document({"report": {}}))
        doc["format_version"] = FORMAT_VERSION + 1
        path = tmp_path / "r.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(VersionMismatch):
            load_report(path)

    def test_report_round_trip(self, tmp_path):
        rep = {"model": "x", "folds": [{"c_index": 0.61}], "aggregate": {"mean": 0.61}}
        path = save_report(tmp_path / "r.json", rep)
        assert load_report(path) == rep

    def test_canonical_rejects_nan(self):
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_document_is_canonical(self):
        text = dumps_document({"b": 1, "a": [1.5, 2]})
        assert text == canonical_json(json.loads(text)) + "\n"
        assert loads_document(text)["a"] == [1.5, 2]


class TestExport:
    def _curves(self):
        c = generate_synthetic(SyntheticSpec(n=60, d_in=2, patches=(1, 2), seed=4))
        return [kaplan_meier(c.records[:30]), kaplan_meier(c.records[30:])]

    def test_km_csv(self, tmp_path):
        curves = self._curves()
        a = write_km_csv(tmp_path / "a.csv", curves, ["Q1", "Q2"]).read_bytes()
        b = write_km_csv(tmp_path / "b.csv", curves, ["Q1", "Q2"]).read_bytes()
        assert a == b
        lines = a.decode().splitlines()
        assert lines[0] == "time,survival,group"
        assert lines[1] == "0.0,1.0,Q1"
        assert len(lines) == 1 + sum(len(cv.time) + 1 for cv in curves)

    def test_km_svg(self):
        curves = self._curves()
        a = km_svg(curves, ["Q1", "Q2"], "title")
        assert a == km_svg(curves, ["Q1", "Q2"], "title")
        assert a.startswith("<svg") and a.count("<path") == 3

    def test_attention_svg(self, trained):
        c, models = trained
        hm = bag_heatmap(models["transformer"], c.bags[0])
        svg = attention_svg(hm)
        assert svg.count("<rect") == 1 + len(c.bags[0].patch_ids)

    def test_attention_svg_needs_coords(self, trained):
        c, models = trained
        bag = EmbeddingBag("p", ("a",), np.zeros((1, 6)))
        with pytest.raises(ValueError):
            attention_svg(bag_heatmap(models["transformer"], bag))
