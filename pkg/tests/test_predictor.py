import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from buildmem import features, gbqr, predictor
from buildmem.errors import ArtifactInvalid, NotFitted, SingleClass
from buildmem.features import ColumnMeta, EncoderState, FeatureMatrix
from buildmem.predictor import apply_policy, snap_to_bins

pos = st.floats(0.01, 1e4, allow_nan=False)


def _toy_classifier(**kw):
    enc = EncoderState("classifier_table1", fitted=True)
    return predictor.ThresholdClassifier(np.zeros(1), 0.0, np.zeros(1), np.ones(1), enc, **kw)


def test_classifier_examples():
    clf = _toy_classifier()
    below_300, below_80, above_300 = clf.decisions([True, True, False], [300, 80, 300], ["a", "b", "c"])
    assert below_300.final_gb == 100 and below_300.strategy == "classifier"
    assert below_80.final_gb == 80 and below_80.clipped
    assert above_300.final_gb == 300


def test_classifier_zero_score_is_below():
    clf = _toy_classifier()
    assert clf.predict_below(np.array([[5.0]])).tolist() == [True]
    with pytest.raises(NotFitted):
        predictor.ThresholdClassifier(None, 0.0, np.zeros(1), np.ones(1), clf.encoder).predict_below(np.zeros((1, 1)))


def _separable(seed=0):
    rng = np.random.default_rng(seed)
    x = np.r_[rng.uniform(0, 45, 60), rng.uniform(55, 200, 40)]
    cols = [ColumnMeta("jobs", "numeric", "jobs")]
    return FeatureMatrix(x[:, None], cols, target=x.copy()), EncoderState("classifier_table1", fitted=True)


def test_separable_toy_full_accuracy():
    m, enc = _separable()
    clf = predictor.train_classifier(m, enc, threshold_gb=50, seed=3)
    assert clf.training_meta["train_accuracy"] == 1.0
    assert np.array_equal(clf.predict_below(m.values), m.target < 50)


def test_classifier_deterministic_per_seed():
    m, enc = _separable(1)
    a = predictor.train_classifier(m, enc, seed=5)
    b = predictor.train_classifier(m, enc, seed=5)
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias and a.version == b.version


def test_single_class():
    m, enc = _separable()
    with pytest.raises(SingleClass):
        predictor.train_classifier(m, enc, threshold_gb=1000)


def test_classifier_records_fpr(small_classifier):
    meta = small_classifier.training_meta
    assert 0 <= meta["false_positive_rate"] <= 1 and meta["reference_accepted_fpr"] == 0.10


@given(st.booleans(), pos, st.floats(1, 200), st.floats(1, 4))
def test_classifier_two_values(below, original, thr, sf):
    clf = _toy_classifier(threshold_gb=thr, safety_factor=sf)
    d = clf.decisions([below], [original], ["t"])[0]
    assert d.final_gb in (original, min(thr * sf, original))
    assert d.final_gb <= original


def test_policy_examples():
    s, f, c = apply_policy([30, 280, 0.1], [300, 300, 300], 1.2)
    assert s.tolist() == pytest.approx([36, 336, 0.12])
    assert f.tolist() == pytest.approx([36, 300, 1])
    assert c.tolist() == [False, True, False]


def test_unclipped_mode_exceeds_original():
    _, f, c = apply_policy([280], [300], 1.2, clip=False)
    assert f[0] == pytest.approx(336) and c[0]


@given(pos, pos, pos, st.floats(1, 3))
def test_never_increase_and_monotone_raw(r1, r2, original, sf):
    lo, hi = sorted((r1, r2))
    _, f, _ = apply_policy([lo, hi], [original, original], sf)
    assert f[0] <= f[1]
    assert np.all(f <= original) and np.all(f > 0)


@given(pos, pos, st.floats(1, 3), st.floats(1, 3))
def test_monotone_in_safety_factor(raw, original, s1, s2):
    lo, hi = sorted((s1, s2))
    assert apply_policy(raw, original, lo)[1] <= apply_policy(raw, original, hi)[1]


def test_snap_examples():
    assert snap_to_bins(36, [32, 64, 128]) == (64.0, False)
    assert snap_to_bins(32, [32, 64]) == (32.0, False)
    assert snap_to_bins(200, [32, 64, 128]) == (128.0, True)
    with pytest.raises(ValueError):
        snap_to_bins(1, [])


def test_ensemble_examples(small_ensemble):
    ens = small_ensemble
    d = ens.decisions(np.array([30.0, 280.0, 0.1]), [300, 300, 300], ["a", "b", "c"])
    assert [x.final_gb for x in d] == pytest.approx([36, 300, 1])
    assert [x.clipped for x in d] == [False, True, False]
    assert all(x.model_version == ens.version for x in d)


def test_max_property(small_ensemble, small_split):
    _, test = small_split
    X = small_ensemble.encode(features.engineer(test, history=small_split[0])).values
    raw = small_ensemble.predict_raw(X)
    a = gbqr.predict(small_ensemble.submodel_a, X)
    b = gbqr.predict(small_ensemble.submodel_b, X)
    assert np.array_equal(raw, np.maximum(a, b))
    assert np.all(raw >= a) and np.all(raw >= b)


def test_ensemble_never_increase(small_ensemble, small_split):
    train, test = small_split
    rows = features.engineer(test, history=train)
    orig = [r.baseline_assigned_gb for r in test]
    for d, o in zip(small_ensemble.refine_rows(rows, orig, [str(i) for i in range(len(rows))]), orig):
        assert 0 < d.final_gb <= o


def test_identical_params_equal_submodels(small_split):
    m, enc, _ = features.featurize(small_split[0])
    p = replace(predictor.DEFAULT_PARAMS_B, n_trees=10)
    ens = predictor.train_ensemble(m, p, p, enc)
    assert np.array_equal(ens.predict_raw(m.values), gbqr.predict(ens.submodel_a, m.values))


def test_constant_target_ensemble(small_split):
    m, enc, _ = features.featurize(small_split[0])
    m = FeatureMatrix(m.values, m.column_meta, np.full(len(m.values), 12.0))
    ens = predictor.train_ensemble(m, encoder=enc)
    assert np.all(ens.predict_raw(m.values) == 12.0)


def test_alpha_mismatch_rejected(small_split):
    m, enc, _ = features.featurize(small_split[0])
    with pytest.raises(gbqr.InvalidParams):
        predictor.train_ensemble(m, predictor.DEFAULT_PARAMS_A, replace(predictor.DEFAULT_PARAMS_B, quantile_alpha=0.5), enc)


def test_ensemble_coverage_dominates_submodels(sample_ensemble):
    ens, m, _ = sample_ensemble
    y = m.target
    cov = lambda p: np.mean(y <= p)
    c_ens = cov(ens.predict_raw(m.values))
    assert c_ens >= min(cov(gbqr.predict(ens.submodel_a, m.values)), cov(gbqr.predict(ens.submodel_b, m.values)))
    assert c_ens >= max(cov(gbqr.predict(ens.submodel_a, m.values)), cov(gbqr.predict(ens.submodel_b, m.values)))


@pytest.mark.parametrize("fixture", ["small_ensemble", "small_classifier"])
def test_envelope_round_trip(fixture, request, tmp_path, small_split):
    model = request.getfixturevalue(fixture)
    path = tmp_path / "m.json"
    predictor.save_envelope(model, path)
    again = predictor.load_envelope(path)
    again.self_check()
    assert again.version == model.version
    assert predictor.dumps(again) == predictor.dumps(model)
    rows = features.engineer(small_split[1], history=small_split[0])[:50]
    orig = [r.baseline_assigned_gb for r in small_split[1]][:50]
    ids = [str(i) for i in range(50)]
    assert again.refine_rows(rows, orig, ids) == model.refine_rows(rows, orig, ids)


def test_attribute_refine_matches_row_refine(small_ensemble, small_split):
    rows = features.engineer(small_split[1], history=small_split[0])[:20]
    for r in rows:
        a = small_ensemble.refine_attributes(features.attributes_from_row(r), 200.0, "x")
        assert a == predictor.ensemble_refine(small_ensemble, r, 200.0, "x")


def test_corrupt_artifacts(small_ensemble, tmp_path):
    d = small_ensemble.to_dict()
    with pytest.raises(ArtifactInvalid):
        predictor.load_envelope("{not json")
    with pytest.raises(ArtifactInvalid):
        predictor.load_envelope(dict(d, format="other"))
    with pytest.raises(ArtifactInvalid):
        predictor.load_envelope(tmp_path / "missing.json")
    broken = json.loads(json.dumps(d))
    broken["submodel_a"]["base_score"] += 50.0
    broken["submodel_b"]["base_score"] += 50.0
    with pytest.raises(ArtifactInvalid):
        predictor.load_envelope(broken).self_check()
    no_smoke = dict(d, smoke={})
    with pytest.raises(ArtifactInvalid):
        predictor.load_envelope(no_smoke).self_check()


def test_passthrough():
    d = predictor.passthrough("t", 64.0)
    assert d.final_gb == d.original_gb == 64.0 and d.strategy == "passthrough" and not d.clipped
    assert predictor.RefinementDecision.from_dict(d.to_dict()) == d
