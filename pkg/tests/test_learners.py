import json
import warnings

import numpy as np
import pytest

from retention_risk.events import to_day
from retention_risk.features import build_feature_matrix, default_feature_specs, fit_encoders
from retention_risk.labels import LabelSpec, PredictionPoint, build_clinic_cohort, build_label_matrix
from retention_risk.learners import (
    FAMILIES,
    LearnerError,
    LearnerSpec,
    TrainedModel,
    feature_importances,
    fit,
    top_contributions,
)
from retention_risk.learners import baselines, logistic

from conftest import make_log, person


# ------------------------------------------------------------------ logistic


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_gradient_matches_finite_differences(rng):
    X = rng.normal(size=(30, 4))
    y = (rng.random(30) < 0.4).astype(float)
    params = rng.normal(size=5)
    fd = central_difference(lambda p: logistic.objective(p, X, y, 0.1), params)
    np.testing.assert_allclose(logistic.gradient(params, X, y, 0.1), fd, rtol=1e-5, atol=1e-8)


def test_intercept_not_penalised():
    X = np.zeros((10, 1))
    y = np.array([1.0] * 8 + [0.0] * 2)
    params, trace, ok = logistic.fit_logistic(X, y, l2_lambda=10.0)
    assert ok
    assert logistic.predict_logistic(params, X)[0] == pytest.approx(0.8, abs=1e-5)


def test_trace_monotone_and_converges(rng):
    X = rng.normal(size=(200, 3))
    y = (rng.random(200) < 1 / (1 + np.exp(-X[:, 0]))).astype(float)
    params, trace, ok = logistic.fit_logistic(X, y, 1e-3)
    assert ok
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert np.max(np.abs(logistic.gradient(params, X, y, 1e-3))) <= 1e-6


def test_non_convergence_warns(rng):
    X = rng.normal(size=(50, 3))
    y = (X[:, 0] > 0).astype(float)  # separable, tiny penalty
    with pytest.warns(logistic.ConvergenceWarning, match="did not converge"):
        _, _, ok = logistic.fit_logistic(X, y, 1e-9, max_iter=5)
    assert not ok


# ------------------------------------------------------------------ specs


def test_spec_defaults_and_group_id():
    spec = LearnerSpec.create("random_forest", {"n_trees": 10}, seed=3)
    assert spec.params["max_features"] == "sqrt"
    assert spec.model_group.startswith("random_forest(bootstrap=true,")
    assert "n_trees=10" in spec.model_group
    # the seed is not part of the group
    assert LearnerSpec.create("random_forest", {"n_trees": 10}, seed=4).model_group == spec.model_group
    assert LearnerSpec.from_dict(spec.to_dict()) == spec
    assert LearnerSpec.create("prior_baseline").model_group == "prior_baseline"


@pytest.mark.parametrize(
    "family, hp, fragment",
    [
        ("svm", {}, "unknown learner family"),
        ("decision_tree", {"depth": 3}, "unknown hyperparameters"),
        ("decision_tree", {"max_depth": 0}, "max_depth"),
        ("random_forest", {"max_samples": 0}, "max_samples"),
        ("gradient_boosted_trees", {"learning_rate": -0.1}, "learning_rate"),
        ("logistic_regression", {"tol": 0}, "tol"),
    ],
)
def test_spec_validation(family, hp, fragment):
    with pytest.raises(LearnerError, match=fragment):
        LearnerSpec.create(family, hp)


def test_unknown_rule_attribute_rejected():
    with pytest.raises(baselines.RuleError, match="unknown attribute"):
        LearnerSpec.create("expert_rules", {"rules": [{"attribute": "shoe_size", "op": ">", "threshold": 1}]})


# ------------------------------------------------------------------ fitting


@pytest.fixture(scope="module")
def matrices(small_log):
    log = small_log
    tr = build_clinic_cohort(log, (log.start + 365, log.start + 900))
    te = build_clinic_cohort(log, (log.start + 1000, log.end - 183))
    specs = default_feature_specs()
    enc = fit_encoders(specs, ["race", "gender"], tr, log)
    X_tr = build_feature_matrix(specs, ["race", "gender"], tr, log, enc)
    X_te = build_feature_matrix(specs, ["race", "gender"], te, log, enc, role="test")
    lab = LabelSpec("access", 183)
    return log, X_tr, build_label_matrix(tr, log, lab), X_te


SMALL = {
    "decision_tree": {"max_depth": 4},
    "random_forest": {"n_trees": 5, "min_samples_leaf": 5},
    "gradient_boosted_trees": {"n_rounds": 5},
    "logistic_regression": {"tol": 1e-4},
}


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_fits_scores_and_roundtrips(family, matrices, tmp_path):
    log, X_tr, y_tr, X_te = matrices
    spec = LearnerSpec.create(family, SMALL.get(family), seed=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit(spec, X_tr, y_tr, split_id=3)
    scores = model.score(X_te, log)
    assert scores.shape == (len(X_te),) and np.all(np.isfinite(scores))
    again = TrainedModel.load(model.save(tmp_path / "m.json"))
    assert np.array_equal(again.score(X_te, log), scores)
    assert again.train_split_id == 3
    with pytest.raises(TypeError):
        model.fitted_state["x"] = 1


def test_prior_scores_equal_prevalence(matrices):
    log, X_tr, y_tr, X_te = matrices
    model = fit(LearnerSpec.create("prior_baseline"), X_tr, y_tr)
    assert np.all(model.score(X_te) == y_tr.labels.mean())


def test_baseline_without_log_errors(matrices):
    log, X_tr, y_tr, X_te = matrices
    model = fit(LearnerSpec.create("expert_rules"), X_tr, y_tr)
    with pytest.raises(LearnerError, match="needs the event log"):
        model.score(X_te)


def test_column_mismatch_named(matrices):
    log, X_tr, y_tr, X_te = matrices
    model = fit(LearnerSpec.create("decision_tree", {"max_depth": 2}), X_tr, y_tr)
    import dataclasses

    cols = list(X_te.columns)
    cols[3], cols[4] = cols[4], cols[3]
    bad = dataclasses.replace(X_te, columns=tuple(cols))
    with pytest.raises(LearnerError, match="feature column 3"):
        model.score(bad)


def test_format_version_checked(matrices, tmp_path):
    log, X_tr, y_tr, X_te = matrices
    path = fit(LearnerSpec.create("prior_baseline"), X_tr, y_tr).save(tmp_path / "m.json")
    d = json.loads(path.read_text())
    d["format_version"] = 99
    with pytest.raises(LearnerError, match="format version"):
        TrainedModel.from_dict(d)


def test_logistic_feature_subset(matrices):
    log, X_tr, y_tr, X_te = matrices
    spec = LearnerSpec.create("logistic_regression", {"features": ["age_years", "race_"], "tol": 1e-4})
    model = fit(spec, X_tr, y_tr)
    used = {name for name, _ in feature_importances(model)}
    assert used and all(n.startswith(("age_years", "race_")) for n in used)


def test_importances_and_contributions(matrices):
    log, X_tr, y_tr, X_te = matrices
    model = fit(LearnerSpec.create("gradient_boosted_trees", {"n_rounds": 10}), X_tr, y_tr)
    imp = feature_importances(model)
    assert sum(w for _, w in imp) == pytest.approx(1.0)
    assert [w for _, w in imp] == sorted((w for _, w in imp), reverse=True)
    top = top_contributions(model, X_te, 3)
    assert len(top) == len(X_te)
    assert all(len(r) <= 3 and all(c > 0 for _, c in r) for r in top)
    assert feature_importances(fit(LearnerSpec.create("prior_baseline"), X_tr, y_tr)) == []


# ------------------------------------------------------------------ baselines


def _vl_log():
    return make_log(
        [person("a", birth="1990-01-01"), person("b", birth=None), person("c")],
        [
            ("a", "viral_load_test", "2015-02-01", 5000, None),
            ("a", "viral_load_test", "2015-08-01", 20, None),
            ("a", "medication", "2015-06-01", None, "ART"),
            ("b", "viral_load_test", "2015-03-01", 900, None),
            ("b", "diagnosis", "2015-01-05", None, "substance_abuse"),
        ],
    )


def test_latest_viral_load_point_in_time():
    log = _vl_log()
    rows = [PredictionPoint("a", to_day("2015-07-01")), PredictionPoint("a", to_day("2015-08-01")),
            PredictionPoint("c", to_day("2015-08-01"))]
    vl = baselines.latest_viral_load(log, rows)
    assert vl[0] == 5000 and vl[1] == 20 and np.isnan(vl[2])


def test_expert_rules_fire_on_known_values_only():
    log = _vl_log()
    rows = [PredictionPoint("a", to_day("2015-07-01")), PredictionPoint("b", to_day("2015-07-01")),
            PredictionPoint("c", to_day("2015-07-01"))]
    attrs = baselines.raw_attributes(log, rows)
    score = baselines.expert_rules_score(attrs, None)
    # a: age 25 (<30), ART for 30 days (<1y), VL 5000 -> 3 rules
    # b: age unknown, no ART, substance abuse, VL 900 -> 2 rules
    # c: age 35, nothing else known -> 0
    assert score.tolist() == [3.0, 2.0, 0.0]


def test_viral_load_ranking_puts_untested_first():
    log = _vl_log()
    rows = [PredictionPoint(e, to_day("2015-09-01")) for e in "abc"]
    s = baselines.viral_load_ranking_score(log, rows)
    assert s[2] > s[1] > s[0]
