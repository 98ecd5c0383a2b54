import math

import numpy as np
import pytest

from retention_risk.events import to_day
from retention_risk.features import (
    WINDOWS,
    AggregateSpec,
    FeatureError,
    aggregate_values,
    build_feature_matrix,
    default_feature_specs,
    fit_encoders,
)
from retention_risk.labels import PredictionPoint, build_clinic_cohort

from conftest import make_log, person


def oracle(spec, log, point):
    """Straight filter over the raw events, one row at a time."""
    event_type, _, category = spec.source.partition(":")
    ev = log.events
    mask = ev["event_type"] == event_type
    if category:
        mask &= ev["category_value"] == category
    if spec.spatial_group == "zip_code":
        zips = log.entity_attribute("zip_code")
        z = zips.get(point.entity_id)
        mask &= ev["entity_id"].map(zips) == z if z is not None else False
    else:
        mask &= ev["entity_id"] == point.entity_id
    days = ev["event_date"]
    mask &= days <= point.as_of
    w = WINDOWS[spec.window]
    if w is not None:
        mask &= days > point.as_of - w
    sub = ev[mask]
    if spec.function == "count":
        return float(len(sub))
    if len(sub) == 0:
        return math.nan
    if spec.function == "days_since_last":
        return float(point.as_of - sub["event_date"].max())
    vals = sub["numeric_value"].to_numpy()
    if spec.function == "stddev":
        return float(np.std(vals, ddof=1)) if len(vals) >= 2 else math.nan
    return float({"mean": np.mean, "min": np.min, "max": np.max}[spec.function](vals))


def test_default_specs_match_oracle(small_log):
    rng = np.random.default_rng(0)
    cohort = build_clinic_cohort(small_log, (small_log.start + 200, small_log.end))
    rows = [cohort[i] for i in rng.choice(len(cohort), 60, replace=False)]
    for spec in default_feature_specs():
        got = aggregate_values(spec, small_log, rows)
        want = np.array([oracle(spec, small_log, r) for r in rows])
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9, equal_nan=True, err_msg=spec.name)


def _log():
    return make_log(
        [person("a", zip_code="1"), person("b", zip_code="1", race=None), person("c", zip_code="2", birth=None)],
        [
            ("a", "viral_load_test", "2015-01-10", 100, None),
            ("a", "viral_load_test", "2015-06-10", 300, None),
            ("a", "viral_load_test", "2016-06-10", 5000, None),
            ("a", "hiv_visit", "2015-01-10", None, None),
            ("b", "viral_load_test", "2015-03-10", 50, None),
            ("b", "diagnosis", "2015-03-10", None, "substance_abuse"),
            ("c", "hiv_visit", "2015-02-01", None, None),
        ],
    )


def test_window_boundaries():
    log = _log()
    p = PredictionPoint("a", to_day("2016-01-10"))
    # 2015-01-10 is exactly 365 days back, so outside (as_of - 365, as_of]
    assert aggregate_values(AggregateSpec("viral_load_test", "count", "count", "365d"), log, [p])[0] == 1
    assert aggregate_values(AggregateSpec("viral_load_test", "count", "count", "all_history"), log, [p])[0] == 2
    mean = AggregateSpec("viral_load_test", "numeric_value", "mean", "all_history")
    assert aggregate_values(mean, log, [p])[0] == 200
    sd = AggregateSpec("viral_load_test", "numeric_value", "stddev", "all_history")
    assert aggregate_values(sd, log, [p])[0] == pytest.approx(np.std([100, 300], ddof=1))
    assert math.isnan(aggregate_values(sd, log, [PredictionPoint("b", to_day("2016-01-10"))])[0])
    zip_count = AggregateSpec("viral_load_test", "count", "count", "all_history", "zip_code")
    assert aggregate_values(zip_count, log, [p])[0] == 3  # a's two tests plus b's


def test_empty_window_is_missing_not_zero():
    log = _log()
    p = PredictionPoint("c", to_day("2015-06-01"))
    assert aggregate_values(AggregateSpec("viral_load_test", "count", "count", "365d"), log, [p])[0] == 0
    assert math.isnan(aggregate_values(AggregateSpec("viral_load_test", "numeric_value", "max", "365d"), log, [p])[0])


def test_future_events_do_not_change_features(small_log):
    cohort = build_clinic_cohort(small_log, (small_log.start + 300, small_log.start + 700))
    rows = cohort[::7]
    for spec in default_feature_specs():
        full = aggregate_values(spec, small_log, rows)
        for r in rows[:10]:
            cut = aggregate_values(spec, small_log.censored(r.as_of), [r])[0]
            i = rows.index(r)
            assert (math.isnan(cut) and math.isnan(full[i])) or cut == pytest.approx(full[i], rel=1e-12), spec.name


def test_encoder_imputes_with_training_mean_and_flags():
    log = _log()
    specs = [AggregateSpec("viral_load_test", "numeric_value", "mean", "365d")]
    train = [PredictionPoint("a", to_day("2015-07-01")), PredictionPoint("b", to_day("2015-07-01"))]
    state = fit_encoders(specs, ["race"], train, log)
    name = specs[0].name
    assert state.imputation[name] == pytest.approx((200 + 50) / 2)
    assert state.vocabulary["race"] == ("Black",)
    test = [PredictionPoint("c", to_day("2015-07-01"))]
    X = build_feature_matrix(specs, ["race"], test, log, state, role="test")
    assert X.column(name)[0] == pytest.approx(125)
    assert X.column(f"{name}_imputed")[0] == 1
    assert X.column("age_years_imputed")[0] == 1
    assert X.column("race_Black")[0] == 1 and X.column("race_missing")[0] == 0
    assert list(X.columns) == sorted(X.columns)


def test_unseen_category_goes_to_missing():
    log = _log()
    state = fit_encoders([], ["race"], [PredictionPoint("b", to_day("2015-07-01"))], log)
    assert state.vocabulary["race"] == ()
    X = build_feature_matrix([], ["race"], [PredictionPoint("a", to_day("2015-07-01"))], log, state)
    assert X.column("race_missing")[0] == 1


def test_degenerate_column_warns(caplog):
    log = _log()
    specs = [AggregateSpec("cd4_test", "numeric_value", "mean", "365d")]
    state = fit_encoders(specs, [], [PredictionPoint("a", to_day("2015-07-01"))], log)
    assert state.imputation[specs[0].name] == 0.0
    assert any("degenerate column" in w for w in state.warnings)


def test_encoder_state_roundtrip(small_log):
    rows = build_clinic_cohort(small_log, (small_log.start + 200, small_log.start + 400))
    state = fit_encoders(default_feature_specs(), ["race"], rows, small_log)
    from retention_risk.features import EncoderState

    again = EncoderState.from_dict(state.to_dict())
    assert again.columns == state.columns and dict(again.imputation) == dict(state.imputation)


@pytest.mark.parametrize(
    "args",
    [("lab", "count", "count", "365d"), ("cd4_test", "count", "mean", "365d"),
     ("cd4_test", "numeric_value", "mean", "30d"), ("cd4_test", "numeric_value", "mean", "365d", "county")],
)
def test_bad_specs(args):
    with pytest.raises(FeatureError):
        AggregateSpec(*args)


def test_parse_and_name():
    spec = AggregateSpec.parse("diagnosis:substance_abuse/count/count/all_history")
    assert spec.name == "diagnosis_substance_abuse_count_count_all_history"
    assert AggregateSpec.parse("hiv_visit/count/count/365d/zip_code").name.endswith("_zip")


def test_rows_outside_log_rejected():
    log = _log()
    with pytest.raises(FeatureError, match="outside log range"):
        fit_encoders([], [], [PredictionPoint("a", to_day("2020-01-01"))], log)
