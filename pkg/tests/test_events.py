import math

import numpy as np
import pytest

from retention_risk.events import (
    NO_DAY,
    EventLogError,
    day_str,
    export_csv,
    from_day,
    ingest_csv,
    to_day,
    validate_event_log,
)

from conftest import make_log, person


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


ENT_HEADER = "entity_id,birth_date,gender,race,zip_code,transmission_category,diagnosis_date\n"
EV_HEADER = "entity_id,event_type,event_date,numeric_value,category_value\n"


def test_day_roundtrip():
    assert to_day("1970-01-02") == 1
    assert day_str(to_day("2016-02-29")) == "2016-02-29"
    assert from_day(0).isoformat() == "1970-01-01"
    assert day_str(NO_DAY) == ""


def test_events_sorted_and_missing_is_none():
    log = make_log(
        [person("b", race=None), person("a")],
        [("b", "hiv_visit", "2015-03-01", None, None), ("a", "hiv_visit", "2015-05-01", None, None),
         ("a", "viral_load_test", "2015-02-01", 40, None)],
    )
    assert list(log.events["entity_id"]) == ["a", "a", "b"]
    assert list(log.events["event_date"]) == sorted(log.events["event_date"][:2]) + [to_day("2015-03-01")]
    assert log.entity_attribute("race")["b"] is None
    assert list(log.visit_days("a")) == [to_day("2015-05-01")]
    assert len(log.visit_days("nobody")) == 0


def test_roundtrip_csv(tmp_path, small_log):
    ent, ev = export_csv(small_log, tmp_path)
    again = ingest_csv(ent, ev, small_log.date_range)
    assert again == small_log


def test_shifted_export_moves_every_date(tmp_path):
    log = make_log([person("a", dx=None)], [("a", "hiv_visit", "2015-03-01", None, None)])
    ent, ev = export_csv(log, tmp_path, date_offset_days=10)
    again = ingest_csv(ent, ev, ("2015-01-11", "2018-01-10"))
    assert again.events["event_date"].iloc[0] == to_day("2015-03-11")
    assert again.entities["diagnosis_date"].iloc[0] == NO_DAY


def test_censored_drops_later_events(small_log):
    cut = small_log.start + 400
    c = small_log.censored(cut)
    assert c.events["event_date"].max() <= cut
    assert len(c.events) < len(small_log.events)


def test_validate_reports_chronology():
    log = make_log([person("a", birth="2016-01-01")], [("a", "hiv_visit", "2015-03-01", None, None)])
    report = validate_event_log(log)
    assert report.count("chronology") == 1
    assert "chronology" in str(report)


def test_ingest_unknown_entity_names_lines(tmp_path):
    ent = _write(tmp_path / "e.csv", ENT_HEADER + "a,1980-01-01,male,Black,60601,MSM,2010-01-01\n")
    ev = _write(tmp_path / "v.csv", EV_HEADER + "a,hiv_visit,2015-01-01,,\nzz,hiv_visit,2015-01-02,,\n")
    with pytest.raises(EventLogError, match=r"unknown entity_id: zz \(lines 3\)"):
        ingest_csv(ent, ev)


@pytest.mark.parametrize(
    "row, fragment",
    [
        ("a,hiv_visit,2015-13-01,,", "column 'event_date'"),
        ("a,dentist,2015-01-01,,", "unknown event type"),
        ("a,viral_load_test,2015-01-01,-3,", "invalid value"),
        ("a,viral_load_test,2015-01-01,abc,", "not a number"),
        ("a,hiv_visit,2015-01-01", "expected 5 fields"),
    ],
)
def test_ingest_rejects_bad_rows(tmp_path, row, fragment):
    ent = _write(tmp_path / "e.csv", ENT_HEADER + "a,1980-01-01,male,Black,60601,MSM,2010-01-01\n")
    ev = _write(tmp_path / "v.csv", EV_HEADER + row + "\n")
    with pytest.raises(EventLogError, match=fragment) as info:
        ingest_csv(ent, ev)
    assert "v.csv:2" in str(info.value)


def test_ingest_empty_fields_are_missing(tmp_path):
    ent = _write(tmp_path / "e.csv", ENT_HEADER + "a,,,,,,\n")
    ev = _write(tmp_path / "v.csv", EV_HEADER + "a,hiv_visit,2015-01-01,,\n")
    log = ingest_csv(ent, ev)
    row = log.entities.iloc[0]
    assert row["birth_date"] == NO_DAY and row["race"] is None
    assert math.isnan(log.events["numeric_value"].iloc[0])
    assert log.events["category_value"].iloc[0] is None


def test_duplicate_entity_rejected(tmp_path):
    line = "a,1980-01-01,male,Black,60601,MSM,2010-01-01\n"
    ent = _write(tmp_path / "e.csv", ENT_HEADER + line + line)
    ev = _write(tmp_path / "v.csv", EV_HEADER)
    with pytest.raises(EventLogError, match="duplicate entity_id: a"):
        ingest_csv(ent, ev, ("2015-01-01", "2015-12-31"))


def test_append_keeps_order(small_log):
    extra = small_log.events.iloc[:3].copy()
    grown = small_log.append(extra)
    assert len(grown.events) == len(small_log.events) + 3
    keys = list(zip(grown.events["entity_id"], grown.events["event_date"]))
    assert keys == sorted(keys)
    assert np.array_equal(small_log.events["event_date"], small_log.events["event_date"])  # untouched
