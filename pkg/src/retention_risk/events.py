"""Event data model, CSV ingestion/export and log validation.

Dates are day-granular. Internally every date is held as an integer day
number (days since 1970-01-01) so window arithmetic is plain integer math;
``to_day`` / ``from_day`` convert at the boundaries.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

EVENT_TYPES = (
    "hiv_visit",
    "other_visit",
    "viral_load_test",
    "cd4_test",
    "diagnosis",
    "medication",
    "opportunistic_infection",
)
ENTITY_COLUMNS = (
    "entity_id",
    "birth_date",
    "gender",
    "race",
    "zip_code",
    "transmission_category",
    "diagnosis_date",
)
EVENT_COLUMNS = ("entity_id", "event_type", "event_date", "numeric_value", "category_value")
CATEGORICAL_ATTRIBUTES = ("gender", "race", "zip_code", "transmission_category")

# Missing demographics / categories are None and missing dates are NO_DAY,
# never "" -- the feature imputation flags depend on this being unambiguous.
MISSING = None
NO_DAY = np.iinfo(np.int64).min

_EPOCH = dt.date(1970, 1, 1)


class EventLogError(ValueError):
    """Raised when an event log cannot be loaded or violates its invariants."""


def to_day(value) -> int:
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        value = dt.date.fromisoformat(value)
    if isinstance(value, dt.datetime):
        value = value.date()
    return (value - _EPOCH).days


def from_day(day: int) -> dt.date:
    return _EPOCH + dt.timedelta(days=int(day))


def day_str(day: int) -> str:
    return "" if day == NO_DAY else from_day(day).isoformat()


@dataclass(frozen=True, eq=False)
class EventLog:
    """Immutable per-entity event log.

    ``entities`` has one row per entity (dates as int day numbers, NO_DAY when
    missing); ``events`` is sorted by (entity_id, event_date). Callers must
    treat both frames as read-only; derive new logs with :meth:`append` or
    :meth:`shift_dates`.
    """

    entities: pd.DataFrame
    events: pd.DataFrame
    date_range: tuple[int, int]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, entities: pd.DataFrame, events: pd.DataFrame, date_range=None) -> "EventLog":
        entities = entities.loc[:, list(ENTITY_COLUMNS)].copy()
        events = events.loc[:, list(EVENT_COLUMNS)].copy()
        for col in ("birth_date", "diagnosis_date"):
            entities[col] = entities[col].astype(np.int64)
        for col in CATEGORICAL_ATTRIBUTES:
            entities[col] = entities[col].astype(object).where(entities[col].notna(), None)
        entities["entity_id"] = entities["entity_id"].astype(str)
        entities = entities.sort_values("entity_id", kind="stable").reset_index(drop=True)

        events["entity_id"] = events["entity_id"].astype(str)
        events["event_type"] = events["event_type"].astype(str)
        events["event_date"] = events["event_date"].astype(np.int64)
        events["numeric_value"] = events["numeric_value"].astype(float)
        events["category_value"] = events["category_value"].astype(object).where(
            events["category_value"].notna(), None
        )
        events = events.sort_values(["entity_id", "event_date"], kind="stable").reset_index(drop=True)
        if date_range is None:
            if len(events):
                date_range = (int(events["event_date"].min()), int(events["event_date"].max()))
            else:
                raise EventLogError("date_range is required for a log without events")
        date_range = (to_day(date_range[0]), to_day(date_range[1]))
        return cls(entities, events, date_range)

    @property
    def start(self) -> int:
        return self.date_range[0]

    @property
    def end(self) -> int:
        return self.date_range[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        return (
            self.date_range == other.date_range
            and self.entities.equals(other.entities)
            and self.events.equals(other.events)
        )

    def __hash__(self):
        return id(self)

    def append(self, events: pd.DataFrame) -> "EventLog":
        combined = pd.concat([self.events, events.loc[:, list(EVENT_COLUMNS)]], ignore_index=True)
        return EventLog.build(self.entities, combined, self.date_range)

    def shift_dates(self, days: int) -> "EventLog":
        """Uniform day offset applied to every date (anonymisation transform)."""
        entities = self.entities.copy()
        for col in ("birth_date", "diagnosis_date"):
            vals = entities[col].to_numpy()
            entities[col] = np.where(vals == NO_DAY, NO_DAY, vals + days)
        events = self.events.copy()
        events["event_date"] = events["event_date"] + days
        return EventLog.build(entities, events, (self.start + days, self.end + days))

    def censored(self, as_of: int) -> "EventLog":
        """Drop every event dated after ``as_of``."""
        keep = self.events["event_date"].to_numpy() <= as_of
        return EventLog(self.entities, self.events.loc[keep].reset_index(drop=True), self.date_range)

    def entity_attribute(self, name: str) -> dict:
        cache = self._index.setdefault("attr", {})
        if name not in cache:
            cache[name] = dict(zip(self.entities["entity_id"], self.entities[name]))
        return cache[name]

    def event_arrays(self, event_type: str):
        """(entity_ids, days, values, categories) arrays for one event type, sorted."""
        cache = self._index.setdefault("by_type", {})
        if event_type not in cache:
            ev = self.events
            sub = ev.loc[ev["event_type"].to_numpy() == event_type]
            cache[event_type] = (
                sub["entity_id"].to_numpy(dtype=object),
                sub["event_date"].to_numpy(dtype=np.int64),
                sub["numeric_value"].to_numpy(dtype=float),
                sub["category_value"].to_numpy(dtype=object),
            )
        return cache[event_type]

    def visit_days(self, entity_id: str) -> np.ndarray:
        """Sorted distinct hiv_visit days for an entity."""
        cache = self._index.get("visits")
        if cache is None:
            ids, days, _, _ = self.event_arrays("hiv_visit")
            cache = {}
            if len(ids):
                bounds = np.flatnonzero(ids[1:] != ids[:-1]) + 1
                starts = np.r_[0, bounds]
                stops = np.r_[bounds, len(ids)]
                for a, b in zip(starts, stops):
                    cache[ids[a]] = np.unique(days[a:b])
            self._index["visits"] = cache
        return cache.get(entity_id, np.empty(0, dtype=np.int64))


@dataclass
class ValidationReport:
    findings: list = field(default_factory=list)

    def add(self, kind: str, count: int, detail: str = "") -> None:
        if count:
            self.findings.append({"kind": kind, "count": int(count), "detail": detail})

    def count(self, kind: str) -> int:
        return sum(f["count"] for f in self.findings if f["kind"] == kind)

    def __bool__(self) -> bool:
        return bool(self.findings)

    def __str__(self) -> str:
        if not self.findings:
            return "event log valid"
        return "; ".join(f"{f['kind']}: {f['count']} ({f['detail']})" for f in self.findings)


def validate_event_log(log: EventLog) -> ValidationReport:
    """Report invariant violations; an empty report means the log is valid."""
    report = ValidationReport()
    ent, ev = log.entities, log.events

    dup = ent["entity_id"].duplicated()
    report.add("duplicate_entity", dup.sum(), ", ".join(ent.loc[dup, "entity_id"][:5]))

    eid = ev["entity_id"].to_numpy(dtype=object)
    day = ev["event_date"].to_numpy()
    if len(ev) > 1:
        key_prev = list(zip(eid[:-1], day[:-1]))
        key_next = list(zip(eid[1:], day[1:]))
        unsorted = sum(1 for a, b in zip(key_prev, key_next) if a > b)
        report.add("unsorted", unsorted, "events not ordered by (entity_id, event_date)")

    known = set(ent["entity_id"])
    dangling = sorted({e for e in eid if e not in known})
    report.add("dangling", sum(1 for e in eid if e not in known), ", ".join(dangling[:10]))

    out = (day < log.start) | (day > log.end)
    report.add("out_of_range", out.sum(), f"outside [{day_str(log.start)}, {day_str(log.end)}]")

    bad_type = ~ev["event_type"].isin(EVENT_TYPES)
    report.add("unknown_event_type", bad_type.sum(), ", ".join(sorted(set(ev.loc[bad_type, "event_type"]))))

    vals = ev["numeric_value"].to_numpy(dtype=float)
    report.add("negative_value", (vals < 0).sum(), "numeric_value must be >= 0")

    birth = ev["entity_id"].map(log.entity_attribute("birth_date"))
    birth = birth.fillna(NO_DAY).to_numpy(dtype=np.int64)
    early = (birth != NO_DAY) & (day < birth)
    report.add("chronology", early.sum(), "event before entity birth_date")
    return report


# ---------------------------------------------------------------- CSV I/O


def _parse_date(text: str, path, line: int, column: str) -> int:
    if text == "":
        return NO_DAY
    try:
        return to_day(dt.date.fromisoformat(text))
    except ValueError:
        raise EventLogError(f"{path}:{line}: column {column!r}: cannot parse date {text!r}") from None


def _read_rows(path: Path, columns: tuple):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EventLogError(f"{path}: empty file, expected header {','.join(columns)}") from None
        if tuple(h.strip() for h in header) != columns:
            raise EventLogError(f"{path}:1: header {header} does not match {list(columns)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise EventLogError(
                    f"{path}:{line}: expected {len(columns)} fields, got {len(row)}"
                    f" (column {columns[min(len(row), len(columns) - 1)]!r})"
                )
            yield line, row


def ingest_csv(entities_path, events_path, date_range=None) -> EventLog:
    """Load and validate ``entities.csv`` / ``events.csv``.

    ``date_range`` defaults to the span of observed event dates.
    """
    entities_path, events_path = Path(entities_path), Path(events_path)
    ent_rows = []
    for line, row in _read_rows(entities_path, ENTITY_COLUMNS):
        rec = dict(zip(ENTITY_COLUMNS, row))
        if rec["entity_id"] == "":
            raise EventLogError(f"{entities_path}:{line}: column 'entity_id': empty identifier")
        for col in ("birth_date", "diagnosis_date"):
            rec[col] = _parse_date(rec[col], entities_path, line, col)
        for col in CATEGORICAL_ATTRIBUTES:
            rec[col] = rec[col] if rec[col] != "" else MISSING
        ent_rows.append(rec)

    ev_rows = []
    for line, row in _read_rows(events_path, EVENT_COLUMNS):
        rec = dict(zip(EVENT_COLUMNS, row))
        if rec["event_type"] not in EVENT_TYPES:
            raise EventLogError(
                f"{events_path}:{line}: column 'event_type': unknown event type {rec['event_type']!r}"
            )
        if rec["event_date"] == "":
            raise EventLogError(f"{events_path}:{line}: column 'event_date': missing date")
        rec["event_date"] = _parse_date(rec["event_date"], events_path, line, "event_date")
        text = rec["numeric_value"]
        try:
            value = float(text) if text != "" else math.nan
        except ValueError:
            raise EventLogError(
                f"{events_path}:{line}: column 'numeric_value': not a number {text!r}"
            ) from None
        if not math.isnan(value) and (value < 0 or math.isinf(value)):
            raise EventLogError(f"{events_path}:{line}: column 'numeric_value': invalid value {text!r}")
        rec["numeric_value"] = value
        rec["category_value"] = rec["category_value"] if rec["category_value"] != "" else MISSING
        rec["_line"] = line
        ev_rows.append(rec)

    known = {r["entity_id"] for r in ent_rows}
    if len(known) != len(ent_rows):
        seen, dups = set(), []
        for r in ent_rows:
            if r["entity_id"] in seen:
                dups.append(r["entity_id"])
            seen.add(r["entity_id"])
        raise EventLogError(f"{entities_path}: duplicate entity_id: {', '.join(sorted(set(dups)))}")
    dangling = sorted({r["entity_id"] for r in ev_rows if r["entity_id"] not in known})
    if dangling:
        lines = [str(r["_line"]) for r in ev_rows if r["entity_id"] in set(dangling)][:10]
        raise EventLogError(
            f"{events_path}: events reference unknown entity_id: {', '.join(dangling)}"
            f" (lines {', '.join(lines)})"
        )

    entities = pd.DataFrame(ent_rows, columns=list(ENTITY_COLUMNS))
    events = pd.DataFrame(ev_rows, columns=list(EVENT_COLUMNS))
    log = EventLog.build(entities, events, date_range)
    report = validate_event_log(log)
    if report:
        raise EventLogError(f"{events_path}: {report}")
    return log


def _fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def export_csv(log: EventLog, directory, date_offset_days: int = 0) -> tuple[Path, Path]:
    """Write entities.csv and events.csv; optionally shift every date uniformly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if date_offset_days:
        log = log.shift_dates(date_offset_days)
    ent_path, ev_path = directory / "entities.csv", directory / "events.csv"
    with open(ent_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENTITY_COLUMNS)
        for rec in log.entities.itertuples(index=False):
            w.writerow(
                [
                    rec.entity_id,
                    day_str(rec.birth_date),
                    _fmt_value(rec.gender),
                    _fmt_value(rec.race),
                    _fmt_value(rec.zip_code),
                    _fmt_value(rec.transmission_category),
                    day_str(rec.diagnosis_date),
                ]
            )
    with open(ev_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for rec in log.events.itertuples(index=False):
            w.writerow(
                [
                    rec.entity_id,
                    rec.event_type,
                    day_str(rec.event_date),
                    _fmt_value(float(rec.numeric_value)),
                    _fmt_value(rec.category_value),
                ]
            )
    return ent_path, ev_path
