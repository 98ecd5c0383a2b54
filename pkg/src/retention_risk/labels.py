"""Prediction cohorts and retention / access-to-care outcome labels.

Outcome windows are ``(as_of, as_of + window_days]``: the as-of visit itself
never counts, the last day of the window does.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventLog, day_str, to_day

CONTEXTS = ("clinic_appointment", "monthly_roster")
ROSTER_LOOKBACK_DAYS = 365


class LabelError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PredictionPoint:
    entity_id: str
    as_of: int
    context: str = "clinic_appointment"

    @property
    def key(self) -> tuple[str, int]:
        return (self.entity_id, self.as_of)


@dataclass(frozen=True)
class LabelSpec:
    kind: str
    window_days: int
    min_gap_days: int = 90

    def __post_init__(self):
        if self.kind not in ("retention", "access"):
            raise ValueError(f"label kind must be 'retention' or 'access', got {self.kind!r}")
        if self.window_days <= 0:
            raise ValueError("window_days must be > 0")
        if self.kind == "retention" and not self.min_gap_days < self.window_days:
            raise ValueError("min_gap_days must be < window_days")


@dataclass(frozen=True)
class LabelMatrix:
    rows: tuple
    labels: np.ndarray
    spec: LabelSpec

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else float("nan")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", "as_of", "label"])
            for p, y in zip(self.rows, self.labels):
                w.writerow([p.entity_id, day_str(p.as_of), int(y)])
        return path


def _check_sorted(visits) -> np.ndarray:
    visits = np.asarray(visits, dtype=np.int64)
    if len(visits) > 1 and np.any(np.diff(visits) < 0):
        raise LabelError("visit dates must be sorted ascending")
    return visits


def _in_window(visits: np.ndarray, as_of: int, window_days: int) -> np.ndarray:
    lo = np.searchsorted(visits, as_of, side="right")
    hi = np.searchsorted(visits, as_of + window_days, side="right")
    return visits[lo:hi]


def retention_label(visits, as_of, window_days: int = 365, min_gap_days: int = 90) -> int:
    """1 (not retained) unless two window visits lie more than ``min_gap_days`` apart."""
    visits = _check_sorted(visits)
    inside = _in_window(visits, to_day(as_of), window_days)
    # the widest pair is first vs last; any qualifying pair implies it qualifies
    if len(inside) >= 2 and inside[-1] - inside[0] > min_gap_days:
        return 0
    return 1


def access_label(visits, as_of, window_days: int) -> int:
    """1 (did not access care) unless a visit falls in the outcome window."""
    visits = _check_sorted(visits)
    return 0 if len(_in_window(visits, to_day(as_of), window_days)) else 1


def _check_period(log: EventLog, start: int, end: int) -> None:
    if end < start:
        raise LabelError(f"empty period [{day_str(start)}, {day_str(end)}]")
    if start < log.start or end > log.end:
        raise LabelError(
            f"period [{day_str(start)}, {day_str(end)}] outside log range"
            f" [{day_str(log.start)}, {day_str(log.end)}]"
        )


def build_clinic_cohort(log: EventLog, period) -> list[PredictionPoint]:
    """One point per distinct (entity, hiv_visit day) inside ``period``."""
    start, end = (to_day(d) for d in period)
    _check_period(log, start, end)
    ids, days, _, _ = log.event_arrays("hiv_visit")
    mask = (days >= start) & (days <= end)
    pairs = sorted(set(zip(ids[mask], days[mask].tolist())))
    return [PredictionPoint(e, int(d), "clinic_appointment") for e, d in pairs]


def build_roster_cohort(log: EventLog, as_of) -> list[PredictionPoint]:
    """Entities with a CD4 or viral-load test in ``[as_of - 365d, as_of]``."""
    as_of = to_day(as_of)
    if not log.start <= as_of <= log.end:
        raise LabelError(f"as_of {day_str(as_of)} outside log range")
    members = set()
    for event_type in ("cd4_test", "viral_load_test"):
        ids, days, _, _ = log.event_arrays(event_type)
        mask = (days >= as_of - ROSTER_LOOKBACK_DAYS) & (days <= as_of)
        members.update(ids[mask])
    return [PredictionPoint(e, as_of, "monthly_roster") for e in sorted(members)]


def build_label_matrix(cohort, log: EventLog, spec: LabelSpec) -> LabelMatrix:
    rows = tuple(cohort)
    labels = np.empty(len(rows), dtype=np.int8)
    for i, point in enumerate(rows):
        if point.as_of + spec.window_days > log.end:
            raise LabelError(
                f"outcome window for {point.entity_id} at {day_str(point.as_of)} ends"
                f" {day_str(point.as_of + spec.window_days)}, after log end {day_str(log.end)}"
            )
        visits = log.visit_days(point.entity_id)
        if spec.kind == "retention":
            labels[i] = retention_label(visits, point.as_of, spec.window_days, spec.min_gap_days)
        else:
            labels[i] = access_label(visits, point.as_of, spec.window_days)
    return LabelMatrix(rows, labels, spec)
