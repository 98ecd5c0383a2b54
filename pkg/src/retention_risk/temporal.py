"""Temporal train/test splits with outcome-lag aware training cutoffs."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from dateutil.relativedelta import relativedelta

from .events import EventLog, day_str, from_day, to_day
from .features import FeatureMatrix, build_feature_matrix


class SplitError(ValueError):
    pass


_DURATION = re.compile(r"^\s*(\d+)\s*(day|days|d|month|months|m|year|years|y)\s*$")


def parse_duration(text) -> relativedelta:
    """'1 month', '12 months', '1 year', '183 days' -> relativedelta."""
    if isinstance(text, relativedelta):
        return text
    m = _DURATION.match(str(text))
    if not m:
        raise ValueError(f"cannot parse duration {text!r}")
    n, unit = int(m.group(1)), m.group(2)[0]
    return {"d": relativedelta(days=n), "m": relativedelta(months=n), "y": relativedelta(years=n)}[unit]


def _add(day: int, delta: relativedelta, times: int = 1) -> int:
    return to_day(from_day(day) + delta * times)


@dataclass(frozen=True)
class TemporalConfig:
    feature_start: int
    data_end: int
    update_frequency: relativedelta
    label_window_days: int
    test_span: relativedelta | None = None
    min_train_history: relativedelta = relativedelta(months=12)
    sliding_window: relativedelta | None = None  # growing window when None
    train_as_of_frequency: relativedelta | None = None  # roster scenario only

    @classmethod
    def create(cls, feature_start, data_end, update_frequency, label_window_days, test_span=None,
               min_train_history="12 months", sliding_window=None, train_as_of_frequency=None):
        return cls(
            feature_start=to_day(feature_start),
            data_end=to_day(data_end),
            update_frequency=parse_duration(update_frequency),
            label_window_days=int(label_window_days),
            test_span=parse_duration(test_span) if test_span else None,
            min_train_history=parse_duration(min_train_history),
            sliding_window=parse_duration(sliding_window) if sliding_window else None,
            train_as_of_frequency=parse_duration(train_as_of_frequency) if train_as_of_frequency else None,
        )

    def __post_init__(self):
        if not self.feature_start < self.data_end:
            raise SplitError("feature_start must precede data_end")
        if self.label_window_days <= 0:
            raise SplitError("label_window_days must be > 0")


@dataclass(frozen=True)
class TimeSplit:
    split_id: int
    train_period: tuple[int, int]
    test_period: tuple[int, int]
    train_label_cutoff: int
    test_label_cutoff: int

    @property
    def test_start(self) -> int:
        return self.test_period[0]

    def describe(self) -> str:
        return (
            f"split {self.split_id}: train {day_str(self.train_period[0])}..{day_str(self.train_period[1])}"
            f" test {day_str(self.test_period[0])}..{day_str(self.test_period[1])}"
        )


def generate_splits(config: TemporalConfig) -> list[TimeSplit]:
    """Test periods tile ``[feature_start + min_train_history, data_end - label_window]``.

    Each split trains on every as-of date whose outcome window closes on or
    before the test start.
    """
    first = _add(config.feature_start, config.min_train_history)
    last = config.data_end - config.label_window_days
    if first > last:
        earliest = _add(config.feature_start, config.min_train_history) + config.label_window_days
        raise SplitError(
            f"no feasible split: data_end {day_str(config.data_end)} too early;"
            f" earliest feasible data_end is {day_str(earliest)}"
        )
    span = config.test_span or config.update_frequency
    splits = []
    k = 0
    while True:
        test_start = _add(first, config.update_frequency, k)
        if test_start > last:
            break
        test_end = min(_add(test_start, span) - 1, last)
        train_end = test_start - config.label_window_days
        train_start = config.feature_start
        if config.sliding_window is not None:
            train_start = max(train_start, to_day(from_day(train_end) - config.sliding_window))
        if train_end < train_start:
            k += 1
            continue
        splits.append(
            TimeSplit(
                split_id=len(splits),
                train_period=(train_start, train_end),
                test_period=(test_start, test_end),
                train_label_cutoff=train_end + config.label_window_days,
                test_label_cutoff=test_end + config.label_window_days,
            )
        )
        k += 1
    if not splits:
        raise SplitError("no feasible split for this configuration")
    return splits


def roster_as_of_dates(period, frequency: relativedelta, anchor: int | None = None) -> list[int]:
    """As-of dates stepping by ``frequency`` from ``anchor`` (default period start) inside ``period``."""
    start, end = period
    anchor = start if anchor is None else anchor
    out, k = [], 0
    while True:
        d = _add(anchor, frequency, k)
        if d > end:
            break
        if d >= start:
            out.append(d)
        k += 1
    return out


def splits_to_csv(splits, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split_id", "train_start", "train_end", "test_start", "test_end"])
        for s in splits:
            w.writerow([s.split_id, day_str(s.train_period[0]), day_str(s.train_period[1]),
                        day_str(s.test_period[0]), day_str(s.test_period[1])])
    return path


def check_leakage(split: TimeSplit, features: FeatureMatrix, labels, log: EventLog | None = None,
                  test_features: FeatureMatrix | None = None, sample_dates: int | None = 4,
                  rows_per_date: int = 50) -> list[str]:
    """Findings for label windows crossing the test start, features that see the
    future, and encoders fitted on test-period rows. ``[]`` means clean.

    ``features``/``labels`` are the training matrices. Feature recomputation on
    the censored log needs ``log`` and runs on up to ``rows_per_date`` rows at
    each of ``sample_dates`` evenly spaced as-of dates (every date when None).
    """
    findings = []
    window = labels.spec.window_days
    for p in labels.rows:
        if p.as_of + window > split.test_start:
            findings.append(
                f"label_window: train row {p.entity_id}@{day_str(p.as_of)} outcome window ends"
                f" {day_str(p.as_of + window)} after test start {day_str(split.test_start)}"
            )

    state = features.encoder_state
    test_rows = set()
    if test_features is not None:
        test_rows = {r.key for r in test_features.rows}
        if test_features.encoder_state is not state and test_features.encoder_state.fit_rows != state.fit_rows:
            findings.append("encoder: test matrix encoded with a different encoder state than training")
    leaked = sorted(k for k in state.fit_rows if k in test_rows or k[1] > split.train_period[1])
    if leaked:
        e, d = leaked[0]
        findings.append(f"encoder: fitted on {len(leaked)} rows outside the training period (first {e}@{day_str(d)})")

    if log is not None:
        matrices = [features] + ([test_features] if test_features is not None else [])
        for fm in matrices:
            by_day: dict[int, list[int]] = {}
            for i, r in enumerate(fm.rows):
                by_day.setdefault(r.as_of, []).append(i)
            days = sorted(by_day)
            if sample_dates is not None and len(days) > sample_dates:
                days = [days[j] for j in np.linspace(0, len(days) - 1, sample_dates).astype(int)]
            for as_of in days:
                idx = by_day[as_of]
                if len(idx) > rows_per_date:
                    idx = [idx[j] for j in np.linspace(0, len(idx) - 1, rows_per_date).astype(int)]
                censored = log.censored(as_of)
                rows = [fm.rows[i] for i in idx]
                again = build_feature_matrix(state.specs, state.categoricals, rows, censored, fm.encoder_state,
                                             zip_attributes=fm.zip_attributes, role=fm.role)
                diff = ~np.isclose(again.values, fm.values[idx], rtol=1e-9, atol=1e-9)
                if diff.any():
                    r, c = np.argwhere(diff)[0]
                    p = rows[r]
                    findings.append(
                        f"feature: {fm.columns[c]} for {p.entity_id}@{day_str(p.as_of)} changes when"
                        f" events after the as-of date are removed"
                    )
    return findings

