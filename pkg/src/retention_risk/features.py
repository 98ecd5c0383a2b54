"""As-of-date feature vectors from declarative time/space aggregations.

Every aggregate looks at events in ``(as_of - window, as_of]`` (or
``(-inf, as_of]`` for all history), grouped either by entity or by the
entity's zip code. Aggregation is vectorised over rows: events of one source
are sorted by ``(group, day)`` and each row's window becomes a slice
``[lo, hi)`` found by binary search. Means and deviations are summed over
the slice itself, min/max come from a sparse table.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType

import numpy as np
import pandas as pd
from numba import njit

from .events import EVENT_TYPES, NO_DAY, EventLog, day_str

log_ = logging.getLogger(__name__)

QUANTITIES = ("count", "numeric_value")
FUNCTIONS = ("count", "mean", "min", "max", "stddev", "days_since_last")
WINDOWS = {"183d": 183, "365d": 365, "1095d": 1095, "all_history": None}
SPATIAL = ("none", "zip_code")
DEMOGRAPHIC_NUMERIC = ("age_years", "days_since_diagnosis")


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class AggregateSpec:
    source: str  # event type, optionally "type:category" to filter on category_value
    quantity: str = "count"
    function: str = "count"
    window: str = "all_history"
    spatial_group: str = "none"

    def __post_init__(self):
        event_type = self.source.split(":", 1)[0]
        if event_type not in EVENT_TYPES:
            raise FeatureError(f"unknown event type in source {self.source!r}")
        if self.quantity not in QUANTITIES:
            raise FeatureError(f"quantity must be one of {QUANTITIES}")
        if self.function not in FUNCTIONS:
            raise FeatureError(f"function must be one of {FUNCTIONS}")
        if self.window not in WINDOWS:
            raise FeatureError(f"window must be one of {tuple(WINDOWS)}")
        if self.spatial_group not in SPATIAL:
            raise FeatureError(f"spatial_group must be one of {SPATIAL}")
        if (self.function == "count") != (self.quantity == "count") and self.function != "days_since_last":
            raise FeatureError("function 'count' requires quantity 'count' and vice versa")

    @property
    def name(self) -> str:
        source = self.source.replace(":", "_")
        suffix = "_zip" if self.spatial_group == "zip_code" else ""
        return f"{source}_{self.quantity}_{self.function}_{self.window}{suffix}"

    @property
    def imputable(self) -> bool:
        return self.function != "count"

    @classmethod
    def parse(cls, text: str) -> "AggregateSpec":
        """``source/quantity/function/window[/zip_code]``."""
        parts = text.split("/")
        if len(parts) not in (4, 5):
            raise FeatureError(f"cannot parse aggregate spec {text!r}")
        return cls(*parts)


# ------------------------------------------------------------------ indexing


def _sparse_table(values: np.ndarray, op):
    table = [values]
    k = 1
    while 2 * k <= len(values):
        prev = table[-1]
        table.append(op(prev[:-k], prev[k:]))
        k *= 2
    return table


def _range_query(table, lo, hi, op, empty):
    out = np.full(len(lo), empty, dtype=float)
    length = hi - lo
    ok = length > 0
    if not ok.any():
        return out
    level = np.zeros(len(lo), dtype=np.int64)
    level[ok] = np.floor(np.log2(length[ok])).astype(np.int64)
    for lvl in np.unique(level[ok]):
        sel = ok & (level == lvl)
        t = table[lvl]
        a = t[lo[sel]]
        b = t[hi[sel] - (1 << lvl)]
        out[sel] = op(a, b)
    return out


@njit(cache=True)
def _segment_moments(values, lo, hi):
    """Mean and sample stddev of values[lo:hi] per row, two-pass.

    Summing only the window's own events keeps the result independent of
    events elsewhere in the log (prefix sums would not be).
    """
    n = len(lo)
    mean = np.full(n, np.nan)
    std = np.full(n, np.nan)
    for i in range(n):
        m = hi[i] - lo[i]
        if m == 0:
            continue
        s = 0.0
        for j in range(lo[i], hi[i]):
            s += values[j]
        mu = s / m
        mean[i] = mu
        if m >= 2:
            ss = 0.0
            for j in range(lo[i], hi[i]):
                d = values[j] - mu
                ss += d * d
            std[i] = np.sqrt(ss / (m - 1))
    return mean, std


class _SourceIndex:
    """Events of one source sorted by (group code, day)."""

    def __init__(self, log: EventLog, source: str, spatial: str, numeric: bool):
        event_type, _, category = source.partition(":")
        ids, days, values, cats = log.event_arrays(event_type)
        mask = np.ones(len(ids), dtype=bool)
        if category:
            mask &= cats == category
        if numeric:
            mask &= ~np.isnan(values)
        ids, days, values = ids[mask], days[mask], values[mask]
        if spatial == "zip_code":
            zips = log.entity_attribute("zip_code")
            groups = np.array([zips.get(e) for e in ids], dtype=object)
            keep = np.array([g is not None for g in groups], dtype=bool)
            groups, days, values = groups[keep], days[keep], values[keep]
        else:
            groups = ids
        self.codes = {g: i for i, g in enumerate(sorted(set(groups.tolist())))}
        gcode = np.fromiter((self.codes[g] for g in groups), dtype=np.int64, count=len(groups))
        order = np.lexsort((days, gcode))
        self.gcode = gcode[order]
        self.days = days[order]
        self.values = values[order]
        self.base = int(min(log.start, self.days.min() if len(self.days) else log.start)) - 4000
        self.stride = int(max(log.end, self.days.max() if len(self.days) else log.end)) - self.base + 4000
        self.keys = self.gcode * self.stride + (self.days - self.base)
        if numeric:
            self.min_table = _sparse_table(self.values, np.minimum)
            self.max_table = _sparse_table(self.values, np.maximum)

    def bounds(self, groups, as_of: np.ndarray, window_days):
        code = np.array([self.codes.get(g, -1) if g is not None else -1 for g in groups], dtype=np.int64)
        known = code >= 0
        safe = np.where(known, code, 0)
        hi_off = np.clip(as_of - self.base, -1, self.stride - 2)
        hi = np.searchsorted(self.keys, safe * self.stride + hi_off, side="right")
        if window_days is None:
            lo_off = np.full(len(as_of), -1)
        else:
            lo_off = np.clip(as_of - window_days - self.base, -1, self.stride - 2)
        lo = np.searchsorted(self.keys, safe * self.stride + lo_off, side="right")
        lo = np.where(known, lo, 0)
        hi = np.where(known, hi, 0)
        return lo, np.maximum(hi, lo)


def _get_index(log: EventLog, source: str, spatial: str, numeric: bool) -> _SourceIndex:
    cache = log._index.setdefault("feature_sources", {})
    key = (source, spatial, numeric)
    if key not in cache:
        cache[key] = _SourceIndex(log, source, spatial, numeric)
    return cache[key]


def _row_arrays(rows):
    ids = np.array([r.entity_id for r in rows], dtype=object)
    as_of = np.array([r.as_of for r in rows], dtype=np.int64)
    return ids, as_of


def aggregate_values(spec: AggregateSpec, log: EventLog, rows) -> np.ndarray:
    """Raw aggregate per row; NaN marks missing (count is never missing)."""
    ids, as_of = _row_arrays(rows)
    if len(ids) == 0:
        return np.empty(0)
    numeric = spec.quantity == "numeric_value"
    idx = _get_index(log, spec.source, spec.spatial_group, numeric)
    if spec.spatial_group == "zip_code":
        zips = log.entity_attribute("zip_code")
        groups = [zips.get(e) for e in ids]
    else:
        groups = ids
    lo, hi = idx.bounds(groups, as_of, WINDOWS[spec.window])
    n = (hi - lo).astype(float)
    if spec.function == "count":
        return n
    out = np.full(len(ids), np.nan)
    has = n > 0
    if spec.function == "days_since_last":
        out[has] = as_of[has] - idx.days[hi[has] - 1]
        return out
    if spec.function in ("mean", "stddev"):
        mean, std = _segment_moments(idx.values, lo, hi)
        out = mean if spec.function == "mean" else std
    elif spec.function == "min":
        out = _range_query(idx.min_table, lo, hi, np.minimum, np.nan)
    elif spec.function == "max":
        out = _range_query(idx.max_table, lo, hi, np.maximum, np.nan)
    return out


def compute_aggregate(spec: AggregateSpec, log: EventLog, point) -> float:
    """Single-row aggregate; ``nan`` means missing."""
    return float(aggregate_values(spec, log, [point])[0])


def _demographic_values(name: str, log: EventLog, rows) -> np.ndarray:
    ids, as_of = _row_arrays(rows)
    column = {"age_years": "birth_date", "days_since_diagnosis": "diagnosis_date"}[name]
    lookup = log.entity_attribute(column)
    ref = np.array([lookup.get(e, NO_DAY) for e in ids], dtype=np.int64)
    out = np.full(len(ids), np.nan)
    ok = ref != NO_DAY
    delta = (as_of[ok] - ref[ok]).astype(float)
    out[ok] = delta / 365.25 if name == "age_years" else delta
    return out


def _zip_attribute_values(attr: str, zip_attributes: pd.DataFrame | None, log: EventLog, rows):
    ids, _ = _row_arrays(rows)
    table = {} if zip_attributes is None else dict(zip(zip_attributes["zip_code"].astype(str), zip_attributes[attr]))
    zips = log.entity_attribute("zip_code")
    return np.array([float(table.get(zips.get(e), np.nan)) for e in ids], dtype=float)


# ------------------------------------------------------------------ encoding


@dataclass(frozen=True)
class EncoderState:
    specs: tuple
    categoricals: tuple
    numeric_columns: tuple  # every imputable numeric column, in output order
    imputation: MappingProxyType  # column -> constant
    vocabulary: MappingProxyType  # attribute -> tuple of categories
    zip_attribute_names: tuple
    fit_rows: frozenset  # (entity_id, as_of) keys of the training rows
    warnings: tuple = ()

    @property
    def columns(self) -> tuple:
        return _column_names(self)

    def to_dict(self) -> dict:
        return {
            "specs": [s.__dict__ for s in self.specs],
            "categoricals": list(self.categoricals),
            "numeric_columns": list(self.numeric_columns),
            "imputation": dict(self.imputation),
            "vocabulary": {k: list(v) for k, v in self.vocabulary.items()},
            "zip_attribute_names": list(self.zip_attribute_names),
            "fit_rows": sorted([e, int(d)] for e, d in self.fit_rows),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderState":
        return cls(
            specs=tuple(AggregateSpec(**s) for s in d["specs"]),
            categoricals=tuple(d["categoricals"]),
            numeric_columns=tuple(d["numeric_columns"]),
            imputation=MappingProxyType(dict(d["imputation"])),
            vocabulary=MappingProxyType({k: tuple(v) for k, v in d["vocabulary"].items()}),
            zip_attribute_names=tuple(d["zip_attribute_names"]),
            fit_rows=frozenset((e, int(a)) for e, a in d["fit_rows"]),
            warnings=tuple(d["warnings"]),
        )


def _numeric_sources(specs, zip_attribute_names):
    """(column name, imputable) for every numeric feature, in declaration order."""
    out = [(s.name, s.imputable) for s in specs]
    out += [(name, True) for name in DEMOGRAPHIC_NUMERIC]
    out += [(f"zip_{a}", True) for a in zip_attribute_names]
    return out


def _column_names(state: EncoderState) -> tuple:
    cols = []
    for name, imputable in _numeric_sources(state.specs, state.zip_attribute_names):
        cols.append(name)
        if imputable:
            cols.append(f"{name}_imputed")
    for attr in state.categoricals:
        cols += [f"{attr}_{c}" for c in state.vocabulary[attr]]
        cols.append(f"{attr}_missing")
    return tuple(sorted(cols))


def _raw_numeric(specs, zip_attribute_names, rows, log, zip_attributes) -> dict:
    raw = {}
    for spec in specs:
        raw[spec.name] = aggregate_values(spec, log, rows)
    for name in DEMOGRAPHIC_NUMERIC:
        raw[name] = _demographic_values(name, log, rows)
    for a in zip_attribute_names:
        raw[f"zip_{a}"] = _zip_attribute_values(a, zip_attributes, log, rows)
    return raw


def _check_rows(rows, log: EventLog) -> None:
    for r in rows:
        if not log.start <= r.as_of <= log.end:
            raise FeatureError(
                f"row {r.entity_id} as_of {day_str(r.as_of)} outside log range"
                f" [{day_str(log.start)}, {day_str(log.end)}]"
            )


def fit_encoders(specs, categoricals, train_rows, log: EventLog, zip_attributes=None) -> EncoderState:
    """Imputation constants (training means) and category vocabularies from training rows."""
    specs = tuple(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise FeatureError("duplicate aggregate specs")
    train_rows = list(train_rows)
    if not train_rows:
        raise FeatureError("fit_encoders needs at least one training row")
    _check_rows(train_rows, log)
    zip_names = ()
    if zip_attributes is not None:
        zip_names = tuple(sorted(c for c in zip_attributes.columns if c != "zip_code"))
    raw = _raw_numeric(specs, zip_names, train_rows, log, zip_attributes)
    imputation, warnings = {}, []
    numeric_columns = []
    for name, imputable in _numeric_sources(specs, zip_names):
        if not imputable:
            continue
        numeric_columns.append(name)
        vals = raw[name]
        ok = ~np.isnan(vals)
        if ok.any():
            imputation[name] = float(vals[ok].mean())
        else:
            imputation[name] = 0.0
            msg = f"degenerate column {name}: all values missing in training rows, imputing 0"
            warnings.append(msg)
            log_.warning(msg)
    vocabulary = {}
    ids, _ = _row_arrays(train_rows)
    for attr in categoricals:
        lookup = log.entity_attribute(attr)
        vocabulary[attr] = tuple(sorted({lookup.get(e) for e in ids} - {None}))
    return EncoderState(
        specs=specs,
        categoricals=tuple(categoricals),
        numeric_columns=tuple(numeric_columns),
        imputation=MappingProxyType(imputation),
        vocabulary=MappingProxyType(vocabulary),
        zip_attribute_names=zip_names,
        fit_rows=frozenset(r.key for r in train_rows),
        warnings=tuple(warnings),
    )


@dataclass(frozen=True)
class FeatureMatrix:
    rows: tuple
    columns: tuple
    values: np.ndarray
    imputed_columns: tuple
    imputed_flags: np.ndarray  # aligned with imputed_columns
    encoder_state: EncoderState
    role: str = "train"
    zip_attributes: object = None  # static zip-level table the matrix was joined with

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.columns))
        frame.insert(0, "as_of", [day_str(r.as_of) for r in self.rows])
        frame.insert(0, "entity_id", [r.entity_id for r in self.rows])
        return frame

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", "as_of", *self.columns])
            for r, vals in zip(self.rows, self.values):
                w.writerow([r.entity_id, day_str(r.as_of), *(repr(float(v)) for v in vals)])
        return path


def build_feature_matrix(specs, categoricals, rows, log: EventLog, encoder_state: EncoderState,
                         zip_attributes=None, role: str = "train") -> FeatureMatrix:
    rows = tuple(rows)
    _check_rows(rows, log)
    state = encoder_state
    if tuple(specs) != state.specs or tuple(categoricals) != state.categoricals:
        raise FeatureError("specs/categoricals differ from the fitted encoder state")
    raw = _raw_numeric(state.specs, state.zip_attribute_names, rows, log, zip_attributes)
    columns = state.columns
    col_index = {c: i for i, c in enumerate(columns)}
    values = np.zeros((len(rows), len(columns)))
    flags = np.zeros((len(rows), len(state.numeric_columns)), dtype=np.int8)
    for name, imputable in _numeric_sources(state.specs, state.zip_attribute_names):
        vals = raw[name]
        if imputable:
            missing = np.isnan(vals)
            vals = np.where(missing, state.imputation[name], vals)
            values[:, col_index[f"{name}_imputed"]] = missing
            flags[:, state.numeric_columns.index(name)] = missing
        values[:, col_index[name]] = vals
    ids, _ = _row_arrays(rows)
    for attr in state.categoricals:
        lookup = log.entity_attribute(attr)
        vocab = set(state.vocabulary[attr])
        cats = [lookup.get(e) for e in ids]
        for i, c in enumerate(cats):
            if c in vocab:
                values[i, col_index[f"{attr}_{c}"]] = 1.0
            else:
                values[i, col_index[f"{attr}_missing"]] = 1.0
    return FeatureMatrix(rows, columns, values, state.numeric_columns, flags, state, role, zip_attributes)


# --------------------------------------------------------------- default set


def default_feature_specs() -> list[AggregateSpec]:
    specs = []
    for w in WINDOWS:
        specs.append(AggregateSpec("hiv_visit", "count", "count", w))
    specs.append(AggregateSpec("hiv_visit", "count", "days_since_last", "all_history"))
    for w in ("183d", "365d", "all_history"):
        specs.append(AggregateSpec("other_visit", "count", "count", w))
    for src in ("viral_load_test", "cd4_test"):
        for w in ("365d", "all_history"):
            specs.append(AggregateSpec(src, "count", "count", w))
            for fn in ("mean", "min", "max", "stddev"):
                specs.append(AggregateSpec(src, "numeric_value", fn, w))
        specs.append(AggregateSpec(src, "count", "days_since_last", "all_history"))
    specs.append(AggregateSpec("diagnosis:substance_abuse", "count", "count", "all_history"))
    specs.append(AggregateSpec("diagnosis:psychiatric", "count", "count", "all_history"))
    specs.append(AggregateSpec("opportunistic_infection", "count", "count", "1095d"))
    specs.append(AggregateSpec("medication:ART", "count", "days_since_last", "all_history"))
    specs.append(AggregateSpec("hiv_visit", "count", "count", "365d", "zip_code"))
    specs.append(AggregateSpec("viral_load_test", "numeric_value", "mean", "365d", "zip_code"))
    return specs


DEFAULT_CATEGORICALS = ("gender", "race", "transmission_category")
