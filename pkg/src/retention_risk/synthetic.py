"""Synthetic cohort generator with a planted, recoverable drop-out signal.

Each entity carries a latent adherence score. Adherence sets the visit cadence
(and, through it, lab frequency and viral suppression). After every HIV visit
the entity drops out of care with a fixed per-entity probability

    p = multiplier * sigmoid(intercept + sum_j weight_j * signal_j)

where the signals are drawn from ``SIGNALS``. A drop-out is a lapse longer than
any regular inter-visit gap, optionally permanent. Regular gaps never exceed
``MAX_REGULAR_GAP`` days, so with all weights at zero the outcome carries no
information about the observable history.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .events import ENTITY_COLUMNS, EVENT_COLUMNS, NO_DAY, EventLog, to_day

SIGNALS = ("low_adherence", "unsuppressed", "substance_abuse", "young_age")
DEFAULT_SIGNAL = (
    ("low_adherence", 1.2),
    ("unsuppressed", 0.9),
    ("substance_abuse", 0.7),
    ("young_age", 0.5),
)

GENDERS = (("male", 0.62), ("female", 0.33), ("transgender", 0.05))
RACES = (("Black", 0.45), ("White", 0.35), ("Hispanic", 0.14), ("Asian", 0.03), ("Other", 0.03))
TRANSMISSION = (("MSM", 0.5), ("heterosexual", 0.3), ("IDU", 0.12), ("perinatal", 0.03), ("other", 0.05))
N_ZIPS = 24
MISSING_RATE = 0.03

MIN_REGULAR_GAP = 21
MAX_REGULAR_GAP = 150
MIN_LAPSE = 200
PERMANENT_DROPOUT = 0.3


@dataclass(frozen=True)
class SyntheticConfig:
    n_entities: int
    date_range: tuple
    seed: int = 0
    dropout_signal: tuple = DEFAULT_SIGNAL
    group_bias: tuple | None = None  # (attribute, group, multiplier)
    dropout_intercept: float = -3.0

    def __post_init__(self):
        if self.n_entities < 1:
            raise ValueError("n_entities must be >= 1")
        start, end = (to_day(d) for d in self.date_range)
        if end <= start:
            raise ValueError(f"empty date_range {self.date_range}")
        for name, weight in self.dropout_signal:
            if name not in SIGNALS:
                raise ValueError(f"unknown dropout signal {name!r}; choose from {SIGNALS}")
            if not math.isfinite(weight):
                raise ValueError(f"non-finite weight for signal {name!r}: {weight}")
        if not math.isfinite(self.dropout_intercept):
            raise ValueError("non-finite dropout_intercept")
        if self.group_bias is not None:
            attribute, _, multiplier = self.group_bias
            if attribute not in ("gender", "race", "transmission_category"):
                raise ValueError(f"group_bias attribute must be demographic, got {attribute!r}")
            if not (math.isfinite(multiplier) and multiplier > 0):
                raise ValueError(f"group_bias multiplier must be positive and finite: {multiplier}")


@dataclass
class GroundTruth:
    """Latent per-entity parameters, plus drop-out bookkeeping for tests."""

    entities: pd.DataFrame  # entity_id, latent_adherence, planted_dropout_prob, signals..., n_visits, n_dropouts
    zip_attributes: pd.DataFrame = field(default_factory=pd.DataFrame)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["entity_id", "latent_adherence", "planted_dropout_prob"])
            for rec in self.entities.itertuples(index=False):
                w.writerow([rec.entity_id, repr(float(rec.latent_adherence)), repr(float(rec.planted_dropout_prob))])
        return path

    def write_zip_attributes(self, path) -> Path:
        path = Path(path)
        self.zip_attributes.to_csv(path, index=False, lineterminator="\n")
        return path


def _choice(rng, table, size):
    labels = [t[0] for t in table]
    probs = np.array([t[1] for t in table])
    return np.array(labels, dtype=object)[rng.choice(len(labels), size=size, p=probs / probs.sum())]


def _with_missing(rng, values):
    values = values.copy()
    values[rng.random(len(values)) < MISSING_RATE] = None
    return values


def generate_synthetic_cohort(config: SyntheticConfig) -> tuple[EventLog, GroundTruth]:
    rng = np.random.default_rng(config.seed)
    n = config.n_entities
    start, end = (to_day(d) for d in config.date_range)
    span = end - start

    ids = np.array([f"P{i:06d}" for i in range(n)], dtype=object)
    gender = _with_missing(rng, _choice(rng, GENDERS, n))
    race = _with_missing(rng, _choice(rng, RACES, n))
    transmission = _with_missing(rng, _choice(rng, TRANSMISSION, n))
    zips = np.array([f"606{z:02d}" for z in range(N_ZIPS)], dtype=object)
    zip_code = _with_missing(rng, zips[rng.integers(0, N_ZIPS, n)])

    early = rng.random(n) < 0.5
    late_span = max(span - 365, 1)
    entry = np.where(early, start + rng.integers(0, min(120, span), n), start + rng.integers(0, late_span, n))
    age_at_entry = rng.uniform(18, 70, n)
    birth = entry - np.round(age_at_entry * 365.25).astype(np.int64)
    birth[rng.random(n) < MISSING_RATE] = NO_DAY
    diagnosis = entry - rng.integers(0, 3650, n)
    diagnosis[rng.random(n) < 0.05] = NO_DAY

    adherence = rng.standard_normal(n)
    unsuppressed = (rng.random(n) < 1.0 / (1.0 + np.exp(1.0 + 1.2 * adherence))).astype(float)
    substance = (rng.random(n) < 0.2).astype(float)
    young = (40.0 - age_at_entry) / 12.0

    signals = {
        "low_adherence": -adherence,
        "unsuppressed": unsuppressed,
        "substance_abuse": substance,
        "young_age": young,
    }
    logit = np.full(n, config.dropout_intercept)
    for name, weight in config.dropout_signal:
        logit = logit + weight * signals[name]
    prob = 1.0 / (1.0 + np.exp(-logit))
    if config.group_bias is not None:
        attribute, group, multiplier = config.group_bias
        column = {"gender": gender, "race": race, "transmission_category": transmission}[attribute]
        prob = np.where(column == group, prob * multiplier, prob)
    prob = np.minimum(prob, 0.95)

    mean_gap = 60.0 + 25.0 * np.clip(-adherence, -1.5, 2.0)

    rows: list[tuple] = []
    n_visits = np.zeros(n, dtype=np.int64)
    n_dropouts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        eid = ids[i]
        if substance[i]:
            rows.append((eid, "diagnosis", int(entry[i]), math.nan, "substance_abuse"))
        if rng.random() < 0.15:
            rows.append((eid, "diagnosis", int(entry[i]) + int(rng.integers(0, 400)), math.nan, "psychiatric"))
        art_start = int(entry[i]) - int(rng.integers(0, 1500)) if rng.random() < 0.6 else int(entry[i])
        rows.append((eid, "medication", max(art_start, start), math.nan, "ART"))
        t = int(entry[i])
        while t <= end:
            rows.append((eid, "hiv_visit", t, math.nan, None))
            n_visits[i] += 1
            if rng.random() < 0.5:
                if unsuppressed[i]:
                    vl = float(np.round(10 ** rng.normal(4.3, 0.6)))
                else:
                    vl = float(np.round(10 ** rng.uniform(1.3, 2.2)))
                rows.append((eid, "viral_load_test", t, vl, None))
            if rng.random() < 0.35:
                cd4 = float(max(0.0, np.round(rng.normal(620.0 - 260.0 * unsuppressed[i], 150.0))))
                rows.append((eid, "cd4_test", t, cd4, None))
            if rng.random() < 0.25:
                other = t + int(rng.integers(1, 40))
                if other <= end:
                    rows.append((eid, "other_visit", other, math.nan, None))
            if unsuppressed[i] and rng.random() < 0.03:
                rows.append((eid, "opportunistic_infection", t, math.nan, "pneumonia"))
            if rng.random() < prob[i]:
                n_dropouts[i] += 1
                if rng.random() < PERMANENT_DROPOUT:
                    break
                gap = MIN_LAPSE + int(rng.exponential(250.0))
            else:
                gap = int(np.clip(np.round(mean_gap[i] * rng.lognormal(0.0, 0.2)), MIN_REGULAR_GAP, MAX_REGULAR_GAP))
            t += gap

    entities = pd.DataFrame(
        {
            "entity_id": ids,
            "birth_date": birth.astype(np.int64),
            "gender": gender,
            "race": race,
            "zip_code": zip_code,
            "transmission_category": transmission,
            "diagnosis_date": diagnosis.astype(np.int64),
        },
        columns=list(ENTITY_COLUMNS),
    )
    events = pd.DataFrame(rows, columns=list(EVENT_COLUMNS))
    events = events[(events["event_date"] >= start) & (events["event_date"] <= end)]
    log = EventLog.build(entities, events, (start, end))

    truth = pd.DataFrame(
        {
            "entity_id": ids,
            "latent_adherence": adherence,
            "planted_dropout_prob": prob,
            **{f"signal_{k}": v for k, v in signals.items()},
            "n_visits": n_visits,
            "n_dropouts": n_dropouts,
        }
    )
    zip_attrs = pd.DataFrame(
        {
            "zip_code": zips,
            "snap_fraction": np.round(rng.uniform(0.05, 0.45, N_ZIPS), 4),
            "median_commute_min": np.round(rng.uniform(20, 60, N_ZIPS), 1),
        }
    )
    return log, GroundTruth(truth, zip_attrs)
