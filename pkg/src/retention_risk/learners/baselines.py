"""Non-learned comparison scores: expert rules, the prior, and viral-load ranking."""
from __future__ import annotations

import operator
from dataclasses import dataclass

import numpy as np

from ..events import NO_DAY, EventLog

SUPPRESSION_THRESHOLD = 200.0  # copies/ml


class RuleError(ValueError):
    pass


def _latest_before(ids_sorted, days_sorted, values, entity_ids, as_of):
    """Index of each row's latest event at or before as_of, -1 if none.

    Events are sorted by (entity_id, day), so a single searchsorted on the
    combined key finds the last qualifying event.
    """
    out = np.full(len(entity_ids), -1, dtype=np.int64)
    if len(ids_sorted) == 0:
        return out
    lo = np.searchsorted(ids_sorted, entity_ids, side="left")
    hi = np.searchsorted(ids_sorted, entity_ids, side="right")
    for i in range(len(entity_ids)):
        if hi[i] > lo[i]:
            j = lo[i] + np.searchsorted(days_sorted[lo[i]:hi[i]], as_of[i], side="right") - 1
            if j >= lo[i]:
                out[i] = j
    return out


def _first_on_or_before(ids_sorted, days_sorted, entity_ids, as_of):
    out = np.full(len(entity_ids), NO_DAY, dtype=np.int64)
    if len(ids_sorted) == 0:
        return out
    lo = np.searchsorted(ids_sorted, entity_ids, side="left")
    hi = np.searchsorted(ids_sorted, entity_ids, side="right")
    for i in range(len(entity_ids)):
        if hi[i] > lo[i] and days_sorted[lo[i]] <= as_of[i]:
            out[i] = days_sorted[lo[i]]
    return out


def _event_table(log: EventLog, event_type: str, category: str | None = None):
    ids, days, values, cats = log.event_arrays(event_type)
    if category is not None:
        keep = np.array([c == category for c in cats], dtype=bool)
        ids, days, values = ids[keep], days[keep], values[keep]
    return np.asarray(ids, dtype=str), np.asarray(days), np.asarray(values, dtype=float)


def latest_viral_load(log: EventLog, rows) -> np.ndarray:
    """Most recent viral load at or before each row's as-of date; NaN if never tested."""
    ids, days, values = _event_table(log, "viral_load_test")
    eids = np.array([r.entity_id for r in rows], dtype=str)
    as_of = np.array([r.as_of for r in rows], dtype=np.int64)
    idx = _latest_before(ids, days, values, eids, as_of)
    out = np.full(len(rows), np.nan)
    out[idx >= 0] = values[idx[idx >= 0]]
    return out


def raw_attributes(log: EventLog, rows) -> dict[str, np.ndarray]:
    """Point-in-time attributes the expert rules can reference.

    Missing values are NaN, and a comparison against NaN never fires.
    """
    rows = list(rows)
    eids = np.array([r.entity_id for r in rows], dtype=str)
    as_of = np.array([r.as_of for r in rows], dtype=np.int64)

    birth = log.entity_attribute("birth_date")
    b = np.array([birth.get(e, NO_DAY) for e in eids], dtype=np.int64)
    age = np.where(b == NO_DAY, np.nan, (as_of - b) / 365.25)

    ids, days, _ = _event_table(log, "medication", "ART")
    first_art = _first_on_or_before(ids, days, eids, as_of)
    years_on_art = np.where(first_art == NO_DAY, np.nan, (as_of - first_art) / 365.25)

    ids, days, _ = _event_table(log, "diagnosis", "substance_abuse")
    first_sa = _first_on_or_before(ids, days, eids, as_of)
    substance = (first_sa != NO_DAY).astype(float)

    return {
        "age_years": age,
        "years_on_art": years_on_art,
        "substance_abuse_dx": substance,
        "latest_viral_load": latest_viral_load(log, rows),
    }


RULE_ATTRIBUTES = ("age_years", "years_on_art", "substance_abuse_dx", "latest_viral_load")
_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge, "==": operator.eq}


@dataclass(frozen=True)
class Rule:
    attribute: str
    op: str
    threshold: float
    weight: float = 1.0

    def __post_init__(self):
        if self.attribute not in RULE_ATTRIBUTES:
            raise RuleError(f"rule references unknown attribute {self.attribute!r}; known: {RULE_ATTRIBUTES}")
        if self.op not in _OPS:
            raise RuleError(f"unknown rule operator {self.op!r}")

    def fires(self, values: np.ndarray) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return _OPS[self.op](values, self.threshold) & ~np.isnan(values)

    def describe(self) -> str:
        return f"{self.attribute} {self.op} {self.threshold:g}"


# Documented defaults; the variables come from the published expert model,
# the thresholds are ours.
DEFAULT_RULES = (
    Rule("age_years", "<", 30.0),
    Rule("years_on_art", "<", 1.0),
    Rule("substance_abuse_dx", ">=", 1.0),
    Rule("latest_viral_load", ">=", SUPPRESSION_THRESHOLD),
)


def load_rules(table) -> tuple[Rule, ...]:
    """Rules from config records ``{attribute, op, threshold, weight}``; None means defaults."""
    if table is None:
        return DEFAULT_RULES
    rules = []
    for i, rec in enumerate(table):
        if isinstance(rec, Rule):
            rules.append(rec)
            continue
        try:
            rules.append(Rule(rec["attribute"], rec["op"], float(rec["threshold"]), float(rec.get("weight", 1.0))))
        except KeyError as exc:
            raise RuleError(f"rule {i} is missing field {exc.args[0]!r}") from None
    return tuple(rules)


def expert_rules_score(attributes: dict, rules, n: int | None = None) -> np.ndarray:
    rules = load_rules(rules)
    if n is None:
        n = len(next(iter(attributes.values()))) if attributes else 0
    score = np.zeros(n)
    for rule in rules:
        score += rule.weight * rule.fires(np.asarray(attributes[rule.attribute], dtype=float))
    return score


def prior_baseline_score(n_rows: int, prevalence: float = 1.0) -> np.ndarray:
    """Everyone gets the same score; top-k falls back to the global tie-break."""
    return np.full(n_rows, float(prevalence))


def viral_load_ranking_score(log: EventLog, rows) -> np.ndarray:
    """Latest viral load; never-tested rows rank above every observed value."""
    vl = latest_viral_load(log, rows)
    observed = vl[~np.isnan(vl)]
    top = float(observed.max()) + 1.0 if len(observed) else 1.0
    return np.where(np.isnan(vl), top, vl)
