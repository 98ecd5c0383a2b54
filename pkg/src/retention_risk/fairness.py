"""False omission rate audits and joint performance + fairness selection.

Undefined quantities are ``None`` in memory and ``undefined`` in CSV files.
A FOR ratio whose reference group has FOR 0 while the audited group does
not is undefined as a number but is an extreme disparity; such ratios carry
``extreme=True`` and always count as out of band.
"""
from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import EvaluationError, SelectionRule, rank_models, selection_window

PARITY_BAND = (0.9, 1.1)
MIN_GROUP_SIZE = 25
MISSING_GROUP = "missing"


def false_omission_rate(flagged, labels, group_mask=None) -> float | None:
    """Positives among the group's unflagged rows; None when every row is flagged."""
    flagged = np.asarray(flagged, dtype=bool)
    labels = np.asarray(labels)
    keep = ~flagged if group_mask is None else (~flagged & np.asarray(group_mask, dtype=bool))
    n = int(keep.sum())
    if n == 0:
        return None
    return int(labels[keep].sum()) / n


def for_ratio(for_group: float | None, for_reference: float | None) -> float | None:
    if for_group is None or for_reference is None:
        return None
    if for_reference == 0:
        return 1.0 if for_group == 0 else None
    return for_group / for_reference


def in_band(ratio: float | None, band=PARITY_BAND) -> bool:
    return ratio is not None and band[0] <= ratio <= band[1]


@dataclass(frozen=True)
class GroupAudit:
    attribute: str
    group: str
    reference: str
    n: int
    n_flagged: int
    fn: int
    tn: int
    false_omission: float | None
    ratio: float | None
    extreme: bool
    in_band: bool


@dataclass(frozen=True)
class AuditReport:
    model_group: str
    split_id: int
    groups: tuple
    parity_band: tuple = PARITY_BAND
    notices: tuple = field(default=())

    def get(self, attribute: str, group: str) -> GroupAudit | None:
        for g in self.groups:
            if g.attribute == attribute and g.group == group:
                return g
        return None

    def to_dict(self) -> dict:
        return {"model_group": self.model_group, "split_id": self.split_id, "parity_band": list(self.parity_band),
                "notices": list(self.notices), "groups": [vars(g).copy() for g in self.groups]}

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        return cls(d["model_group"], int(d["split_id"]), tuple(GroupAudit(**g) for g in d["groups"]),
                   tuple(d["parity_band"]), tuple(d["notices"]))

    def rows(self):
        for g in self.groups:
            yield [self.model_group, self.split_id, g.attribute, g.group, g.n, g.fn, g.tn,
                   _num(g.false_omission), _num(g.ratio), str(g.in_band).lower()]


AUDIT_COLUMNS = ("model_group", "split_id", "attribute", "group", "n", "fn", "tn", "for", "ratio", "in_band")


def _num(v) -> str:
    return "undefined" if v is None else repr(float(v))


def _group_labels(values) -> np.ndarray:
    return np.array([MISSING_GROUP if v is None or (isinstance(v, float) and math.isnan(v)) else str(v)
                     for v in values], dtype=object)


def audit_model(model_group: str, split_id: int, flagged, labels, attributes: dict, references=None,
                band=PARITY_BAND, min_group_size: int = MIN_GROUP_SIZE) -> AuditReport:
    """FOR per group and its ratio to the reference group, for every attribute.

    ``attributes`` maps attribute name to per-row values (None = missing,
    which is audited as its own group). ``references`` maps attribute name
    to the reference group; the default is the largest group.
    """
    flagged = np.asarray(flagged, dtype=bool)
    labels = np.asarray(labels).astype(np.int64)
    references = references or {}
    out, notices = [], []
    for attr in sorted(attributes):
        groups = _group_labels(attributes[attr])
        if len(groups) != len(labels):
            raise ValueError(f"attribute {attr!r} has {len(groups)} values for {len(labels)} rows")
        counts = Counter(groups.tolist())
        n_missing = counts.get(MISSING_GROUP, 0)
        if len(groups) and n_missing > 0.5 * len(groups):
            notices.append(f"{attr}: attribute missing for {n_missing} of {len(groups)} rows")
        ref = references.get(attr)
        if ref is None:
            ref = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0] if counts else None
        ref = str(ref) if ref is not None else None
        if ref is not None and counts.get(ref, 0) < min_group_size:
            notices.append(f"{attr}: reference group {ref!r} has {counts.get(ref, 0)} rows"
                           f" (< {min_group_size}); ratios undefined")
        ref_mask = groups == ref
        ref_for = false_omission_rate(flagged, labels, ref_mask) if counts.get(ref, 0) >= min_group_size else None
        for g in sorted(counts):
            n = counts[g]
            if n < min_group_size:
                notices.append(f"{attr}={g}: excluded, {n} rows < min_group_size {min_group_size}")
                continue
            mask = groups == g
            unflagged = mask & ~flagged
            fn = int(labels[unflagged].sum())
            tn = int(unflagged.sum()) - fn
            f = false_omission_rate(flagged, labels, mask)
            ratio = for_ratio(f, ref_for)
            extreme = ratio is None and f is not None and ref_for == 0
            out.append(GroupAudit(attr, g, ref, n, int((mask & flagged).sum()), fn, tn, f, ratio, extreme,
                                  in_band(ratio, band)))
    return AuditReport(model_group, int(split_id), tuple(out), tuple(band), tuple(notices))


def write_audits(reports, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_COLUMNS)
        for rep in sorted(reports, key=lambda r: (r.split_id, r.model_group)):
            w.writerows(rep.rows())
    return path


# -------------------------------------------------------------- joint select


@dataclass(frozen=True)
class JointStanding:
    model_group: str
    points: int
    mean_precision: float
    mean_ratios: dict  # (attribute, group) -> mean ratio over the window (inf = extreme)
    in_band: bool


@dataclass(frozen=True)
class JointSelection:
    selected: str
    ranking: tuple
    branch: str  # "in_band" or "fallback_all_out_of_band"
    rationale: str
    warning: str | None = None


def mean_ratios(reports, window, focus=None) -> dict:
    """Per model group: mean FOR ratio over the window for each audited (attribute, group).

    Extreme ratios count as +inf. Undefined ratios that are not extreme
    (every row flagged, or too few rows) are skipped.
    """
    acc = defaultdict(lambda: defaultdict(list))
    window = set(window)
    for rep in reports:
        if rep.split_id not in window:
            continue
        for g in rep.groups:
            if g.group == g.reference:
                continue
            if focus is not None and (g.attribute, g.group) not in focus:
                continue
            if g.extreme:
                acc[rep.model_group][(g.attribute, g.group)].append(math.inf)
            elif g.ratio is not None:
                acc[rep.model_group][(g.attribute, g.group)].append(g.ratio)
    return {m: {k: float(np.mean(v)) for k, v in sorted(d.items())} for m, d in acc.items()}


def joint_select(records, reports, rule: SelectionRule, band=PARITY_BAND, focus=None,
                 min_points: int = 0) -> JointSelection:
    """In-band models (every mean FOR ratio inside the band) ranked by the
    stability rule, ahead of out-of-band ones. If nothing is in band, all
    models are ranked by performance and the pick carries a disparity warning.

    Points are always counted against every evaluated group. With
    ``min_points`` > 0 only groups that were within the regret band at least
    that often take part in the fairness partition; the rest follow by
    performance. This keeps a weak model that lands in band by chance from
    beating strong ones. The stability winner always takes part.
    """
    records = list(records)
    reports = list(reports)
    if not records or not reports:
        raise EvaluationError("joint_select needs evaluation records and audit reports")
    focus = None if focus is None else {tuple(f) for f in focus}
    groups = sorted({r.model_group for r in records})
    audited = {r.model_group for r in reports}
    missing = [g for g in groups if g not in audited]
    if missing:
        raise EvaluationError(f"no audit reports for model groups {missing}")
    window = selection_window(records, rule)
    ratios = mean_ratios(reports, window, focus)
    overall = rank_models(records, rule)

    def ok(group):
        vals = ratios.get(group, {})
        return all(band[0] <= v <= band[1] for v in vals.values())

    contenders = [s.model_group for s in overall if s.points >= min_points or s is overall[0]]
    rest = [s.model_group for s in overall if s.model_group not in contenders]
    inside = [g for g in contenders if ok(g)]
    outside = [g for g in contenders if not ok(g)]

    def standings(subset):
        if not subset:
            return []
        return [JointStanding(s.model_group, s.points, s.mean_precision, ratios.get(s.model_group, {}),
                              s.model_group in inside)
                for s in rank_models(records, rule, groups=subset)]

    scope = f"{len(contenders)} candidate" if rest else f"{len(groups)}"
    if inside:
        ranking = standings(inside) + standings(outside) + standings(rest)
        top = ranking[0]
        rationale = (f"{len(inside)} of {scope} model groups have every mean FOR ratio inside"
                     f" [{band[0]:g}, {band[1]:g}] over splits {list(window)}; selected {top.model_group}"
                     f" ({top.points} in-band periods, mean precision@{rule.k_pct:g}% {top.mean_precision:.4f})")
        return JointSelection(top.model_group, tuple(ranking), "in_band", rationale)
    ranking = standings(contenders) + standings(rest)
    top = ranking[0]
    worst = {k: v for k, v in top.mean_ratios.items() if not band[0] <= v <= band[1]}
    shown = ", ".join(f"{a}={g}: {v:.3f}" for (a, g), v in worst.items())
    warning = f"no model group is inside the parity band; selected model has out-of-band FOR ratios ({shown})"
    rationale = (f"none of {scope} model groups is in band over splits {list(window)}; fell back to best"
                 f" performer {top.model_group} (mean precision@{rule.k_pct:g}% {top.mean_precision:.4f})")
    return JointSelection(top.model_group, tuple(ranking), "fallback_all_out_of_band", rationale, warning)
