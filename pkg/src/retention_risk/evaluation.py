"""Resource-constrained ranking metrics and stability-based model selection."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


class EvaluationError(ValueError):
    pass


def n_flagged_for(k_pct, n: int) -> int:
    """ceil(k_pct / 100 * n), computed exactly so 10% of 100 is 10, not 11."""
    if not (0 < float(k_pct) <= 100):
        raise EvaluationError(f"k_pct must be in (0, 100], got {k_pct}")
    return math.ceil(Fraction(str(k_pct)) * n / 100)


def rank_order(scores, keys=None) -> np.ndarray:
    """Row indices by descending score; ties by ascending (entity_id, as_of).

    Without keys, ties fall back to row position.
    """
    scores = np.asarray(scores, dtype=float)
    if np.isnan(scores).any():
        raise EvaluationError("scores contain NaN")
    if keys is None:
        return np.lexsort((np.arange(len(scores)), -scores))
    keys = list(keys)
    if len(keys) != len(scores):
        raise EvaluationError(f"{len(scores)} scores but {len(keys)} row keys")
    ids = np.array([str(k[0]) for k in keys]) if keys else np.empty(0, dtype=str)
    days = np.array([k[1] for k in keys], dtype=np.int64)
    return np.lexsort((days, ids, -scores))


def _check(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise EvaluationError(f"{len(scores)} scores but {len(labels)} labels")
    if len(scores) == 0:
        raise EvaluationError("no rows to evaluate")
    return scores, labels.astype(np.int64)


def flagged_mask(scores, k_pct, keys=None) -> np.ndarray:
    n = len(scores)
    mask = np.zeros(n, dtype=bool)
    mask[rank_order(scores, keys)[: n_flagged_for(k_pct, n)]] = True
    return mask


def precision_at_pct(scores, labels, k_pct, keys=None) -> tuple[float, int, int]:
    """(precision, n_flagged, n_true) for the top ceil(k% * n) rows."""
    scores, labels = _check(scores, labels)
    k = n_flagged_for(k_pct, len(scores))
    top = rank_order(scores, keys)[:k]
    n_true = int(labels[top].sum())
    return n_true / k, k, n_true


def recall_at_pct(scores, labels, k_pct, keys=None) -> float:
    """Share of all positives found in the top k%; 1.0 when there are none."""
    scores, labels = _check(scores, labels)
    total = int(labels.sum())
    if total == 0:
        return 1.0
    _, _, n_true = precision_at_pct(scores, labels, k_pct, keys)
    return n_true / total


def pr_policy_curve(scores, labels, k_grid, keys=None) -> list[tuple[float, float, float]]:
    """(k, precision, recall) for each k in the grid: the resource planning menu."""
    scores, labels = _check(scores, labels)
    order = rank_order(scores, keys)
    hits = np.concatenate([[0], np.cumsum(labels[order])])
    total = int(labels.sum())
    out = []
    for k in k_grid:
        m = n_flagged_for(k, len(scores))
        tp = int(hits[m])
        out.append((float(k), tp / m, tp / total if total else 1.0))
    return out


@dataclass(frozen=True)
class EvaluationRecord:
    model_group: str
    split_id: int
    precision_at: dict
    recall_at: dict
    n_flagged: dict
    n_true_in_flagged: dict
    prevalence: float

    def rows(self):
        for k in sorted(self.precision_at):
            yield [self.model_group, self.split_id, _fmt(k), repr(float(self.precision_at[k])),
                   repr(float(self.recall_at[k])), self.n_flagged[k], self.n_true_in_flagged[k],
                   repr(float(self.prevalence))]


def _fmt(k) -> str:
    return f"{float(k):g}"


EVALUATION_COLUMNS = ("model_group", "split_id", "k_pct", "precision", "recall", "n_flagged", "n_true", "prevalence")


def evaluate_scores(model_group: str, split_id: int, scores, labels, k_grid, keys=None) -> EvaluationRecord:
    scores, labels = _check(scores, labels)
    precision, recall, flagged, true = {}, {}, {}, {}
    total = int(labels.sum())
    for k in k_grid:
        p, m, t = precision_at_pct(scores, labels, k, keys)
        precision[float(k)] = p
        recall[float(k)] = t / total if total else 1.0
        flagged[float(k)] = m
        true[float(k)] = t
    return EvaluationRecord(model_group, int(split_id), precision, recall, flagged, true, float(labels.mean()))


def evaluate_split(model, X_test, y_test, rule: "SelectionRule", log=None, k_grid=None) -> EvaluationRecord:
    """Score the test matrix and record precision/recall at the rule's k (plus any extra ks)."""
    if tuple(r.key for r in X_test.rows) != tuple(r.key for r in y_test.rows):
        raise EvaluationError("test feature rows and label rows are not aligned")
    scores = model.score(X_test, log)
    ks = sorted({float(rule.k_pct), *(float(k) for k in (k_grid or ()))})
    split = getattr(model, "train_split_id", 0)
    return evaluate_scores(model.model_group, split, scores, y_test.labels, ks, [r.key for r in X_test.rows])


def write_evaluations(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVALUATION_COLUMNS)
        for rec in sorted(records, key=lambda r: (r.split_id, r.model_group)):
            w.writerows(rec.rows())
    return path


def read_evaluations(path) -> list[EvaluationRecord]:
    grouped = defaultdict(lambda: ({}, {}, {}, {}, [0.0]))
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["model_group"], int(row["split_id"]))
            p, r, f, t, prev = grouped[key]
            k = float(row["k_pct"])
            p[k] = float(row["precision"])
            r[k] = float(row["recall"])
            f[k] = int(row["n_flagged"])
            t[k] = int(row["n_true"])
            prev[0] = float(row["prevalence"])
    return [EvaluationRecord(g, s, p, r, f, t, prev[0]) for (g, s), (p, r, f, t, prev) in grouped.items()]


# ------------------------------------------------------------------ selection


@dataclass(frozen=True)
class SelectionRule:
    k_pct: float = 10.0
    regret_band: float = 0.05
    last_n_periods: int = 5

    def __post_init__(self):
        if not (0 < self.k_pct <= 100):
            raise EvaluationError(f"k_pct must be in (0, 100], got {self.k_pct}")
        if self.regret_band < 0:
            raise EvaluationError("regret_band must be >= 0")
        if self.last_n_periods < 1:
            raise EvaluationError("last_n_periods must be >= 1")


@dataclass(frozen=True)
class GroupStanding:
    model_group: str
    points: int
    mean_precision: float
    window: tuple  # split ids


# absorbs float error in e.g. 0.7 - 0.05 so a precision of exactly 0.65 is in band
_EPS = 1e-12


def precision_table(records, k_pct) -> dict:
    k = float(k_pct)
    table = {}
    for rec in records:
        if k not in rec.precision_at:
            raise EvaluationError(f"{rec.model_group} split {rec.split_id} has no precision at k={_fmt(k)}%")
        table[(rec.model_group, rec.split_id)] = rec.precision_at[k]
    return table


def selection_window(records, rule: SelectionRule) -> tuple:
    """The last ``last_n_periods`` split ids that have evaluations, in calendar order."""
    split_ids = sorted({r.split_id for r in records})
    return tuple(split_ids[-rule.last_n_periods:])


def rank_models(records, rule: SelectionRule, groups=None) -> list[GroupStanding]:
    """Standings by in-band points, then mean precision, then group id.

    ``groups`` restricts which groups are ranked; the per-split best is still
    taken over every evaluated group.
    """
    records = list(records)
    if not records:
        raise EvaluationError("no evaluation records")
    table = precision_table(records, rule.k_pct)
    all_groups = sorted({g for g, _ in table})
    window = selection_window(records, rule)
    missing = [(g, s) for g in all_groups for s in window if (g, s) not in table]
    if missing:
        listed = ", ".join(f"({g}, split {s})" for g, s in missing[:10])
        more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
        raise EvaluationError(f"missing evaluations for {listed}{more}")
    points = dict.fromkeys(all_groups, 0)
    for s in window:
        best = max(table[(g, s)] for g in all_groups)
        for g in all_groups:
            if table[(g, s)] >= best - rule.regret_band - _EPS:
                points[g] += 1
    chosen = all_groups if groups is None else sorted(set(groups))
    standings = [
        GroupStanding(g, points[g], float(np.mean([table[(g, s)] for s in window])), window) for g in chosen
    ]
    standings.sort(key=lambda st: (-st.points, -st.mean_precision, st.model_group))
    return standings


def select_model(records, rule: SelectionRule) -> str:
    return rank_models(records, rule)[0].model_group
