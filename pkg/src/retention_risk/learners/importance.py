"""Model-level feature importances and per-row contributing features."""
from __future__ import annotations

import logging

import numpy as np

from . import baselines, trees

log = logging.getLogger(__name__)


def feature_importances(model) -> list[tuple[str, float]]:
    """(feature, weight) pairs, largest first; ties in name order.

    Trees use total impurity decrease (weights sum to 1). Logistic regression
    uses |coefficient| on the standardised scale. Baselines have none.
    """
    fam = model.family
    st = model.fitted_state
    names = model.feature_names
    if fam in ("decision_tree", "random_forest", "gradient_boosted_trees"):
        weights = trees.impurity_importances(st["trees"], len(names), average=fam == "random_forest")
        pairs = [(names[i], float(weights[i])) for i in range(len(names))]
    elif fam == "logistic_regression":
        coef = np.asarray(st["params"][1:]) * np.asarray(st["train_std"]) / np.asarray(st["scale"])
        pairs = [(names[c], float(abs(w))) for c, w in zip(st["columns"], coef)]
    else:
        log.info("no feature importances for %s", fam)
        return []
    return sorted(pairs, key=lambda kv: (-kv[1], kv[0]))


def row_contributions(model, X) -> tuple[tuple, np.ndarray]:
    """(names, n x m matrix) of per-row additive contributions to the score.

    Tree families use path attribution (log-odds scale for boosting), logistic
    regression uses coefficient times standardised value, expert rules use
    the weight of each fired rule. This is a heuristic explanation.
    """
    fam = model.family
    st = model.fitted_state
    if fam in ("decision_tree", "random_forest", "gradient_boosted_trees"):
        model.check_columns(X.columns)
        out = np.zeros((len(X), len(model.feature_names)))
        fitted = st["trees"]
        if fam == "gradient_boosted_trees":
            for t in fitted:
                t.add_contributions(X.values, out, st["learning_rate"])
        else:
            for t in fitted:
                t.add_contributions(X.values, out, 1.0 / len(fitted))
        return model.feature_names, out
    if fam == "logistic_regression":
        model.check_columns(X.columns)
        cols = st["columns"]
        z = (X.values[:, cols] - st["mean"]) / st["scale"]
        return tuple(model.feature_names[c] for c in cols), z * st["params"][1:]
    return (), np.zeros((len(X), 0))


def expert_contributions(model, X, event_log) -> tuple[tuple, np.ndarray]:
    attrs = baselines.raw_attributes(event_log, X.rows)
    rules = model.fitted_state["rules"]
    out = np.zeros((len(X), len(rules)))
    for j, rule in enumerate(rules):
        out[:, j] = rule.weight * rule.fires(np.asarray(attrs[rule.attribute], dtype=float))
    return tuple(r.describe() for r in rules), out


def top_contributions(model, X, k: int = 3, event_log=None) -> list[list[tuple[str, float]]]:
    """The k largest positive contributors per row (fewer if fewer push the score up)."""
    if model.family == "expert_rules" and event_log is not None:
        names, contrib = expert_contributions(model, X, event_log)
    elif model.family == "viral_load_ranking" and event_log is not None:
        vl = baselines.latest_viral_load(event_log, X.rows)
        return [[("latest_viral_load", float(v))] if np.isfinite(v) else [("no_viral_load_test", 0.0)] for v in vl]
    else:
        names, contrib = row_contributions(model, X)
    result = []
    if contrib.shape[1] == 0:
        return [[] for _ in range(len(X))]
    # order by descending contribution, then feature name
    name_rank = np.argsort(np.argsort(np.array(names, dtype=object).astype(str), kind="stable"), kind="stable")
    for row in contrib:
        idx = np.lexsort((name_rank, -row))[:k]
        result.append([(names[j], float(row[j])) for j in idx if row[j] > 0])
    return result
