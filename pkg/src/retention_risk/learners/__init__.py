"""Uniform fit/score contract over every model family in the grid."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from . import baselines, logistic, trees

FAMILIES = (
    "decision_tree",
    "random_forest",
    "gradient_boosted_trees",
    "logistic_regression",
    "expert_rules",
    "prior_baseline",
    "viral_load_ranking",
)
TREE_FAMILIES = ("decision_tree", "random_forest", "gradient_boosted_trees")
LEARNED_FAMILIES = TREE_FAMILIES + ("logistic_regression",)
FORMAT_VERSION = 1

_DEFAULTS = {
    "decision_tree": {"max_depth": None, "min_samples_split": 2, "min_samples_leaf": 1},
    "random_forest": {
        "n_trees": 100,
        "max_depth": None,
        "min_samples_split": 2,
        "min_samples_leaf": 1,
        "max_features": "sqrt",
        "bootstrap": True,
        "max_samples": 1.0,
    },
    "gradient_boosted_trees": {
        "n_rounds": 100,
        "learning_rate": 0.1,
        "max_depth": 3,
        "min_samples_split": 2,
        "min_samples_leaf": 1,
        "reg_lambda": 1.0,
        "subsample": 1.0,
    },
    "logistic_regression": {
        "l2_lambda": 1e-3,
        "max_iter": 1000,
        "tol": 1e-6,
        "standardize": True,
        "features": None,
    },
    "expert_rules": {"rules": None},
    "prior_baseline": {},
    "viral_load_ranking": {},
}


class LearnerError(ValueError):
    pass


def _check(cond, family, message):
    if not cond:
        raise LearnerError(f"{family}: {message}")


def _validate(family: str, hp: dict) -> None:
    unknown = set(hp) - set(_DEFAULTS[family])
    _check(not unknown, family, f"unknown hyperparameters {sorted(unknown)}")
    if "max_depth" in hp:
        d = hp["max_depth"]
        _check(d is None or (isinstance(d, int) and d >= 1), family, "max_depth must be >= 1 or unlimited (null)")
    if "min_samples_split" in hp:
        _check(hp["min_samples_split"] >= 2, family, "min_samples_split must be >= 2")
    if "min_samples_leaf" in hp:
        _check(hp["min_samples_leaf"] >= 1, family, "min_samples_leaf must be >= 1")
    if family == "random_forest":
        _check(int(hp["n_trees"]) >= 1, family, "n_trees must be >= 1")
        _check(0 < hp["max_samples"] <= 1, family, "max_samples must be in (0, 1]")
        trees.resolve_max_features(hp["max_features"], 10**6)
    if family == "gradient_boosted_trees":
        _check(int(hp["n_rounds"]) >= 0, family, "n_rounds must be >= 0")
        _check(math.isfinite(hp["learning_rate"]) and hp["learning_rate"] >= 0, family, "learning_rate must be >= 0")
        _check(hp["reg_lambda"] >= 0, family, "reg_lambda must be >= 0")
        _check(0 < hp["subsample"] <= 1, family, "subsample must be in (0, 1]")
    if family == "logistic_regression":
        _check(hp["l2_lambda"] >= 0, family, "l2_lambda must be >= 0")
        _check(int(hp["max_iter"]) >= 1, family, "max_iter must be >= 1")
        _check(hp["tol"] > 0, family, "tol must be > 0")
    if family == "expert_rules":
        baselines.load_rules(hp["rules"])


def _freeze(value):
    if isinstance(value, dict):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, tuple) and value and all(isinstance(v, tuple) and len(v) == 2 and isinstance(v[0], str)
                                                  for v in value):
        return {k: _thaw(v) for k, v in value}
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


@dataclass(frozen=True)
class LearnerSpec:
    family: str
    hyperparameters: tuple = ()  # sorted (name, value) pairs, defaults filled in
    seed: int = 0

    @classmethod
    def create(cls, family: str, hyperparameters: dict | None = None, seed: int = 0) -> "LearnerSpec":
        if family not in FAMILIES:
            raise LearnerError(f"unknown learner family {family!r}; choose from {FAMILIES}")
        hp = dict(_DEFAULTS[family])
        hp.update(hyperparameters or {})
        _validate(family, hp)
        return cls(family, tuple(sorted((k, _freeze(v)) for k, v in hp.items())), int(seed))

    @property
    def params(self) -> dict:
        return {k: _thaw(v) for k, v in self.hyperparameters}

    @property
    def model_group(self) -> str:
        """Family plus hyperparameters; stable across splits and seeds."""
        if not self.hyperparameters:
            return self.family
        inner = ",".join(f"{k}={json.dumps(_thaw(v), sort_keys=True, separators=(',', ':'))}"
                         for k, v in self.hyperparameters)
        return f"{self.family}({inner})"

    def to_dict(self) -> dict:
        return {"family": self.family, "hyperparameters": self.params, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSpec":
        return cls.create(d["family"], d.get("hyperparameters"), d.get("seed", 0))


def _readonly(state: dict) -> MappingProxyType:
    for v in state.values():
        if isinstance(v, np.ndarray):
            v.setflags(write=False)
    return MappingProxyType(state)


@dataclass(frozen=True)
class TrainedModel:
    spec: LearnerSpec
    fitted_state: MappingProxyType
    train_split_id: int
    feature_names: tuple
    notes: tuple = field(default=())

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def model_group(self) -> str:
        return self.spec.model_group

    def check_columns(self, columns) -> None:
        columns = tuple(columns)
        if columns == self.feature_names:
            return
        for i, (a, b) in enumerate(zip(self.feature_names, columns)):
            if a != b:
                raise LearnerError(f"feature column {i} is {b!r}, model was trained with {a!r}")
        raise LearnerError(f"matrix has {len(columns)} columns, model was trained with {len(self.feature_names)}")

    def score(self, X, log=None) -> np.ndarray:
        """Scores for the rows of a FeatureMatrix; baselines read raw history from ``log``."""
        fam = self.family
        st = self.fitted_state
        if fam in LEARNED_FAMILIES:
            self.check_columns(X.columns)
            values = X.values
            if fam == "decision_tree":
                return st["trees"][0].predict(values)
            if fam == "random_forest":
                return trees.predict_forest(st["trees"], values)
            if fam == "gradient_boosted_trees":
                return trees.predict_boosting(st["base"], st["trees"], st["learning_rate"], values)
            return logistic.predict_logistic(st["params"], _logistic_inputs(st, values))
        if fam == "prior_baseline":
            return baselines.prior_baseline_score(len(X), st["prevalence"])
        if log is None:
            raise LearnerError(f"{fam} scores from raw history and needs the event log")
        if fam == "expert_rules":
            return baselines.expert_rules_score(baselines.raw_attributes(log, X.rows), st["rules"], len(X))
        return baselines.viral_load_ranking_score(log, X.rows)

    # ------------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        st = self.fitted_state
        state = {}
        for k, v in st.items():
            if k == "trees":
                state[k] = [t.to_dict() for t in v]
            elif k == "rules":
                state[k] = [vars(r).copy() for r in v]
            elif isinstance(v, np.ndarray):
                state[k] = v.tolist()
            else:
                state[k] = v
        return {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "train_split_id": self.train_split_id,
            "feature_names": list(self.feature_names),
            "fitted_state": state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise LearnerError(f"unsupported model format version {version!r} (expected {FORMAT_VERSION})")
        spec = LearnerSpec.from_dict(d["spec"])
        state = {}
        for k, v in d["fitted_state"].items():
            if k == "trees":
                state[k] = tuple(trees.Tree.from_dict(t) for t in v)
            elif k == "rules":
                state[k] = baselines.load_rules(v)
            elif k in ("params", "mean", "scale", "train_std"):
                state[k] = np.asarray(v, dtype=float)
            elif k == "columns":
                state[k] = np.asarray(v, dtype=np.int64)
            else:
                state[k] = v
        return cls(spec, _readonly(state), int(d["train_split_id"]), tuple(d["feature_names"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _logistic_inputs(state, values):
    cols = state["columns"]
    return (values[:, cols] - state["mean"]) / state["scale"]


def _logistic_columns(feature_names, prefixes) -> np.ndarray:
    if prefixes is None:
        return np.arange(len(feature_names))
    if isinstance(prefixes, str):
        prefixes = [prefixes]
    cols = [i for i, name in enumerate(feature_names) if any(name.startswith(p) for p in prefixes)]
    if not cols:
        raise LearnerError(f"logistic_regression: no feature matches {list(prefixes)}")
    return np.array(cols, dtype=np.int64)


def fit(spec: LearnerSpec, X, y, split_id: int = 0, jobs: int = 1) -> TrainedModel:
    """Fit ``spec`` on a FeatureMatrix and the aligned LabelMatrix."""
    labels = np.asarray(y.labels if hasattr(y, "labels") else y, dtype=float)
    if len(X) != len(labels):
        raise LearnerError(f"{len(X)} feature rows but {len(labels)} labels")
    if len(labels) == 0:
        raise LearnerError(f"{spec.family}: empty training set")
    if hasattr(y, "rows") and tuple(r.key for r in y.rows) != tuple(r.key for r in X.rows):
        raise LearnerError("feature rows and label rows are not aligned")
    names = tuple(X.columns)
    values = X.values
    hp = spec.params
    fam = spec.family
    if fam == "decision_tree":
        state = {"trees": (trees.fit_tree(values, labels, names, **hp),)}
    elif fam == "random_forest":
        state = {"trees": tuple(trees.fit_forest(values, labels, names, seed=spec.seed, jobs=jobs, **hp))}
    elif fam == "gradient_boosted_trees":
        base, fitted, trace = trees.fit_boosting(values, labels, names, seed=spec.seed, **hp)
        state = {"base": base, "trees": tuple(fitted), "learning_rate": float(hp["learning_rate"]),
                 "loss_trace": tuple(trace)}
    elif fam == "logistic_regression":
        cols = _logistic_columns(names, hp["features"])
        sub = values[:, cols]
        mean = sub.mean(axis=0)
        scale = sub.std(axis=0)
        scale[scale == 0] = 1.0
        if not hp["standardize"]:
            mean = np.zeros_like(mean)
            scale = np.ones_like(scale)
        params, trace, converged = logistic.fit_logistic((sub - mean) / scale, labels, hp["l2_lambda"],
                                                         int(hp["max_iter"]), hp["tol"])
        state = {"params": params, "columns": cols, "mean": mean, "scale": scale,
                 "train_std": sub.std(axis=0), "loss_trace": tuple(trace), "converged": converged}
    elif fam == "expert_rules":
        state = {"rules": baselines.load_rules(hp["rules"])}
    elif fam == "prior_baseline":
        state = {"prevalence": float(labels.mean())}
    else:
        state = {}
    return TrainedModel(spec, _readonly(state), int(split_id), names)


from .importance import feature_importances, row_contributions, top_contributions  # noqa: E402

__all__ = [
    "FAMILIES",
    "LearnerError",
    "LearnerSpec",
    "TrainedModel",
    "feature_importances",
    "fit",
    "row_contributions",
    "top_contributions",
]
