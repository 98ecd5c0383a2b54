"""Experiment configuration: YAML file -> validated, fully defaulted settings.

The scenario fixes defaults that every block can override:

* clinic: appointment-level rows, yearly updates, k = 10%, 183-day access label
* health_department: monthly roster rows, monthly updates, k = 1%, 365-day access label
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .evaluation import SelectionRule
from .features import DEFAULT_CATEGORICALS, AggregateSpec, default_feature_specs
from .labels import LabelSpec
from .learners import LearnerSpec
from .learners.baselines import load_rules
from .synthetic import DEFAULT_SIGNAL, SyntheticConfig
from .temporal import TemporalConfig

SCENARIOS = ("clinic", "health_department")

SCENARIO_DEFAULTS = {
    "clinic": {
        "label": {"kind": "access", "window_days": 183},
        "temporal": {"update_frequency": "1 year", "min_train_history": "12 months"},
        "selection": {"k_pct": 10.0},
    },
    "health_department": {
        "label": {"kind": "access", "window_days": 365},
        "temporal": {
            "update_frequency": "1 month",
            "min_train_history": "12 months",
            "train_as_of_frequency": "3 months",
        },
        "selection": {"k_pct": 1.0},
    },
}

BASE_DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "features": {"aggregates": "default", "categoricals": list(DEFAULT_CATEGORICALS), "zip_attributes": True},
    "temporal": {"test_span": None, "sliding_window": None, "max_splits": None},
    "selection": {"regret_band": 0.05, "last_n_periods": 5, "k_grid": [1, 2, 5, 10, 20, 30, 50, 75, 100]},
    "audit": {
        "attributes": ["race", "gender", "transmission_category"],
        "references": {},
        "min_group_size": 25,
        "band": [0.9, 1.1],
        "focus": None,
        "min_points": 1,
    },
    "grid": [
        {"family": "prior_baseline"},
        {"family": "expert_rules"},
        {"family": "viral_load_ranking"},
        {"family": "decision_tree", "hyperparameters": {"max_depth": 5, "min_samples_leaf": 25}},
        {"family": "logistic_regression", "hyperparameters": {"l2_lambda": 0.001, "tol": 1e-4}},
        {"family": "random_forest",
         "hyperparameters": {"n_trees": 50, "min_samples_leaf": 25, "max_samples": 0.25}},
        {"family": "gradient_boosted_trees",
         "hyperparameters": {"n_rounds": 50, "max_depth": 3, "learning_rate": 0.1, "subsample": 0.5}},
    ],
    "roster": {"k_pct": None},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _expand_grid(entries, seed: int) -> list[LearnerSpec]:
    """Grid entries; list-valued hyperparameters expand to their cross product.

    ``features`` (logistic column prefixes) and ``rules`` lists are values, not axes.
    """
    specs = []
    for i, entry in enumerate(entries):
        if "family" not in entry:
            raise ConfigError(f"grid[{i}]: missing 'family'")
        hp = dict(entry.get("hyperparameters") or {})
        combos = [{}]
        for name in sorted(hp):
            values = hp[name]
            if isinstance(values, list) and name not in ("features", "rules"):
                combos = [dict(c, **{name: v}) for c in combos for v in values]
            else:
                combos = [dict(c, **{name: values}) for c in combos]
        for combo in combos:
            try:
                specs.append(LearnerSpec.create(entry["family"], combo, entry.get("seed", seed)))
            except ValueError as exc:
                raise ConfigError(f"grid[{i}]: {exc}") from None
    groups = [s.model_group for s in specs]
    dupes = sorted({g for g in groups if groups.count(g) > 1})
    if dupes:
        raise ConfigError(f"duplicate model groups in grid: {dupes}")
    return specs


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # fully defaulted mapping; the content hash is computed from it
    scenario: str
    seed: int
    synthetic: SyntheticConfig | None
    data_paths: dict | None
    label: LabelSpec
    feature_specs: tuple
    categoricals: tuple
    use_zip_attributes: bool
    temporal: TemporalConfig
    max_splits: int | None
    grid: tuple
    rule: SelectionRule
    k_grid: tuple
    audit: dict
    roster_k_pct: float
    output_dir: Path
    source: Path | None = None

    def canonical_json(self) -> str:
        """Everything that determines results; the output location does not."""
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)


def _synthetic(block: dict, seed: int) -> SyntheticConfig:
    signal = block.get("dropout_signal")
    signal = DEFAULT_SIGNAL if signal is None else tuple(sorted((k, float(v)) for k, v in signal.items()))
    bias = block.get("group_bias")
    if bias is not None:
        bias = (bias["attribute"], bias["group"], float(bias["multiplier"]))
    dr = block.get("date_range")
    if not dr or len(dr) != 2:
        raise ConfigError("data.synthetic.date_range must be [start, end]")
    return SyntheticConfig(
        n_entities=int(block.get("n_entities", 1000)),
        date_range=(str(dr[0]), str(dr[1])),
        seed=int(block.get("seed", seed)),
        dropout_signal=signal,
        group_bias=bias,
        dropout_intercept=float(block.get("dropout_intercept", -3.0)),
    )


def from_mapping(data: dict, source: Path | None = None, seed: int | None = None) -> ExperimentConfig:
    data = dict(data or {})
    scenario = data.get("scenario", "clinic")
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    raw = _merge(_merge(BASE_DEFAULTS, SCENARIO_DEFAULTS[scenario]), data)
    if "grid" in data:
        raw["grid"] = copy.deepcopy(data["grid"])
    if seed is not None:
        raw["seed"] = int(seed)
        if "synthetic" in raw.get("data", {}):
            raw["data"]["synthetic"]["seed"] = int(seed)
    known = set(BASE_DEFAULTS) | {"scenario", "data", "label", "temporal", "selection"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config blocks {unknown}")
    run_seed = int(raw["seed"])

    try:
        data_block = raw.get("data") or {}
        synthetic = data_paths = None
        if "synthetic" in data_block:
            synthetic = _synthetic(data_block["synthetic"], run_seed)
        elif "entities" in data_block and "events" in data_block:
            base = source.parent if source is not None else Path.cwd()
            data_paths = {k: str((base / data_block[k]).resolve()) if data_block.get(k) else None
                          for k in ("entities", "events", "zip_attributes")}
            if data_block.get("date_range"):
                data_paths["date_range"] = [str(d) for d in data_block["date_range"]]
        else:
            raise ConfigError("data block needs either 'synthetic' or 'entities' + 'events' paths")

        lab = raw["label"]
        label = LabelSpec(lab["kind"], int(lab["window_days"]), int(lab.get("min_gap_days", 90)))

        feats = raw["features"]
        aggregates = feats["aggregates"]
        if aggregates == "default":
            specs = tuple(default_feature_specs())
        else:
            specs = tuple(AggregateSpec.parse(a) for a in aggregates)

        tmp = raw["temporal"]
        if synthetic is not None:
            tmp.setdefault("feature_start", synthetic.date_range[0])
            tmp.setdefault("data_end", synthetic.date_range[1])
        for key in ("feature_start", "data_end"):
            if key not in tmp:
                raise ConfigError(f"temporal.{key} is required")
            tmp[key] = str(tmp[key])
        temporal = TemporalConfig.create(
            tmp["feature_start"], tmp["data_end"], tmp["update_frequency"], label.window_days,
            test_span=tmp.get("test_span"), min_train_history=tmp.get("min_train_history", "12 months"),
            sliding_window=tmp.get("sliding_window"), train_as_of_frequency=tmp.get("train_as_of_frequency"),
        )
        if scenario == "health_department" and temporal.train_as_of_frequency is None:
            raise ConfigError("health_department scenario needs temporal.train_as_of_frequency")

        sel = raw["selection"]
        rule = SelectionRule(float(sel["k_pct"]), float(sel["regret_band"]), int(sel["last_n_periods"]))
        k_grid = tuple(sorted({float(k) for k in sel["k_grid"]} | {rule.k_pct}))

        grid = tuple(_expand_grid(raw["grid"], run_seed))
        if not grid:
            raise ConfigError("grid is empty")
        for spec in grid:
            if spec.family == "expert_rules":
                load_rules(spec.params["rules"])

        aud = raw["audit"]
        band = tuple(float(b) for b in aud["band"])
        if len(band) != 2 or not band[0] < band[1]:
            raise ConfigError(f"audit.band must be [low, high], got {aud['band']}")
        audit = {
            "attributes": tuple(aud["attributes"]),
            "references": dict(aud.get("references") or {}),
            "min_group_size": int(aud["min_group_size"]),
            "band": band,
            "focus": None if aud.get("focus") is None else tuple(tuple(f) for f in aud["focus"]),
            "min_points": int(aud["min_points"]),
        }
        if audit["min_points"] < 0:
            raise ConfigError("audit.min_points must be >= 0")
        roster_k = raw["roster"].get("k_pct")
        roster_k = rule.k_pct if roster_k is None else float(roster_k)
        max_splits = tmp.get("max_splits")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None

    out_dir = Path(raw["output_dir"]).resolve()  # relative to the working directory
    return ExperimentConfig(
        raw=raw,
        scenario=scenario,
        seed=run_seed,
        synthetic=synthetic,
        data_paths=data_paths,
        label=label,
        feature_specs=specs,
        categoricals=tuple(feats["categoricals"]),
        use_zip_attributes=bool(feats.get("zip_attributes", True)),
        temporal=temporal,
        max_splits=None if max_splits is None else int(max_splits),
        grid=grid,
        rule=rule,
        k_grid=k_grid,
        audit=audit,
        roster_k_pct=roster_k,
        output_dir=out_dir,
        source=source,
    )


def load_config(path, seed: int | None = None, output_dir=None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    if output_dir is not None:
        data["output_dir"] = str(Path(output_dir).resolve())
    return from_mapping(data, source=path.resolve(), seed=seed)
