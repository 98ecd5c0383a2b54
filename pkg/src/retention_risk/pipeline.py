"""End-to-end experiment runner with a content-addressed run store.

Stages: data -> splits -> one stage per split (cohort, labels, features,
leakage check, grid fit, evaluation, audit) -> selection -> deployment
model. Every artifact lives under ``<output_dir>/<run_id>/``; a stage that
already has its completion marker is skipped on rerun.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import ExperimentConfig
from .evaluation import (EvaluationError, evaluate_scores, n_flagged_for, rank_models, rank_order,
                         read_evaluations, write_evaluations)
from .events import EventLog, day_str, export_csv, ingest_csv, to_day
from .fairness import AuditReport, audit_model, joint_select, write_audits
from .features import EncoderState, build_feature_matrix, fit_encoders
from .labels import build_clinic_cohort, build_label_matrix, build_roster_cohort
from .learners import TrainedModel, fit, top_contributions
from .synthetic import generate_synthetic_cohort
from .temporal import check_leakage, generate_splits, roster_as_of_dates, splits_to_csv

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


class LeakageError(StageError):
    pass


def code_version() -> str:
    """Package version plus a digest of its source files."""
    h = hashlib.sha256(__version__.encode())
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def compute_run_id(config: ExperimentConfig) -> str:
    h = hashlib.sha256(config.canonical_json().encode())
    h.update(code_version().encode())
    if config.data_paths:
        for key in ("entities", "events", "zip_attributes"):
            if config.data_paths.get(key):
                h.update(_file_digest(config.data_paths[key]).encode())
    return h.hexdigest()[:16]


class RunStore:
    """Append-only directory for one run; rewriting a file with new bytes is an error."""

    def __init__(self, root, run_id: str):
        self.run_id = run_id
        self.root = Path(root) / run_id
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "stages").mkdir(exist_ok=True)

    @classmethod
    def open(cls, path) -> "RunStore":
        path = Path(path)
        if not (path / "manifest.json").exists():
            raise FileNotFoundError(f"{path} is not a run directory (no manifest.json)")
        return cls(path.parent, path.name)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def done(self, stage: str) -> bool:
        return (self.root / "stages" / stage).exists()

    def mark(self, stage: str) -> None:
        (self.root / "stages" / stage).write_text("done\n", encoding="utf-8")

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        if p.exists():
            if p.read_text(encoding="utf-8") != text:
                raise StageError("store", f"refusing to overwrite {p} with different content")
            return p
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(p)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, sort_keys=True, indent=1) + "\n")

    def read_json(self, name: str):
        return json.loads((self.root / name).read_text(encoding="utf-8"))

    def log(self, message: str) -> None:
        logger.info(message)
        with open(self.root / "run.log", "a", encoding="utf-8") as fh:
            fh.write(message + "\n")


def _csv_text(header, rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -------------------------------------------------------------------- stages


def load_data(config: ExperimentConfig):
    """(log, zip_attributes, ground_truth or None) from the configured source."""
    if config.synthetic is not None:
        log, truth = generate_synthetic_cohort(config.synthetic)
        return log, truth.zip_attributes, truth
    paths = config.data_paths
    log = ingest_csv(paths["entities"], paths["events"], paths.get("date_range"))
    zips = None
    if paths.get("zip_attributes"):
        zips = pd.read_csv(paths["zip_attributes"], dtype={"zip_code": str})
    return log, zips, None


def _stage_data(store: RunStore, config: ExperimentConfig):
    try:
        log, zips, truth = load_data(config)
    except Exception as exc:  # noqa: BLE001 - reported with stage context
        raise StageError("data", str(exc)) from exc
    if not store.done("data"):
        export_csv(log, store.root / "data")
        if zips is not None:
            store.write_text("data/zip_attributes.csv", zips.to_csv(index=False, lineterminator="\n"))
        if truth is not None:
            truth.write_csv(store.path("data", "ground_truth.csv"))
        store.mark("data")
        store.log(f"data: {len(log.entities)} entities, {len(log.events)} events")
    return log, (zips if config.use_zip_attributes else None)


def make_splits(config: ExperimentConfig):
    splits = generate_splits(config.temporal)
    if config.max_splits is not None and len(splits) > config.max_splits:
        splits = splits[-config.max_splits:]
    return splits


def train_rows(config: ExperimentConfig, log: EventLog, period) -> list:
    if config.scenario == "clinic":
        return build_clinic_cohort(log, period)
    rows = []
    for as_of in roster_as_of_dates(period, config.temporal.train_as_of_frequency, config.temporal.feature_start):
        rows.extend(build_roster_cohort(log, as_of))
    return rows


def test_rows(config: ExperimentConfig, log: EventLog, period) -> list:
    if config.scenario == "clinic":
        return build_clinic_cohort(log, period)
    rows = []
    for as_of in roster_as_of_dates(period, config.temporal.update_frequency, period[0]):
        rows.extend(build_roster_cohort(log, as_of))
    return rows


def group_attributes(log: EventLog, rows, attributes) -> dict:
    out = {}
    for attr in attributes:
        lookup = log.entity_attribute(attr)
        out[attr] = [lookup.get(r.entity_id) for r in rows]
    return out


def model_keys(grid) -> dict:
    """Short stable file keys for model groups (m00, m01, ...) in grid order."""
    return {spec.model_group: f"m{i:02d}" for i, spec in enumerate(grid)}


def _score_columns(config):
    keys = model_keys(config.grid)
    return [keys[s.model_group] for s in config.grid]


def _run_split(store: RunStore, config: ExperimentConfig, log, zips, split, strict_leakage: bool, jobs: int):
    stage = f"split_{split.split_id:02d}"
    base = f"splits/{split.split_id:02d}"
    try:
        tr_rows = train_rows(config, log, split.train_period)
        te_rows = test_rows(config, log, split.test_period)
        if not tr_rows or not te_rows:
            raise StageError(stage, f"empty cohort ({len(tr_rows)} train rows, {len(te_rows)} test rows)")
        y_tr = build_label_matrix(tr_rows, log, config.label)
        y_te = build_label_matrix(te_rows, log, config.label)
        encoder = fit_encoders(config.feature_specs, config.categoricals, tr_rows, log, zips)
        X_tr = build_feature_matrix(config.feature_specs, config.categoricals, tr_rows, log, encoder, zips)
        X_te = build_feature_matrix(config.feature_specs, config.categoricals, te_rows, log, encoder, zips,
                                    role="test")
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, f"{split.describe()}: {exc}") from exc

    findings = check_leakage(split, X_tr, y_tr, log=log, test_features=X_te)
    if findings:
        message = f"{len(findings)} leakage findings, first: {findings[0]}"
        if strict_leakage:
            raise LeakageError(stage, message)
        warnings.warn(message, stacklevel=2)
        store.log(f"{stage}: WARNING {message}")

    store.write_json(f"{base}/encoder.json", encoder.to_dict())
    y_tr.to_csv(store.path(base, "train_labels.csv"))

    keys = model_keys(config.grid)
    scores = {}
    records, audits = [], []
    row_keys = [r.key for r in te_rows]
    attrs = group_attributes(log, te_rows, config.audit["attributes"])
    for spec in config.grid:
        key = keys[spec.model_group]
        model_path = f"{base}/models/{key}.json"
        try:
            if (store.root / model_path).exists():
                model = TrainedModel.load(store.root / model_path)
            else:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always")
                    model = fit(spec, X_tr, y_tr, split_id=split.split_id, jobs=jobs)
                for w in caught:
                    store.log(f"{stage}: {spec.model_group}: {w.message}")
                model.save(store.path(model_path))
            s = model.score(X_te, log)
        except Exception as exc:  # noqa: BLE001
            raise StageError(stage, f"{spec.model_group}: {exc}") from exc
        scores[key] = s
        records.append(evaluate_scores(spec.model_group, split.split_id, s, y_te.labels, config.k_grid, row_keys))
        order = rank_order(s, row_keys)
        flagged = np.zeros(len(s), dtype=bool)
        flagged[order[:records[-1].n_flagged[config.rule.k_pct]]] = True
        audits.append(audit_model(spec.model_group, split.split_id, flagged, y_te.labels, attrs,
                                  config.audit["references"], config.audit["band"],
                                  config.audit["min_group_size"]))

    header = ["entity_id", "as_of", "label", *_score_columns(config)]
    rows = [[r.entity_id, day_str(r.as_of), int(y), *(repr(float(scores[k][i])) for k in header[3:])]
            for i, (r, y) in enumerate(zip(te_rows, y_te.labels))]
    store.write_text(f"{base}/test_scores.csv", _csv_text(header, rows))
    write_evaluations(records, store.path(base, "evaluations.csv"))
    write_audits(audits, store.path(base, "audits.csv"))
    store.write_json(f"{base}/audits.json", [a.to_dict() for a in audits])
    notices = sorted({n for a in audits for n in a.notices})
    store.write_text(f"{base}/audit_notices.txt", "".join(n + "\n" for n in notices))
    store.mark(stage)
    store.log(f"{stage}: {split.describe()}: {len(tr_rows)} train rows, {len(te_rows)} test rows,"
              f" test prevalence {y_te.prevalence:.4f}")


def _selection(store: RunStore, config: ExperimentConfig, splits):
    records, audits = [], []
    for s in splits:
        base = store.root / "splits" / f"{s.split_id:02d}"
        records += read_evaluations(base / "evaluations.csv")
        audits += [AuditReport.from_dict(d) for d in json.loads((base / "audits.json").read_text(encoding="utf-8"))]
    write_evaluations(records, store.path("evaluations.csv"))
    write_audits(audits, store.path("audits.csv"))
    try:
        performance = rank_models(records, config.rule)
        joint = joint_select(records, audits, config.rule, config.audit["band"], config.audit["focus"],
                             min_points=config.audit["min_points"])
    except EvaluationError as exc:
        raise StageError("selection", str(exc)) from exc
    perf_rank = {st.model_group: i + 1 for i, st in enumerate(performance)}
    header = ["rank", "model_group", "family", "selected", "points", "mean_precision", "performance_rank",
              "in_band", "mean_for_ratios", "branch", "rationale", "warning"]
    family = {s.model_group: s.family for s in config.grid}
    rows = []
    for i, st in enumerate(joint.ranking):
        ratios = ";".join(f"{a}={g}:{v!r}" for (a, g), v in st.mean_ratios.items())
        rows.append([i + 1, st.model_group, family[st.model_group], str(st.model_group == joint.selected).lower(),
                     st.points, repr(st.mean_precision), perf_rank[st.model_group], str(st.in_band).lower(),
                     ratios, joint.branch, joint.rationale, joint.warning or ""])
    store.write_text("selection.csv", _csv_text(header, rows))
    store.mark("selection")
    store.log(f"selection: {joint.rationale}")
    if joint.warning:
        store.log(f"selection: WARNING {joint.warning}")
    return joint.selected


def _deploy(store: RunStore, config: ExperimentConfig, log, zips, selected: str, jobs: int):
    """Refit the selected group on every row whose outcome is observable by data end."""
    spec = next(s for s in config.grid if s.model_group == selected)
    end = config.temporal.data_end - config.label.window_days
    period = (config.temporal.feature_start, end)
    rows = train_rows(config, log, period)
    y = build_label_matrix(rows, log, config.label)
    encoder = fit_encoders(config.feature_specs, config.categoricals, rows, log, zips)
    X = build_feature_matrix(config.feature_specs, config.categoricals, rows, log, encoder, zips)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit(spec, X, y, split_id=-1, jobs=jobs)
    store.write_json("deploy/encoder.json", encoder.to_dict())
    model.save(store.path("deploy", "model.json"))
    store.write_json("deploy/info.json", {"model_group": selected, "train_start": day_str(period[0]),
                                          "train_end": day_str(period[1]), "n_rows": len(rows)})
    store.mark("deploy")
    store.log(f"deploy: refit {selected} on {len(rows)} rows through {day_str(end)}")


@dataclass(frozen=True)
class RunResult:
    run_id: str
    root: Path
    selected: str
    skipped_stages: tuple


def run_experiment(config: ExperimentConfig, strict_leakage: bool = True, jobs: int = 1) -> RunResult:
    run_id = compute_run_id(config)
    store = RunStore(config.output_dir, run_id)
    store.write_json("manifest.json", {"run_id": run_id, "code_version": code_version(),
                                       "config": json.loads(config.canonical_json())})
    keys = model_keys(config.grid)
    store.write_text("models.csv", _csv_text(["key", "model_group", "family"],
                                             [[keys[s.model_group], s.model_group, s.family] for s in config.grid]))
    skipped = []
    log, zips = _stage_data(store, config)
    try:
        splits = make_splits(config)
    except Exception as exc:  # noqa: BLE001
        raise StageError("splits", str(exc)) from exc
    splits_to_csv(splits, store.path("splits.csv"))
    for split in splits:
        stage = f"split_{split.split_id:02d}"
        if store.done(stage):
            skipped.append(stage)
            continue
        _run_split(store, config, log, zips, split, strict_leakage, jobs)
    if store.done("selection"):
        skipped.append("selection")
        selected = selected_group(store)
    else:
        selected = _selection(store, config, splits)
    if store.done("deploy"):
        skipped.append("deploy")
    else:
        _deploy(store, config, log, zips, selected, jobs)
    store.log(f"run complete: selected {selected}")
    return RunResult(run_id, store.root, selected, tuple(skipped))


def selected_group(store: RunStore) -> str:
    with open(store.root / "selection.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["selected"] == "true":
                return row["model_group"]
    raise StageError("selection", "selection.csv names no selected model")


# -------------------------------------------------------------------- roster


def score_roster(store: RunStore, config: ExperimentConfig, as_of, k_pct: float | None = None,
                 log: EventLog | None = None) -> Path:
    """Top-k% ranked list at ``as_of`` with each row's three strongest risk factors."""
    if not store.done("deploy"):
        raise StageError("roster", f"run {store.run_id} has no deployed model; run it to completion first")
    as_of = to_day(as_of)
    if log is None:
        log, zips = load_data(config)[:2]
    else:
        zips = load_data(config)[1] if config.synthetic is not None else None
    zips = zips if config.use_zip_attributes else None
    if not config.temporal.feature_start <= as_of <= log.end:
        raise StageError("roster", f"as_of {day_str(as_of)} outside the feature-computable range"
                                   f" [{day_str(config.temporal.feature_start)}, {day_str(log.end)}]")
    model = TrainedModel.load(store.root / "deploy" / "model.json")
    encoder = EncoderState.from_dict(store.read_json("deploy/encoder.json"))
    if config.scenario == "clinic":
        rows = build_clinic_cohort(log, (as_of, as_of))
    else:
        rows = build_roster_cohort(log, as_of)
    k_pct = config.roster_k_pct if k_pct is None else float(k_pct)
    header = ["rank", "entity_id", "as_of", "score",
              "factor_1", "contribution_1", "factor_2", "contribution_2", "factor_3", "contribution_3"]
    out_rows = []
    if rows:
        X = build_feature_matrix(config.feature_specs, config.categoricals, rows, log, encoder, zips,
                                 role="score")
        scores = model.score(X, log)
        keys = [r.key for r in rows]
        order = rank_order(scores, keys)
        n = n_flagged_for(k_pct, len(rows))
        top = order[:n]
        sub = build_feature_matrix(config.feature_specs, config.categoricals, [rows[i] for i in top], log, encoder,
                                   zips, role="score")
        factors = top_contributions(model, sub, 3, event_log=log)
        for rank, (i, fac) in enumerate(zip(top, factors), start=1):
            cells = []
            for j in range(3):
                cells += [fac[j][0], repr(fac[j][1])] if j < len(fac) else ["", ""]
            out_rows.append([rank, rows[i].entity_id, day_str(rows[i].as_of), repr(float(scores[i])), *cells])
    name = f"rosters/roster_{day_str(as_of)}.csv" if k_pct == config.roster_k_pct else \
        f"rosters/roster_{day_str(as_of)}_k{k_pct:g}.csv"
    path = store.write_text(name, _csv_text(header, out_rows))
    store.log(f"roster: {len(out_rows)} of {len(rows)} rows at {day_str(as_of)} (k={k_pct:g}%)")
    return path
