import csv
import json

import pytest

from retention_risk import cli
from retention_risk.config import load_config
from retention_risk.pipeline import RunStore, StageError, compute_run_id, run_experiment

TINY = """\
scenario: clinic
seed: 3
data:
  synthetic:
    n_entities: 250
    date_range: [2012-01-01, 2016-12-31]
temporal:
  max_splits: 3
selection:
  last_n_periods: 3
audit:
  min_group_size: 10
grid:
  - family: prior_baseline
  - family: expert_rules
  - family: decision_tree
    hyperparameters: {max_depth: 3, min_samples_leaf: 10}
  - family: random_forest
    hyperparameters: {n_trees: 5, min_samples_leaf: 10}
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "runs"
    assert cli.main(["--config", str(cfg), "--output-dir", str(out), "run"]) == 0
    config = load_config(cfg, output_dir=out)
    run_id = compute_run_id(config)
    return cfg, out, run_id, config


def test_run_layout(tiny_run):
    cfg, out, run_id, config = tiny_run
    root = out / run_id
    for name in ("manifest.json", "splits.csv", "models.csv", "evaluations.csv", "audits.csv", "selection.csv",
                 "deploy/model.json", "data/events.csv", "data/ground_truth.csv"):
        assert (root / name).exists(), name
    splits = list(csv.DictReader(open(root / "splits.csv")))
    assert len(splits) == 3
    for s in splits:
        sub = root / "splits" / f"{int(s['split_id']):02d}"
        assert (sub / "test_scores.csv").exists() and (sub / "encoder.json").exists()
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["run_id"] == run_id and "output_dir" not in manifest["config"]


def test_selection_table(tiny_run):
    cfg, out, run_id, config = tiny_run
    rows = list(csv.DictReader(open(out / run_id / "selection.csv")))
    assert sum(r["selected"] == "true" for r in rows) == 1
    assert rows[0]["selected"] == "true"
    assert {r["model_group"] for r in rows} == {s.model_group for s in config.grid}


def test_rerun_reuses_stages(tiny_run):
    cfg, out, run_id, config = tiny_run
    before = (out / run_id / "selection.csv").read_bytes()
    result = run_experiment(config)
    assert result.run_id == run_id
    assert "selection" in result.skipped_stages and "deploy" in result.skipped_stages
    assert (out / run_id / "selection.csv").read_bytes() == before


def test_report_roster_audit(tiny_run, capsys):
    cfg, out, run_id, config = tiny_run
    base = ["--config", str(cfg), "--output-dir", str(out)]
    assert cli.main(base + ["report", run_id]) == 0
    report = out / run_id / "report"
    for name in ("precision_over_time", "policy_menu", "for_ratio_over_time", "for_ratio_vs_precision",
                 "feature_importances"):
        assert (report / f"{name}.csv").stat().st_size > 0
        assert (report / f"{name}.svg").read_text().lstrip().startswith("<?xml")
    assert cli.main(base + ["roster", run_id, "--as-of", "2016-03-01", "--k-pct", "50"]) == 0
    roster = out / run_id / "rosters" / "roster_2016-03-01_k50.csv"
    header = roster.read_text().splitlines()[0]
    assert header.startswith("rank,entity_id,as_of,score,factor_1")
    capsys.readouterr()
    assert cli.main(base + ["audit", run_id]) == 0
    assert "selected:" in capsys.readouterr().out


def test_roster_outside_range_fails(tiny_run, capsys):
    cfg, out, run_id, config = tiny_run
    code = cli.main(["--config", str(cfg), "--output-dir", str(out), "roster", run_id, "--as-of", "2030-01-01"])
    assert code == 2
    assert "outside the feature-computable range" in capsys.readouterr().err


def test_report_needs_finished_run(tmp_path):
    store = RunStore(tmp_path, "abc")
    store.write_json("manifest.json", {"run_id": "abc"})
    from retention_risk.report import emit_report

    with pytest.raises(StageError, match="has not finished"):
        emit_report(store)


def test_store_is_append_only(tmp_path):
    store = RunStore(tmp_path, "r")
    store.write_text("a.txt", "one")
    store.write_text("a.txt", "one")
    with pytest.raises(StageError, match="refusing to overwrite"):
        store.write_text("a.txt", "two")


def test_generate_and_validate(tmp_path, capsys):
    cfg = tmp_path / "g.cfg"
    cfg.write_text(TINY)
    assert cli.main(["--config", str(cfg), "generate", "--out", str(tmp_path / "data")]) == 0
    assert cli.main(["validate", "--entities", str(tmp_path / "data" / "entities.csv"),
                     "--events", str(tmp_path / "data" / "events.csv")]) == 0
    assert "valid" in capsys.readouterr().out


def test_validate_reports_bad_file(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("entity_id,birth_date,gender,race,zip_code,transmission_category,diagnosis_date\n")
    (tmp_path / "v.csv").write_text("entity_id,event_type,event_date,numeric_value,category_value\n"
                                    "x,hiv_visit,2015-01-01,,\n")
    assert cli.main(["validate", "--entities", str(tmp_path / "e.csv"), "--events", str(tmp_path / "v.csv")]) == 1
    assert "unknown entity_id: x" in capsys.readouterr().err


def test_missing_config_is_usage_error(capsys):
    assert cli.main(["run"]) == 2
    assert "needs --config" in capsys.readouterr().err


def test_external_csv_data(tmp_path):
    """A config that points at CSV files instead of the generator."""
    gen = tmp_path / "g.cfg"
    gen.write_text(TINY)
    cli.main(["--config", str(gen), "generate", "--out", str(tmp_path / "d")])
    text = TINY.replace(
        "  synthetic:\n    n_entities: 250\n    date_range: [2012-01-01, 2016-12-31]\n",
        "  entities: d/entities.csv\n  events: d/events.csv\n  zip_attributes: d/zip_attributes.csv\n"
        "  date_range: [2012-01-01, 2016-12-31]\n",
    ).replace("  max_splits: 3\n", "  max_splits: 3\n  feature_start: 2012-01-01\n  data_end: 2016-12-31\n")
    ext = tmp_path / "ext.cfg"
    ext.write_text(text)
    config = load_config(ext, output_dir=tmp_path / "runs")
    assert config.synthetic is None and config.data_paths["events"].endswith("events.csv")
    assert run_experiment(config).selected
