import pytest

from retention_risk.config import ConfigError, from_mapping, load_config

BASE = {"data": {"synthetic": {"n_entities": 50, "date_range": ["2012-01-01", "2016-12-31"]}}}


def cfg(**blocks):
    data = {k: v for k, v in BASE.items()}
    data.update(blocks)
    return from_mapping(data)


def test_clinic_defaults():
    c = cfg()
    assert c.scenario == "clinic"
    assert c.rule.k_pct == 10 and c.label.window_days == 183 and c.label.kind == "access"
    assert c.temporal.update_frequency.years == 1
    assert c.audit["band"] == (0.9, 1.1) and c.audit["min_points"] == 1
    assert 10.0 in c.k_grid


def test_health_department_defaults():
    c = cfg(scenario="health_department")
    assert c.rule.k_pct == 1 and c.label.window_days == 365
    assert c.temporal.update_frequency.months == 1
    assert c.temporal.train_as_of_frequency is not None


def test_grid_lists_expand():
    c = cfg(grid=[{"family": "decision_tree", "hyperparameters": {"max_depth": [2, 4], "min_samples_leaf": [1, 5]}}])
    assert len(c.grid) == 4
    assert len({s.model_group for s in c.grid}) == 4


def test_logistic_feature_list_is_not_an_axis():
    c = cfg(grid=[{"family": "logistic_regression", "hyperparameters": {"features": ["age_years", "race_"]}}])
    assert len(c.grid) == 1 and c.grid[0].params["features"] == ["age_years", "race_"]


def test_duplicate_groups_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        cfg(grid=[{"family": "prior_baseline"}, {"family": "prior_baseline"}])


@pytest.mark.parametrize(
    "blocks, fragment",
    [
        ({"scenario": "hospital"}, "scenario"),
        ({"extras": {}}, "unknown config blocks"),
        ({"audit": {"band": [1.1, 0.9]}}, "audit.band"),
        ({"grid": [{"family": "svm"}]}, "unknown learner family"),
        ({"label": {"kind": "access", "window_days": 0}}, "window_days"),
        ({"data": {}}, "data block"),
    ],
)
def test_invalid_configs(blocks, fragment):
    with pytest.raises((ConfigError, ValueError), match=fragment):
        cfg(**blocks)


def test_seed_override_reaches_generator():
    c = from_mapping(dict(BASE), seed=42)
    assert c.seed == 42 and c.synthetic.seed == 42


def test_canonical_json_ignores_output_dir(tmp_path):
    a = cfg(output_dir=str(tmp_path / "a"))
    b = cfg(output_dir=str(tmp_path / "b"))
    assert a.canonical_json() == b.canonical_json()
    assert a.output_dir != b.output_dir


def test_load_yaml(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("scenario: clinic\ndata:\n  synthetic:\n    n_entities: 10\n"
                    "    date_range: [2012-01-01, 2015-12-31]\nselection:\n  k_pct: 5\n")
    c = load_config(path, output_dir=tmp_path / "out")
    assert c.rule.k_pct == 5 and c.output_dir == (tmp_path / "out").resolve()
    path.write_text("scenario: [unclosed\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(path)


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("clinic_synthetic.cfg", "health_department_synthetic.cfg"):
        c = load_config(root / name)
        assert c.synthetic.n_entities == 5000
