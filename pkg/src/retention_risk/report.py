"""Static report: five CSV tables, each with a matching SVG figure."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .evaluation import n_flagged_for, pr_policy_curve  # noqa: E402
from .fairness import AuditReport  # noqa: E402
from .learners import TrainedModel, feature_importances  # noqa: E402
from .pipeline import RunStore, StageError, selected_group  # noqa: E402

REPORT_FILES = (
    "precision_over_time",
    "policy_menu",
    "for_ratio_over_time",
    "for_ratio_vs_precision",
    "feature_importances",
)
MENU_GRID = (0.5, 1, 2, 3, 5, 7.5, 10, 15, 20, 25, 30, 40, 50, 60, 70, 80, 90, 100)

# fixed hash salt and no timestamp: identical runs give identical SVG bytes
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "retention-risk"
plt.rcParams["font.size"] = 9
plt.rcParams["axes.spines.top"] = False
plt.rcParams["axes.spines.right"] = False


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _short(group: str, keys: dict) -> str:
    return f"{keys.get(group, '?')} {group.split('(')[0]}"


def _write(df: pd.DataFrame, path: Path) -> Path:
    df.to_csv(path, index=False, lineterminator="\n", float_format=lambda v: repr(float(v)))
    return path


def _require(store: RunStore) -> None:
    for stage in ("data", "selection", "deploy"):
        if not store.done(stage):
            raise StageError("report", f"run {store.run_id} is incomplete: stage {stage!r} has not finished")


def emit_report(store: RunStore) -> Path:
    _require(store)
    manifest = store.read_json("manifest.json")
    cfg = manifest["config"]
    k = float(cfg["selection"]["k_pct"])
    band = tuple(float(b) for b in cfg["audit"]["band"])
    out = store.root / "report"
    out.mkdir(exist_ok=True)

    models = pd.read_csv(store.root / "models.csv")
    keys = dict(zip(models["model_group"], models["key"]))
    splits = pd.read_csv(store.root / "splits.csv")
    test_start = dict(zip(splits["split_id"], splits["test_start"]))
    evals = pd.read_csv(store.root / "evaluations.csv")
    selected = selected_group(store)
    selection = pd.read_csv(store.root / "selection.csv")

    # (a) precision over time
    prec = evals[evals["k_pct"] == k][["split_id", "model_group", "precision", "recall", "prevalence"]].copy()
    prec.insert(1, "test_start", prec["split_id"].map(test_start))
    prec = prec.sort_values(["model_group", "split_id"], kind="stable")
    _write(prec, out / "precision_over_time.csv")
    fig, ax = plt.subplots(figsize=(7, 4))
    for group, sub in prec.groupby("model_group", sort=True):
        style = "-o" if group == selected else "--."
        ax.plot(pd.to_datetime(sub["test_start"]), sub["precision"], style, label=_short(group, keys),
                lw=2 if group == selected else 1)
    ax.set_xlabel("test period start")
    ax.set_ylabel(f"precision at top k={k:g}%")
    ax.set_title(f"Precision@k={k:g}% by model group over time")
    ax.legend(fontsize=6, frameon=False, loc="best")
    _save(fig, out / "precision_over_time.svg")

    # (b) policy menu for the selected model on the latest split
    last = int(splits["split_id"].max())
    scores = pd.read_csv(store.root / "splits" / f"{last:02d}" / "test_scores.csv", dtype={"entity_id": str})
    key = keys[selected]
    row_keys = list(zip(scores["entity_id"], pd.to_datetime(scores["as_of"]).map(lambda d: d.toordinal())))
    curve = pr_policy_curve(scores[key].to_numpy(), scores["label"].to_numpy(), MENU_GRID, row_keys)
    n = len(scores)
    menu = pd.DataFrame(curve, columns=["k_pct", "precision", "recall"])
    menu["n_flagged"] = [n_flagged_for(kk, n) for kk in menu["k_pct"]]
    menu.insert(0, "split_id", last)
    menu.insert(0, "model_group", selected)
    _write(menu, out / "policy_menu.csv")
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(menu["k_pct"], menu["precision"], "-o", ms=3, label="precision")
    ax.plot(menu["k_pct"], menu["recall"], "-s", ms=3, label="recall")
    ax.axvline(k, color="grey", ls=":", lw=1)
    ax.set_xlabel(f"population flagged, k% (selection uses k={k:g}%)")
    ax.set_ylabel("value")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"Policy menu, test period {test_start[last]}")
    ax.legend(frameon=False)
    _save(fig, out / "policy_menu.svg")

    # (c) FOR ratio over time
    rows = []
    for path in sorted((store.root / "splits").glob("*/audits.json")):
        for rep in map(AuditReport.from_dict, json.loads(path.read_text(encoding="utf-8"))):
            for g in rep.groups:
                if g.group == g.reference or (g.ratio is None and not g.extreme):
                    continue
                rows.append([rep.split_id, rep.model_group, g.attribute, g.group, g.reference, g.n,
                             g.false_omission, math.inf if g.extreme else g.ratio, str(g.in_band).lower()])
    ratios = pd.DataFrame(rows, columns=["split_id", "model_group", "attribute", "group", "reference", "n", "for",
                                         "ratio", "in_band"])
    ratios.insert(1, "test_start", ratios["split_id"].map(test_start))
    ratios = ratios.sort_values(["model_group", "attribute", "group", "split_id"], kind="stable")
    _write(ratios, out / "for_ratio_over_time.csv")
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.axhspan(band[0], band[1], color="tab:green", alpha=0.12, label=f"parity band [{band[0]:g}, {band[1]:g}]")
    sel = ratios[ratios["model_group"] == selected]
    for (attr, group), sub in sel.groupby(["attribute", "group"], sort=True):
        finite = np.isfinite(sub["ratio"])
        ax.plot(pd.to_datetime(sub["test_start"])[finite], sub["ratio"][finite], "-o", ms=3, label=f"{attr}={group}")
    ax.set_xlabel("test period start")
    ax.set_ylabel(f"FOR ratio vs reference (top k={k:g}% flagged)")
    ax.set_title(f"False omission rate ratio over time, {_short(selected, keys)}")
    ax.legend(fontsize=6, frameon=False)
    _save(fig, out / "for_ratio_over_time.svg")

    # (d) mean FOR ratio vs mean precision over the selection window
    rows = []
    for rec in selection.itertuples(index=False):
        spec = rec.mean_for_ratios if isinstance(rec.mean_for_ratios, str) else ""
        for item in filter(None, spec.split(";")):
            name, value = item.rsplit(":", 1)
            attr, group = name.split("=", 1)
            rows.append([rec.model_group, attr, group, float(value), float(rec.mean_precision),
                         str(rec.in_band).lower(), str(rec.selected).lower()])
    scatter = pd.DataFrame(rows, columns=["model_group", "attribute", "group", "mean_for_ratio",
                                          "mean_precision", "model_in_band", "selected"])
    _write(scatter, out / "for_ratio_vs_precision.csv")
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.axvspan(band[0], band[1], color="tab:green", alpha=0.12, label=f"parity band [{band[0]:g}, {band[1]:g}]")
    for (attr, group), sub in scatter.groupby(["attribute", "group"], sort=True):
        finite = np.isfinite(sub["mean_for_ratio"])
        ax.scatter(sub["mean_for_ratio"][finite], sub["mean_precision"][finite], s=18, label=f"{attr}={group}")
    if len(scatter):
        pick = scatter[scatter["selected"] == "true"]
        pick = pick[np.isfinite(pick["mean_for_ratio"])]
        ax.scatter(pick["mean_for_ratio"], pick["mean_precision"], s=80, facecolors="none", edgecolors="k",
                   label="selected model")
    ax.set_xlabel("mean FOR ratio over selection window")
    ax.set_ylabel(f"mean precision at k={k:g}%")
    ax.set_title("Fairness vs performance")
    ax.legend(fontsize=6, frameon=False)
    _save(fig, out / "for_ratio_vs_precision.svg")

    # (e) top-20 importances of the deployed model
    model = TrainedModel.load(store.root / "deploy" / "model.json")
    imp = feature_importances(model)[:20]
    table = pd.DataFrame(imp, columns=["feature", "importance"])
    table.insert(0, "rank", range(1, len(table) + 1))
    table.insert(0, "model_group", selected)
    _write(table, out / "feature_importances.csv")
    fig, ax = plt.subplots(figsize=(6, 5))
    if len(table):
        ax.barh(table["feature"][::-1], table["importance"][::-1], color="tab:blue")
    else:
        ax.text(0.5, 0.5, f"{model.family} has no feature importances", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_xlabel("importance")
    ax.set_title(f"Top features, {_short(selected, keys)} (k={k:g}%)")
    ax.tick_params(axis="y", labelsize=6)
    _save(fig, out / "feature_importances.svg")

    with open(out / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report", "table", "figure"])
        for name in REPORT_FILES:
            w.writerow([name, f"{name}.csv", f"{name}.svg"])
    store.log(f"report: wrote {len(REPORT_FILES)} tables and figures to {out}")
    return out
