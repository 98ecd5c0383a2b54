"""Command line entry point: ``retention-risk [global flags] <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .events import EventLogError, export_csv, ingest_csv, validate_event_log
from .pipeline import RunStore, StageError, run_experiment, score_roster, selected_group
from .synthetic import generate_synthetic_cohort


def _config(args):
    if not args.config:
        raise ConfigError("this command needs --config")
    return load_config(args.config, seed=args.seed, output_dir=args.output_dir)


def _store(args, config=None) -> RunStore:
    run = Path(args.run)
    if (run / "manifest.json").exists():
        return RunStore.open(run)
    config = config or _config(args)
    return RunStore.open(config.output_dir / args.run)


def cmd_generate(args) -> int:
    config = _config(args)
    if config.synthetic is None:
        raise ConfigError("generate needs a data.synthetic block in the config")
    log, truth = generate_synthetic_cohort(config.synthetic)
    out = Path(args.out)
    export_csv(log, out)
    truth.write_zip_attributes(out / "zip_attributes.csv")
    truth.write_csv(out / "ground_truth.csv")
    print(f"wrote {len(log.entities)} entities and {len(log.events)} events to {out}")
    return 0


def cmd_validate(args) -> int:
    try:
        log = ingest_csv(args.entities, args.events)
    except EventLogError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    report = validate_event_log(log)
    print(f"{len(log.entities)} entities, {len(log.events)} events: {report or 'valid'}")
    return 1 if report else 0


def cmd_run(args) -> int:
    config = _config(args)
    result = run_experiment(config, strict_leakage=args.strict_leakage, jobs=args.jobs)
    if result.skipped_stages:
        print(f"reused cached stages: {', '.join(result.skipped_stages)}", file=sys.stderr)
    print(f"selected: {result.selected}", file=sys.stderr)
    print(result.run_id)
    return 0


def cmd_report(args) -> int:
    from .report import emit_report  # matplotlib is only needed here

    out = emit_report(_store(args))
    print(out)
    return 0


def cmd_roster(args) -> int:
    config = _config(args)
    path = score_roster(_store(args, config), config, args.as_of, k_pct=args.k_pct)
    print(path)
    return 0


def cmd_audit(args) -> int:
    import csv

    store = _store(args)
    with open(store.root / "selection.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        mark = "*" if r["selected"] == "true" else " "
        print(f"{mark} {r['rank']:>2} in_band={r['in_band']:<5} points={r['points']} "
              f"precision={float(r['mean_precision']):.4f} {r['model_group']}")
        for item in filter(None, r["mean_for_ratios"].split(";")):
            name, value = item.rsplit(":", 1)
            print(f"        FOR ratio {name}: {float(value):.3f}")
    print(rows[0]["rationale"] if rows else "no models")
    if rows and rows[0]["warning"]:
        print(f"warning: {rows[0]['warning']}")
    print(f"selected: {selected_group(store)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retention-risk", description="Care-retention risk modeling pipeline.")
    p.add_argument("--config", help="experiment config (YAML)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for forest fitting")
    p.add_argument("--strict-leakage", action=argparse.BooleanOptionalAction, default=True,
                   help="abort on leakage findings (default); --no-strict-leakage only warns")
    p.add_argument("--output-dir", default=None, help="override the config output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort as CSV")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="check entities/events CSV files")
    v.add_argument("--entities", required=True)
    v.add_argument("--events", required=True)
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run the experiment; prints the run id")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="emit report tables and figures")
    rep.add_argument("run", help="run id (under output_dir) or run directory")
    rep.set_defaults(func=cmd_report)

    ro = sub.add_parser("roster", help="write the ranked top-k%% list for an as-of date")
    ro.add_argument("run", help="run id (under output_dir) or run directory")
    ro.add_argument("--as-of", required=True)
    ro.add_argument("--k-pct", type=float, default=None)
    ro.set_defaults(func=cmd_roster)

    a = sub.add_parser("audit", help="print the fairness-aware model ranking")
    a.add_argument("run", help="run id (under output_dir) or run directory")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, StageError, EventLogError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
