"""Command line entry point: ``lidar-fdii <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .scenario import (
    PipelineError,
    SchemaError,
    SuiteError,
    SUITE_COLUMNS,
    bundled_dir,
    dumps,
    pretty_table,
    rows_to_csv,
    run_scenario,
    run_suite,
)


def _scenario_path(arg: str) -> Path:
    """Accept a path or the name of a bundled scenario."""
    p = Path(arg)
    if p.exists():
        return p
    b = bundled_dir() / (arg if arg.endswith(".json") else arg + ".json")
    if b.exists():
        return b
    raise FileNotFoundError(f"scenario {arg!r} not found (bundled: {', '.join(sorted(x.stem for x in bundled_dir().glob('*.json')))})")


def _summary_rows(rep: dict) -> list[dict]:
    v = rep.get("verdict", {})
    tr = rep.get("trajectory", {})
    return [{
        "scenario": rep["scenario"],
        "seed": rep["seed"],
        "verdict": v.get("label", ""),
        "attacked": v.get("attacked", ""),
        "region_polygons": rep.get("region", {}).get("n_polygons", ""),
        "reached": tr.get("reached", ""),
        "min_hbar_m": tr.get("min_hbar_m", ""),
        "expected": "" if "expected" not in rep else ("pass" if rep["expected"]["passed"] else "FAIL"),
    }]


def _emit(rep: dict, fmt: str) -> None:
    if fmt == "json":
        sys.stdout.write(dumps({k: v for k, v in rep.items() if not k.startswith("_")}))
    else:
        rows = _summary_rows(rep)
        sys.stdout.write(rows_to_csv(rows, rows[0].keys()))


def _cmd_run(args, stage: str) -> int:
    rep = run_scenario(_scenario_path(args.scenario), args.out, seed=args.seed, stage=stage,
                       plots=not args.no_plots)
    _emit(rep, args.format)
    exp = rep.get("expected")
    return 0 if exp is None or exp["passed"] else 1


def _cmd_suite(args) -> int:
    pattern = args.glob or str(bundled_dir())
    rows, ok = run_suite(pattern, args.out, seed=args.seed, plots=not args.no_plots)
    if args.format == "csv":
        sys.stdout.write(rows_to_csv(rows, SUITE_COLUMNS))
    else:
        sys.stdout.write(pretty_table(rows, SUITE_COLUMNS))
    return 0 if ok else 1


def _cmd_sweep(args) -> int:
    from . import sweeps

    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    result = sweeps.run_named(args.kind, n=args.n, seed=args.seed or 0, out_dir=out)
    if args.format == "json":
        sys.stdout.write(json.dumps(result["summary"], sort_keys=True, indent=2) + "\n")
    else:
        sys.stdout.write(rows_to_csv(result["rows"], result["rows"][0].keys()))
    return 0 if result["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidar-fdii", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory for report, CSV and SVG files")
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="stdout format")
    common.add_argument("--no-plots", action="store_true", help="skip SVG rendering")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("simulate", "cast scans and apply the attack"),
                           ("fdii", "simulate, perceive and classify"),
                           ("drive", "full pipeline including the closed-loop drive")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("scenario", help="scenario JSON path or bundled scenario name")
    sp = sub.add_parser("suite", parents=[common], help="run every scenario matching a glob")
    sp.add_argument("glob", nargs="?", help="glob or directory (default: bundled scenarios)")
    sp = sub.add_parser("sweep", parents=[common], help="seeded randomized property sweeps")
    sp.add_argument("kind", choices=("occupancy", "coverage", "classification", "robustness"))
    sp.add_argument("--n", type=int, default=500, help="scenes per family")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("simulate", "fdii"):
            return _cmd_run(args, args.command)
        if args.command == "drive":
            return _cmd_run(args, "all")
        if args.command == "suite":
            return _cmd_suite(args)
        return _cmd_sweep(args)
    except (SchemaError, SuiteError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
