"""Command line entry point: ``invariance-audit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import collector, report
from .errors import AnalysisError, CollectionError, ConfigError, HeaderMismatchError, SchemaError
from .report import EXIT_ANALYSIS, EXIT_COLLECTION, EXIT_CONFIG, EXIT_OK, RunConfig
from .schema import schema_violations


def _config(args) -> RunConfig:
    config = RunConfig.load(args.config)
    if getattr(args, "output_dir", None):
        config = RunConfig.from_dict({**config.to_dict(), "output_dir": args.output_dir,
                                      "backend": config.backend.to_dict()})
    return config


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_plan(args) -> int:
    config = _config(args)
    plans = report.cmd_plan(config)
    per_cell = {}
    for p in plans:
        key = f"{p.setting.value}/{p.order.value}"
        per_cell[key] = per_cell.get(key, 0) + 1
    _print({"plans": len(plans), "cells": per_cell, "path": str(config.out / report.PLAN_FILE)})
    return EXIT_OK


def cmd_run(args) -> int:
    config = _config(args)

    def progress(done):
        print(f"... {done} trials written", file=sys.stderr)

    mlog, status = report.cmd_run(config, workers=args.workers, progress=progress)
    rep = collector.validity_report(mlog)
    print(f"validity {rep['overall'] if rep['overall'] is not None else float('nan'):.4f} "
          f"({rep['valid']}/{rep['total']})")
    return status


def cmd_validate(args) -> int:
    frag = report.cmd_validate(_config(args))
    _print(frag["data"])
    return EXIT_OK


def cmd_metaprompt(args) -> int:
    frag = report.cmd_metaprompt(_config(args), n_per_question=args.n)
    _print(frag["data"])
    return EXIT_OK


def cmd_stats(args) -> int:
    frag = report.cmd_stats(_config(args))
    d = frag["data"]
    _print({"mean_kl": d["mean_kl"], "spearman": d["spearman"], "mi_ranking": d["mi_ranking"]})
    return EXIT_OK


def cmd_cbd(args) -> int:
    config = _config(args)
    compare = {}
    for path in args.compare or []:
        frag = report.load_fragment(path)
        compare[str(path)] = frag["data"]["results"]
    frag = report.cmd_cbd(config, compare=compare)
    _print({"summary": frag["data"]["summary"]})
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = RunConfig.load(args.config) if args.config else None
    result = report.cmd_simulate(config, args.scenario, args.n, args.seeds, args.bootstrap)
    _print(result)
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    config = _config(args)
    paths = args.fragments or [config.out / name for name in
                               (report.VALIDITY_FILE, report.STATS_FILE, report.CBD_FILE, report.METAPROMPT_FILE)
                               if (config.out / name).exists()]
    fragments = [report.load_fragment(p) for p in paths]
    report.cmd_report(fragments, config.out)
    print(config.out / report.REPORT_FILE)
    return EXIT_OK


def cmd_validate_schema(args) -> int:
    problems = schema_violations(args.schema)
    for p in problems:
        print(p)
    print(f"{len(problems)} violation(s)", file=sys.stderr)
    return EXIT_CONFIG if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invariance-audit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="YAML run configuration")
        p.add_argument("--output-dir", help="override the configured run directory")
        p.set_defaults(func=func)
        return p

    with_config("plan", cmd_plan, "write the trial plan")
    p = with_config("run", cmd_run, "collect measurements for every missing trial")
    p.add_argument("--workers", type=int, default=None)
    with_config("validate", cmd_validate, "validity table of the measurement log")
    p = with_config("metaprompt", cmd_metaprompt, "comprehension metaprompt accuracy")
    p.add_argument("--n", type=int, default=None, help="repetitions per question and cell")
    with_config("stats", cmd_stats, "estimates, KL, Spearman and MI")
    p = with_config("cbd", cmd_cbd, "contextuality analysis of template pairs")
    p.add_argument("--compare", nargs="*", type=Path, help="cbd.json files of other runs for overlap counts")
    p = with_config("report", cmd_report, "merge fragments into report.json and CSV tables")
    p.add_argument("--fragments", nargs="*", type=Path)

    p = sub.add_parser("simulate", help="detection rate versus trials per cell")
    p.add_argument("scenario", choices=report.SCENARIOS)
    p.add_argument("--config")
    p.add_argument("--n", type=int, nargs="+", default=[50, 200, 800])
    p.add_argument("--seeds", type=int, default=200)
    p.add_argument("--bootstrap", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate-schema", help="print every schema violation")
    p.add_argument("schema")
    p.set_defaults(func=cmd_validate_schema)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CollectionError, HeaderMismatchError) as exc:
        print(f"collection error: {exc}", file=sys.stderr)
        return EXIT_COLLECTION
    except (AnalysisError, ValueError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
