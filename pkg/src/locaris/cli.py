"""Command-line front end.

Three subcommands, one JSON config per experiment:

  locaris simulate <cfg>   write synthetic dataset CSVs + environment manifest
  locaris run <cfg>        execute any experiment kind, write result tables
  locaris report <dir>     re-render results.csv from a run's report.json

Flags only select the config path, an output override, --jobs, and
verbosity; everything else lives in the config document. Exit codes:
2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DataError, LocarisError, NumericError
from .experiments import config_from_dict, load_config, render_artifacts, run_experiment

log = logging.getLogger("locaris")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locaris",
        description="Desk-scale indoor localization experiments.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write synthetic dataset CSV files")
    sim.add_argument("config", help="experiment config (kind=simulate)")
    sim.add_argument("-o", "--output", help="override the config's output_dir")

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("config", help="experiment config JSON path")
    run.add_argument("-o", "--output", help="override the config's output_dir")
    run.add_argument("--jobs", type=int, default=None,
                     help="parallel conditions (LOCARIS_JOBS overrides)")

    rep = sub.add_parser("report", help="re-render tables from a run directory")
    rep.add_argument("directory", help="output directory of a previous run")
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if cfg.kind != "simulate":
        raise ConfigError(f"locaris simulate needs kind=simulate, got {cfg.kind!r}")
    if args.output:
        cfg = config_from_dict({**cfg.to_dict(), "output_dir": args.output})
    out = run_experiment(cfg)
    log.info("simulate wrote %s", out)
    print(out)
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg = config_from_dict({**cfg.to_dict(), "output_dir": args.output})
    out = run_experiment(cfg, jobs_override=args.jobs)
    log.info("run wrote %s", out)
    print(out)
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.directory)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise ConfigError(f"no report.json under {run_dir}")
    try:
        with open(report_path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"report.json is not valid JSON: {exc}") from exc
    if "rows" not in payload:
        raise DataError("report.json has no rows")
    render_artifacts(run_dir, payload)
    _print_rows(payload["rows"])
    return 0


def _print_rows(rows) -> None:
    columns = ("method", "environment", "condition", "fraction", "seed",
               "mae_m", "rmse_m", "p95_m")
    table = [columns]
    for row in rows:
        cells = []
        for col in columns:
            value = row.get(col, "")
            if isinstance(value, float):
                value = f"{value:.3f}"
            cells.append(str(value))
        table.append(tuple(cells))
    widths = [max(len(r[i]) for r in table) for i in range(len(columns))]
    for r in table:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    handler = {"simulate": _cmd_simulate, "run": _cmd_run, "report": _cmd_report}
    try:
        return handler[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except LocarisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
