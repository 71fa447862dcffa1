"""Command-line front end.

Subcommands ``replicate`` and ``montecarlo`` read a sectioned key-value
configuration, run the corresponding stage and write plain-text tables,
machine-readable CSVs and a run manifest into the output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation
degeneracy beyond the per-cell tolerance.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import parse_config
from .errors import ConfigError, DataError, EstimationError
from .render import render_csv, render_human
from .report import (
    atomic_write,
    run_montecarlo,
    run_replication,
    write_manifest,
    write_tables,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetiv",
        description="Heteroskedasticity-based IV estimation and Monte Carlo validation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("replicate", "run the survey estimation grid"),
        ("montecarlo", "run the synthetic-data scenario grid"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="configuration file path")
        cmd.add_argument("--out", help="output directory (overrides run.output)")
        cmd.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        cmd.add_argument("--threads", type=int, help="worker threads (overrides run.threads)")
        cmd.add_argument("--format", choices=("human", "csv"),
                         help="stdout table format (overrides run.format)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if cfg.mode != args.command:
            raise ConfigError(
                f"configuration is for mode {cfg.mode!r} but the "
                f"{args.command!r} subcommand was invoked"
            )
        if args.out is not None:
            cfg.output = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if args.format is not None:
            cfg.format = args.format
        os.makedirs(cfg.output, exist_ok=True)

        renderer = render_human if cfg.format == "human" else render_csv
        if args.command == "replicate":
            result = run_replication(cfg)
            written = write_tables(result.tables, cfg.output)
            lines = result.manifest_lines + [f"wrote {p}" for p in written]
            lines.append(f"cells: {result.cells_total}, failed: {result.cells_failed}")
            write_manifest(cfg, cfg.output, lines)
            for table in result.tables.values():
                sys.stdout.write(renderer(table))
                sys.stdout.write("\n")
            if result.cells_total > 0 and result.cells_failed == result.cells_total:
                print("every estimation cell failed", file=sys.stderr)
                return EXIT_ESTIMATION
        else:
            result = run_montecarlo(cfg)
            csv_text = [result.summaries[0].CSV_HEADER]
            report_text = []
            for summary in result.summaries:
                csv_text += summary.csv_rows()
                report_text.append(summary.to_report_text())
            atomic_write(os.path.join(cfg.output, "mc_summary.csv"),
                         "\n".join(csv_text) + "\n")
            atomic_write(os.path.join(cfg.output, "mc_report.txt"),
                         "\n".join(report_text))
            written = write_tables({"mc_table": result.table}, cfg.output)
            lines = result.manifest_lines + [f"wrote {p}" for p in written]
            write_manifest(cfg, cfg.output, lines)
            sys.stdout.write(renderer(result.table))
        return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
