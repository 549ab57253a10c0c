"""
Report Page
Summarize JSON run reports and grid CSVs: per-dataset accuracies, seen /
unseen / overall averages and average rank
"""

import argparse
import logging
from pathlib import Path
from typing import List

import pandas as pd

from src.components.console import render_no_data_message, render_table
from src.utils.harness import CSV_COLUMNS, RunReport, reports_frame
from src.utils.statistics import group_averages

logger = logging.getLogger(__name__)


def add_report_parser(subparsers, parents=()) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("report", parents=list(parents),
                                   help="Summarize run reports and grid CSVs")
    parser.add_argument("inputs", nargs="+", help="JSON run reports and/or long-form CSV files")
    parser.add_argument("--csv-out", default=None, help="Write the combined long-form table here")
    return parser


def load_results(paths: List[str]) -> pd.DataFrame:
    """Combine JSON reports and CSV tables into one long-form frame"""
    reports, frames = [], []
    for raw in paths:
        path = Path(raw)
        if not path.exists():
            raise FileNotFoundError(f"Result file not found: {path}")
        if path.suffix == ".json":
            reports.append(RunReport.load(path))
        else:
            frames.append(pd.read_csv(path))
    if reports:
        frames.append(reports_frame(reports))
    if not frames:
        return pd.DataFrame(columns=CSV_COLUMNS)
    return pd.concat(frames, ignore_index=True)[CSV_COLUMNS]


def run_report(args) -> int:
    table = load_results(args.inputs)
    if table.empty:
        render_no_data_message("No result rows found")
        return 1
    wide = table.pivot_table(index="dataset", columns="method", values="mean_acc", aggfunc="first")
    render_table(wide.reset_index(), "Mean accuracy per dataset")
    try:
        render_table(group_averages(table), "Averages")
    except ValueError as exc:
        logger.warning("Average rank unavailable: %s", exc)
    if args.csv_out:
        table.to_csv(args.csv_out, index=False)
        print(f"Combined table written to {args.csv_out}")
    return 0
