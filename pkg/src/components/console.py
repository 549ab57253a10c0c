"""
Console Components Module
Reusable terminal output pieces: logging setup, headers and result tables
"""

import logging
import sys
from typing import Dict, Optional

import pandas as pd

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
LOG_DATEFMT = "%H:%M:%S"

# Column headers used when printing result tables
COLUMN_LABELS = {
    "method": "Method",
    "dataset": "Dataset",
    "seen_flag": "Seen",
    "n_episodes": "Episodes",
    "mean_acc": "Acc (%)",
    "ci95": "CI95 (%)",
    "params_fraction": "#Params (%)",
    "avg_seen": "Avg Seen",
    "avg_unseen": "Avg Unseen",
    "avg_all": "Avg All",
    "avg_rank": "Avg Rank",
}

PERCENT_COLUMNS = ("mean_acc", "ci95", "params_fraction", "avg_seen", "avg_unseen", "avg_all")


def configure_logging(verbose: bool = False) -> None:
    """One stream handler on the root logger; DEBUG with verbose, else INFO"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATEFMT))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def render_header(title: str, subtitle: Optional[str] = None) -> None:
    print()
    print(title)
    print("=" * len(title))
    if subtitle:
        print(subtitle)


def format_table(frame: pd.DataFrame, digits: int = 2) -> str:
    """Percent columns scaled by 100, friendly headers"""
    if frame.empty:
        return "(no rows)"
    shown = frame.copy()
    for column in PERCENT_COLUMNS:
        if column in shown.columns:
            shown[column] = (100 * shown[column].astype(float)).round(digits)
    if "avg_rank" in shown.columns:
        shown["avg_rank"] = shown["avg_rank"].astype(float).round(digits)
    shown = shown.rename(columns=COLUMN_LABELS)
    return shown.to_string(index=False)


def render_table(frame: pd.DataFrame, title: Optional[str] = None) -> None:
    if title:
        render_header(title)
    print(format_table(frame))


def render_parameter_counts(counts: Dict, label: str = "") -> None:
    prefix = f"{label}: " if label else ""
    print(f"{prefix}backbone conv params {counts['backbone_params']:,}  "
          f"adapter params {counts['adapter_params']:,}  "
          f"fraction {100 * counts['fraction']:.2f}%")


def render_no_data_message(message: str = "No data available") -> None:
    print(f"(!) {message}")
