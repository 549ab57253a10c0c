"""
Ablate Page
Cartesian ablation grids over adapter topology, attachment, decomposition,
iteration count and components
"""

import argparse
import logging
from typing import Dict, List

from src.components.console import render_header, render_table
from src.utils.config import ConfigError, apply_overrides, load_run_config
from src.utils.harness import GRID_AXES, ablation_grid
from src.utils.statistics import group_averages

logger = logging.getLogger(__name__)

# Named grids reproducing the standard ablation studies
PRESET_GRIDS = {
    "topology": {"connection": ["S", "R"], "form": ["M", "CW"]},
    "iterations": {"iterations": [10, 20, 40, 60]},
    "attachment": {"attachment": ["block4", "block3-4", "block2-4", "all"]},
    "decomposition": {"N": [0, 2, 4, 8, 16, 32]},
    "components": {"method": ["Ad-R-M-PA", "Ad-R-M", "none-PA", "none"]},
    "init": {"init": ["identity", "random"]},
    "heads": {"head": ["ncc", "md", "lr", "softmax", "knn1"]},
}

DEFAULT_GRID_CSV = "results/ablation.csv"


def parse_axis(text: str) -> Dict[str, List]:
    """'iterations=10,20,40' -> {'iterations': [10, 20, 40]}"""
    if "=" not in text:
        raise ConfigError(f"Axis must look like name=v1,v2 (got '{text}')")
    name, values = text.split("=", 1)
    name = name.strip()
    if name not in GRID_AXES:
        raise ConfigError(f"Unknown axis '{name}', expected one of {GRID_AXES}")
    parsed = []
    for raw in values.split(";" if name == "attachment" else ","):
        raw = raw.strip()
        if name in ("iterations", "N"):
            parsed.append(int(raw))
        elif name == "include_pa":
            parsed.append(raw.lower() in ("1", "true", "yes"))
        else:
            parsed.append(raw)
    return {name: parsed}


def add_ablate_parser(subparsers, parents=()) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("ablate", parents=list(parents), help="Run an ablation grid")
    parser.add_argument("--grid", choices=sorted(PRESET_GRIDS), default=None, help="Preset grid")
    parser.add_argument("--axis", action="append", default=[],
                        help="Custom axis name=v1,v2 (attachment values separated by ';')")
    parser.add_argument("--csv", default=DEFAULT_GRID_CSV, help="Long-form CSV to append to")
    return parser


def run_ablate(args) -> int:
    config = apply_overrides(load_run_config(args.config), seed=args.seed, episodes=args.episodes,
                             workers=args.workers, data_dir=args.data_dir)
    axes: Dict[str, List] = dict(PRESET_GRIDS[args.grid]) if args.grid else {}
    for text in args.axis:
        axes.update(parse_axis(text))
    if not axes:
        raise ConfigError("Nothing to ablate: pass --grid or at least one --axis")

    render_header("Ablation grid", ", ".join(f"{k}={v}" for k, v in axes.items()))
    table = ablation_grid(config, axes, out_csv=args.csv)
    render_table(table.drop(columns=["protocol", "seed"]))
    if not table.empty:
        render_table(group_averages(table), "Averages")
    print(f"Rows appended to {args.csv}")
    return 0
