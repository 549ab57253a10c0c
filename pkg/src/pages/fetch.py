"""
Fetch Page
Download IDX datasets into the data root
"""

import argparse
import logging

from src.utils.idx_loader import IDX_SOURCES, fetch_idx_dataset, resolve_data_dir

logger = logging.getLogger(__name__)


def add_fetch_parser(subparsers, parents=()) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("fetch", parents=list(parents), help="Download IDX datasets")
    parser.add_argument("names", nargs="+", choices=sorted(IDX_SOURCES))
    parser.add_argument("--force", action="store_true", help="Re-download cached files")
    return parser


def run_fetch(args) -> int:
    root = resolve_data_dir(args.data_dir)
    for name in args.names:
        paths = fetch_idx_dataset(name, root, force=args.force)
        print(f"{name}: {len(paths)} files in {root / name}")
    return 0
