"""
Pretrain Page
Multi-domain (or single-domain) pretraining of the backbone and export of
the meta-test snapshot
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from src.components.console import render_header, render_table
from src.utils.backbone import domain_accuracy, pretrain_mdl
from src.utils.config import apply_overrides, load_run_config
from src.utils.data_cache import get_datasets
from src.utils.weights_file import export_weights, weights_digest

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS_PATH = "artifacts/backbone.tsaw"


def add_pretrain_parser(subparsers, parents=()) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("pretrain", parents=list(parents),
                                   help="Pretrain the backbone on the seen domains")
    parser.add_argument("--domains", type=int, default=None,
                        help="Use only the first K seen domains (1 = single-domain learning)")
    parser.add_argument("--steps", type=int, default=None, help="Optimizer steps")
    parser.add_argument("--lr", type=float, default=None, help="Base learning rate")
    parser.add_argument("--anneal-every", type=int, default=None, help="Cosine restart period in steps")
    parser.add_argument("--weights-out", default=None,
                        help=f"Snapshot path (default: config 'weights' or {DEFAULT_WEIGHTS_PATH})")
    parser.add_argument("--include-heads", action="store_true", help="Also store the per-domain heads")
    return parser


def run_pretrain(args) -> int:
    config = apply_overrides(load_run_config(args.config), seed=args.seed, data_dir=args.data_dir)
    pretrain = config.pretrain
    for key, value in (("steps", args.steps), ("lr", args.lr), ("anneal_every", args.anneal_every)):
        if value is not None:
            pretrain = replace(pretrain, **{key: value})

    datasets = [ds for ds in get_datasets([], config.synthetic) if ds.seen]
    if args.domains is not None:
        datasets = datasets[:args.domains]
    render_header("Pretraining", f"{len(datasets)} domain(s): {', '.join(ds.name for ds in datasets)}")

    weights = pretrain_mdl(datasets, config.backbone_spec, pretrain, seed=config.seed)

    rows = []
    for k, ds in enumerate(datasets):
        images, labels = ds.split_arrays("train")
        local = np.unique(labels, return_inverse=True)[1]
        rows.append({"dataset": ds.name, "mean_acc": domain_accuracy(weights, k, images, local)})
    render_table(pd.DataFrame(rows), "Training accuracy per domain")

    out = Path(args.weights_out or config.weights or DEFAULT_WEIGHTS_PATH)
    export_weights(weights, out, include_heads=args.include_heads)
    print(f"Saved {out} (sha256 {weights_digest(weights)[:16]})")
    return 0
