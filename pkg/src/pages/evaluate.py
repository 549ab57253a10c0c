"""
Evaluate Page
Episodic evaluation of one method on the configured datasets
"""

import argparse
import logging
from dataclasses import replace

from src.components.console import render_header, render_parameter_counts, render_table
from src.utils.adapters import parse_code
from src.utils.config import apply_overrides, load_run_config, validate_run_config
from src.utils.harness import run_experiment

logger = logging.getLogger(__name__)


def add_evaluate_parser(subparsers, parents=()) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("eval", parents=list(parents),
                                   help="Evaluate a method on sampled episodes")
    parser.add_argument("--method", default=None,
                        help="Adapter code overriding the config (e.g. Ad-R-M-PA, Ad-S-CW, none)")
    parser.add_argument("--head", default=None, help="Classifier head (ncc, md, lr, softmax, knn<k>)")
    parser.add_argument("--finetune", action="store_true", help="Finetune the whole backbone instead")
    parser.add_argument("--protocol", default=None, choices=["varying", "vw5shot", "5way1shot"])
    parser.add_argument("--iterations", type=int, default=None, help="Adaptation iterations")
    parser.add_argument("--weights", default=None, help="Backbone snapshot to evaluate")
    return parser


def resolve_eval_config(args):
    config = apply_overrides(load_run_config(args.config), seed=args.seed, episodes=args.episodes,
                             workers=args.workers, out=args.out, data_dir=args.data_dir)
    adapt = config.adapt
    if args.head:
        adapt = replace(adapt, head=args.head)
    if args.iterations is not None:
        adapt = replace(adapt, iterations=args.iterations)
    if args.finetune:
        adapt = replace(adapt, finetune_all=True, head="finetune-ncc")
    adapter = config.adapter
    if args.method:
        adapter = parse_code(args.method, attachment=adapter.attachment, init=adapter.init,
                             delta=adapter.delta, strict=adapter.strict)
    config = replace(config, adapter=adapter, adapt=adapt, head=adapt.head,
                     protocol=args.protocol or config.protocol, weights=args.weights or config.weights)
    validate_run_config(config)
    return config


def run_evaluate(args) -> int:
    config = resolve_eval_config(args)
    render_header(f"Evaluating {config.method}", f"{config.episodes} episodes per dataset, "
                                                  f"protocol {config.protocol}, seed {config.seed}")
    report = run_experiment(config)
    render_parameter_counts(report.params, config.backbone)
    render_table(report.to_frame().drop(columns=["protocol", "seed"]))
    failures = sum(len(r.failures) for r in report.datasets.values())
    if failures:
        logger.warning("%d episode(s) failed and were excluded", failures)
    return 0
