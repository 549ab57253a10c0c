"""
Command modules for the task-specific adapter CLI
"""

from .pretrain import add_pretrain_parser, run_pretrain
from .evaluate import add_evaluate_parser, run_evaluate
from .ablate import add_ablate_parser, run_ablate
from .report import add_report_parser, run_report
from .fetch import add_fetch_parser, run_fetch

__all__ = [
    'add_pretrain_parser',
    'run_pretrain',
    'add_evaluate_parser',
    'run_evaluate',
    'add_ablate_parser',
    'run_ablate',
    'add_report_parser',
    'run_report',
    'add_fetch_parser',
    'run_fetch'
]
