"""
Components module for console output
"""

from .console import (
    configure_logging,
    render_header,
    format_table,
    render_table,
    render_parameter_counts,
    render_no_data_message
)

__all__ = [
    'configure_logging',
    'render_header',
    'format_table',
    'render_table',
    'render_parameter_counts',
    'render_no_data_message'
]
