"""
Task-Specific Adapters - Source Package
"""

__version__ = "1.0.0"
__author__ = "TSA contributors"
