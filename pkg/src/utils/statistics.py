"""
Statistics Module
Accuracy summaries, 95% confidence intervals and average-rank aggregation.
"""

import hashlib
from typing import Dict, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

Z_95 = 1.96


def ci95(accuracies: Sequence[float]) -> float:
    """1.96 * s / sqrt(n) with s the sample standard deviation (0 when n <= 1)"""
    values = np.asarray(accuracies, dtype=np.float64)
    n = values.size
    if n <= 1:
        return 0.0
    return float(Z_95 * values.std(ddof=1) / np.sqrt(n))


def summarize(accuracies: Sequence[float]) -> Tuple[float, float]:
    """(mean, ci95) of per-episode accuracies"""
    values = np.asarray(accuracies, dtype=np.float64)
    if values.size == 0:
        return float("nan"), 0.0
    return float(values.mean()), ci95(values)


def accuracy_digest(accuracies: Sequence[float]) -> str:
    """SHA-256 over the little-endian float64 encoding of the accuracies"""
    return hashlib.sha256(np.asarray(accuracies, dtype="<f8").tobytes()).hexdigest()


def _as_table(means) -> pd.DataFrame:
    """Wide table (dataset rows x method columns) from a nested dict or long-form frame"""
    if isinstance(means, pd.DataFrame):
        if {"method", "dataset", "mean_acc"} <= set(means.columns):
            return means.pivot_table(index="dataset", columns="method", values="mean_acc", aggfunc="first")
        return means
    return pd.DataFrame({method: dict(per_dataset) for method, per_dataset in means.items()})


def aggregate_rank(means) -> Dict[str, float]:
    """
    Average rank per method over datasets (rank 1 = best, ties share the
    mean of the tied ranks).

    Args:
        means: {method: {dataset: mean accuracy}} or a long-form frame with
            method / dataset / mean_acc columns

    Raises:
        ValueError: If the methods do not cover the same datasets
    """
    table = _as_table(means)
    if table.empty:
        return {}
    missing = table.isna()
    if missing.values.any():
        gaps = [f"{m} lacks {list(table.index[missing[m]])}" for m in table.columns if missing[m].any()]
        raise ValueError(f"Methods cover different datasets: {'; '.join(gaps)}")
    ranks = np.vstack([rankdata(-row, method="average") for row in table.to_numpy(dtype=np.float64)])
    return {method: float(ranks[:, j].mean()) for j, method in enumerate(table.columns)}


def group_averages(frame: pd.DataFrame) -> pd.DataFrame:
    """
    Per-method Average Seen / Average Unseen / Average All accuracy and
    Average Rank from a long-form results frame.
    """
    rows = []
    ranks = aggregate_rank(frame)
    for method, part in frame.groupby("method", sort=False):
        seen = part[part["seen_flag"].astype(bool)]["mean_acc"]
        unseen = part[~part["seen_flag"].astype(bool)]["mean_acc"]
        rows.append({
            "method": method,
            "avg_seen": float(seen.mean()) if len(seen) else float("nan"),
            "avg_unseen": float(unseen.mean()) if len(unseen) else float("nan"),
            "avg_all": float(part["mean_acc"].mean()),
            "avg_rank": ranks.get(method, float("nan")),
        })
    return pd.DataFrame(rows, columns=["method", "avg_seen", "avg_unseen", "avg_all", "avg_rank"])
