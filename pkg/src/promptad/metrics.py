"""Rank-based AUROC with the ties-at-half rule."""

from __future__ import annotations

import numpy as np
from scipy import stats

from .errors import UndefinedMetricError


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(random positive outscores random negative), ties 0.5."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise UndefinedMetricError("scores and labels must align")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC undefined: {n_pos} positives, {n_neg} negatives")
    ranks = stats.rankdata(scores, method="average")
    pos_rank_sum = ranks[labels == 1].sum()
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
