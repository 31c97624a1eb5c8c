"""Rank-based ROC AUC."""

from __future__ import annotations

import numpy as np

from pipevo.errors import SingleClassLabels


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    run_rank = (starts + 1 + ends) / 2.0  # mean of positions start+1 .. end
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def roc_auc(y_true, scores) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie).

    Computed in O(n log n) from average ranks; exact for half-integer sums.
    """
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError(f"label/score shape mismatch {y.shape} vs {s.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassLabels("ROC AUC needs both classes in y_true")
    ranks = average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_roc_auc(y_true, proba) -> float:
    """Macro one-vs-rest AUC over the classes present in ``y_true``.

    Binary problems reduce to the positive-class AUC.
    """
    y = np.asarray(y_true)
    proba = np.asarray(proba, dtype=np.float64)
    if proba.ndim == 1 or proba.shape[1] == 2:
        col = proba if proba.ndim == 1 else proba[:, 1]
        return roc_auc((y == 1).astype(int), col)
    present = np.unique(y)
    if len(present) < 2:
        raise SingleClassLabels("ROC AUC needs at least two classes in y_true")
    return float(np.mean([roc_auc((y == c).astype(int), proba[:, c]) for c in present]))
