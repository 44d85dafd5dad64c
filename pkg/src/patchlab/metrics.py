"""Ranking and accuracy metrics with fake as the positive class."""

from __future__ import annotations

import numpy as np

from .errors import MetricUndefined


def average_precision(scores, labels) -> float:
    """Stepwise (non-interpolated) area under the precision-recall curve.

    Scores are per-image fake scores; labels are 1 (fake) or 0 (real). Tied
    scores are grouped at a single threshold: AP = sum_k (R_k - R_{k-1}) P_k
    over distinct thresholds in descending score order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricUndefined("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("average precision needs both a positive and a negative")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]

    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += int((y[i:j] == 1).sum())
        fp += (j - i) - int((y[i:j] == 1).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return ap
