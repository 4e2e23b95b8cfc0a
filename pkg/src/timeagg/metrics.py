"""auROC, DeLong confidence intervals, and the relative-difference statistic."""

from __future__ import annotations

import numpy as np
from scipy.stats import norm, rankdata


def _split_scores(scores, labels, min_per_class=1):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) < min_per_class or len(neg) < min_per_class:
        raise ValueError(f"need at least {min_per_class} sample(s) of each class "
                         f"(got {len(pos)} positive, {len(neg)} negative)")
    return pos, neg


def auroc(scores, labels):
    """Mann-Whitney AUC with half credit for ties, via midranks."""
    pos, neg = _split_scores(scores, labels)
    m, n = len(pos), len(neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))


def delong_components(scores, labels):
    """AUC and the structural components (V10 over positives, V01 over negatives)."""
    pos, neg = _split_scores(scores, labels)
    m, n = len(pos), len(neg)
    all_ranks = rankdata(np.concatenate([pos, neg]))
    pos_ranks, neg_ranks = rankdata(pos), rankdata(neg)
    # V10_i = fraction of negatives beaten by positive i (ties count half)
    v10 = (all_ranks[:m] - pos_ranks) / n
    # V01_j = fraction of positives beating negative j
    v01 = 1.0 - (all_ranks[m:] - neg_ranks) / m
    auc = float(v10.mean())
    return auc, v10, v01


def delong_variance(scores, labels):
    auc, v10, v01 = delong_components(scores, labels)
    if len(v10) < 2 or len(v01) < 2:
        raise ValueError("DeLong variance needs at least 2 samples per class")
    return auc, float(np.var(v10, ddof=1) / len(v10) + np.var(v01, ddof=1) / len(v01))


def delong_ci(scores, labels, alpha=0.05):
    """``(auc, lo, hi)``: normal-approximation CI, clipped to [0, 1]."""
    _split_scores(scores, labels, min_per_class=2)
    auc, var = delong_variance(scores, labels)
    half = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(max(var, 0.0))
    return auc, max(0.0, auc - half), min(1.0, auc + half)


def relative_difference(permuted_mean, original):
    if original == 0:
        raise ValueError("relative difference undefined for an original score of 0")
    return (permuted_mean - original) / original


def format_ci(auc, lo, hi):
    """Table-style rendering, e.g. ``0.845 [0.753, 0.914]``."""
    return f"{auc:.3f} [{lo:.3f}, {hi:.3f}]"
