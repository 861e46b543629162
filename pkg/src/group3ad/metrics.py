"""Object- and point-level AUROC / AUPR."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import NoPositives, OneClassOnly, PreconditionError


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise PreconditionError(f"{len(s)} scores vs {len(y)} labels")
    if not np.isfinite(s).all():
        raise PreconditionError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise PreconditionError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied scores count one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision, sum_k (R_k - R_{k-1}) P_k over distinct score thresholds."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUPR needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last position of each run of equal scores is where that threshold closes
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[ends].astype(np.float64)
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def evaluate(object_scores, object_labels, point_scores, point_labels) -> dict:
    """All four metrics; point arrays are concatenated over clouds by the caller."""
    return {
        "O-AUROC": auroc(object_scores, object_labels),
        "O-AUPR": aupr(object_scores, object_labels),
        "P-AUROC": auroc(point_scores, point_labels),
        "P-AUPR": aupr(point_scores, point_labels),
    }
