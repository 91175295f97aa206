"""Clustering evaluation: accuracy under optimal label matching, and NMI."""

from __future__ import annotations

import math

import numpy as np


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect matching on a square cost matrix.

    Returns ``assign`` with ``assign[i]`` the column matched to row i, so that
    ``sum(cost[i, assign[i]])`` is minimal. Shortest-augmenting-path variant
    with row/column potentials; handles negative entries. O(n^3).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"hungarian: cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: cost matrix must be finite")
    n = cost.shape[0]
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)   # match[j] = row (1-based) assigned to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    assign = np.zeros(n, dtype=np.intp)
    for j in range(1, n + 1):
        if match[j]:
            assign[match[j] - 1] = j - 1
    return assign


def _compact(labels):
    labels = np.asarray(labels)
    values, compact = np.unique(labels, return_inverse=True)
    return compact, len(values)


def contingency(predicted, truth) -> np.ndarray:
    """Count matrix W[a, b] = #{i : predicted_i = a, truth_i = b}."""
    p, kp = _compact(predicted)
    t, kt = _compact(truth)
    w = np.zeros((kp, kt), dtype=np.int64)
    np.add.at(w, (p, t), 1)
    return w


def accuracy(predicted, truth) -> float:
    """Fraction correct under the best one-to-one cluster-to-class mapping."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"accuracy: length mismatch {predicted.shape} vs {truth.shape}")
    n = predicted.size
    w = contingency(predicted, truth).astype(np.float64)
    # Pad to square with zeros so cluster counts may differ.
    k = max(w.shape)
    padded = np.zeros((k, k))
    padded[: w.shape[0], : w.shape[1]] = w
    assign = hungarian(-padded)
    matched = sum(padded[i, assign[i]] for i in range(k))
    return matched / n


def nmi(predicted, truth) -> float:
    """Mutual information normalized by the larger marginal entropy."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(
            f"nmi: length mismatch {predicted.shape} vs {truth.shape}")
    n = predicted.size
    w = contingency(predicted, truth).astype(np.float64)
    pj = w.sum(axis=1) / n
    qj = w.sum(axis=0) / n
    hp = -sum(p * math.log(p) for p in pj if p > 0)
    hq = -sum(q * math.log(q) for q in qj if q > 0)
    denom = max(hp, hq)
    if denom == 0.0:
        # Both partitions are a single block; identical by construction.
        return 1.0 if len(pj) == len(qj) else 0.0
    mi = 0.0
    for a in range(w.shape[0]):
        for b in range(w.shape[1]):
            if w[a, b] > 0:
                pab = w[a, b] / n
                mi += pab * math.log(pab / (pj[a] * qj[b]))
    return min(1.0, max(0.0, mi / denom))
