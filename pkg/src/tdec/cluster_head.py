"""Distribution-informed assignment in the clustering space.

Gaussian-kernel densities, density-peak center selection, kNN influence
weights, and neighbor-weighted Student-t soft assignment. Everything here is
plain numpy on values; the differentiable batch-loss counterpart lives in
``losses``.

Reductions whose float result depends on summation order (densities, weight
normalizations, assignment sums) go through ``math.fsum``, which returns the
correctly rounded sum regardless of order. That makes results reproducible
and directly comparable against naive double-loop references.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

DUPLICATE_FLOOR = 1e-12


def pairwise_sq_dists(z) -> np.ndarray:
    """All-pairs squared Euclidean distances, accumulated per coordinate."""
    z = np.asarray(z, dtype=np.float64)
    n, dim = z.shape
    d2 = np.zeros((n, n))
    for c in range(dim):
        diff = z[:, c][:, None] - z[:, c][None, :]
        d2 += diff * diff
    return d2


def bandwidth_dc(z, neighbor_fraction: float = 0.02) -> float:
    """Kernel bandwidth: the nearest-rank quantile of pairwise distances.

    Targets an average neighbor count of ``neighbor_fraction`` of the points.
    Falls back to the smallest nonzero distance when the quantile lands on a
    duplicate pair, and to 1.0 when every pair coincides.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ValueError(f"bandwidth_dc: need at least 2 points, got {n}")
    if not 0.0 < neighbor_fraction < 1.0:
        raise ValueError(
            f"bandwidth_dc: neighbor_fraction must be in (0, 1), got {neighbor_fraction}")
    d2 = pairwise_sq_dists(z)
    iu = np.triu_indices(n, k=1)
    dists = np.sort(np.sqrt(d2[iu]))
    rank = max(1, math.ceil(neighbor_fraction * dists.size))
    dc = dists[rank - 1]
    if dc == 0.0:
        nonzero = dists[dists > 0.0]
        if nonzero.size == 0:
            warnings.warn("bandwidth_dc: all points coincide, using dc = 1")
            return 1.0
        dc = nonzero[0]
    return float(dc)


def densities(z, dc: float) -> np.ndarray:
    """Gaussian kernel density per point; the self term contributes 1."""
    if dc <= 0:
        raise ValueError(f"densities: dc must be positive, got {dc}")
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    kernel = np.exp(-pairwise_sq_dists(z) / (dc * dc))
    return np.array([math.fsum(kernel[i]) for i in range(n)])


def min_dist_delta(z, rho) -> np.ndarray:
    """Distance to the nearest strictly-denser point.

    Density ties are broken by index (lower index counts as denser), so
    exactly one point, the global maximum, has no denser point; it gets the
    maximum distance to any point instead.
    """
    z = np.asarray(z, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    n = z.shape[0]
    if n == 1:
        return np.zeros(1)
    dist = np.sqrt(pairwise_sq_dists(z))
    idx = np.arange(n)
    delta = np.empty(n)
    for i in range(n):
        denser = (rho > rho[i]) | ((rho == rho[i]) & (idx < i))
        if denser.any():
            delta[i] = dist[i][denser].min()
        else:
            delta[i] = dist[i].max()
    return delta


def select_centers(rho, delta, z, k_clusters: int):
    """Pick the K points with the largest decision value gamma = rho * delta.

    Ties break by higher density, then lower index. Returns (coords, indices)
    with rows ordered by decreasing gamma.
    """
    rho = np.asarray(rho, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = rho.shape[0]
    if not 1 <= k_clusters <= n:
        raise ValueError(
            f"select_centers: need 1 <= K <= {n} points, got K={k_clusters}")
    gamma = rho * delta
    order = np.lexsort((np.arange(n), -rho, -gamma))
    chosen = order[:k_clusters]
    return z[chosen].copy(), chosen.copy()


def knn_indices(z, k: int) -> np.ndarray:
    """The k nearest points to each point (itself excluded), nearest first.

    Distance ties break by lower index.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if k < 1:
        raise ValueError(f"knn_indices: k must be >= 1, got {k}")
    if k >= n:
        raise ValueError(
            f"knn_indices: k={k} needs at least k+1 points but only {n} "
            f"given; lower k to at most {n - 1}")
    d2 = pairwise_sq_dists(z)
    np.fill_diagonal(d2, np.inf)
    idx = np.arange(n)
    out = np.empty((n, k), dtype=np.intp)
    for i in range(n):
        order = np.lexsort((idx, d2[i]))
        out[i] = order[:k]
    return out


def self_neighborhoods(n: int):
    """Degenerate neighbor structure: each point is its own sole neighbor.

    This is the k = 0 sweep setting; soft assignment then reduces to the
    plain one-to-one Student-t distance to each center.
    """
    knn = np.arange(n, dtype=np.intp).reshape(n, 1)
    theta = np.ones((n, 1))
    return knn, theta


def neighbor_weights(z, knn) -> np.ndarray:
    """Influence of each neighbor: normalized inverse squared distance.

    Squared distances are floored at 1e-12 before inversion so an exact
    duplicate neighbor dominates its row, which is the intended limit.
    """
    z = np.asarray(z, dtype=np.float64)
    knn = np.asarray(knn, dtype=np.intp)
    n, k = knn.shape
    theta = np.empty((n, k))
    for i in range(n):
        diff = z[knn[i]] - z[i]
        d2 = np.zeros(k)
        for c in range(z.shape[1]):
            d2 += diff[:, c] * diff[:, c]
        inv = 1.0 / np.maximum(d2, DUPLICATE_FLOOR)
        theta[i] = inv / math.fsum(inv)
    return theta


def soft_assign(z, centers, knn, theta) -> np.ndarray:
    """Neighbor-weighted Student-t membership probabilities, rows sum to 1."""
    z = np.asarray(z, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    knn = np.asarray(knn, dtype=np.intp)
    theta = np.asarray(theta, dtype=np.float64)
    n = z.shape[0]
    k_clusters = centers.shape[0]
    if k_clusters < 1:
        raise ValueError("soft_assign: need at least one center")
    cd2 = np.zeros((n, k_clusters))
    for c in range(z.shape[1]):
        diff = z[:, c][:, None] - centers[:, c][None, :]
        cd2 += diff * diff
    affinity = 1.0 / (1.0 + cd2)
    q = np.empty((n, k_clusters))
    for i in range(n):
        weighted = theta[i][:, None] * affinity[knn[i]]
        row = np.array([math.fsum(weighted[:, t]) for t in range(k_clusters)])
        q[i] = row / math.fsum(row)
    return q


def hard_labels(q) -> np.ndarray:
    """Argmax cluster per row; ties go to the lowest cluster id."""
    return np.argmax(np.asarray(q), axis=1)
