"""Training objectives: reconstruction, dimension-reduction KL with per-point
Gaussian width search, clustering KL with its sharpened target distribution,
and the weighted combination of the three.

The loss builders accept Tensors or arrays and compose diffcore ops, so one
implementation serves both plain evaluation and gradient computation. The
Gaussian widths (sigmas) come from a binary search on values and are treated
as locally constant by the gradients, as in classic t-SNE practice.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_FLOOR = 1e-12
SIGMA_SEARCH_TOL = 1e-5


def reconstruction_loss(batch, reconstructed) -> Tensor:
    """Mean over the batch of the squared L2 distance over all pixels."""
    batch = dc.as_tensor(batch)
    reconstructed = dc.as_tensor(reconstructed)
    if batch.shape != reconstructed.shape:
        raise dc.ShapeError(
            f"reconstruction_loss: shapes differ, {batch.shape} vs "
            f"{reconstructed.shape}")
    n = batch.shape[0]
    if n < 1:
        raise ValueError("reconstruction_loss: empty batch")
    diff = dc.subtract(batch, reconstructed)
    return dc.scale(dc.tensor_sum(dc.square(diff)), 1.0 / n)


def default_perplexity(n: int) -> float:
    """Batch-guarded t-SNE style default."""
    return min(30.0, (n - 1) / 3.0)


def _row_perplexity(sq_dists: np.ndarray, sigma: float) -> float:
    logits = -sq_dists / (2.0 * sigma * sigma)
    logits = logits - logits.max()
    e = np.exp(logits)
    p = e / e.sum()
    h = -np.sum(p[p > 0] * np.log2(p[p > 0]))
    return float(2.0 ** h)


def sigma_search(sq_distances, perplexity: float,
                 tol: float = SIGMA_SEARCH_TOL, max_iter: int = 200) -> float:
    """Gaussian width whose conditional row hits the target perplexity.

    Binary search on sigma; the effective neighbor count 2^H(row) is monotone
    in sigma. Falls back to sigma = 1 with a warning when no width can attain
    the target (all-zero distance rows).
    """
    d2 = np.asarray(sq_distances, dtype=np.float64)
    n = d2.size + 1
    if not perplexity < n:
        raise ValueError(
            f"sigma_search: perplexity {perplexity} must be below n={n}")
    if np.any(d2 < 0):
        raise ValueError("sigma_search: negative squared distance")
    if np.all(d2 == 0.0):
        warnings.warn("sigma_search: all distances zero, falling back to sigma = 1")
        return 1.0
    scale = math.sqrt(float(np.mean(d2[d2 > 0])))
    lo, hi = scale * 1e-8, scale * 1e8
    sigma = scale
    for _ in range(max_iter):
        sigma = 0.5 * (lo + hi)
        perp = _row_perplexity(d2, sigma)
        if abs(perp - perplexity) <= tol:
            return sigma
        if perp > perplexity:
            hi = sigma
        else:
            lo = sigma
    if abs(_row_perplexity(d2, sigma) - perplexity) > max(tol, 1e-3):
        warnings.warn(
            f"sigma_search: did not reach perplexity {perplexity} "
            f"(got {_row_perplexity(d2, sigma):.6f})")
    return sigma


def search_sigmas(sq_dist_matrix: np.ndarray, perplexity: float,
                  tol: float = SIGMA_SEARCH_TOL, max_iter: int = 200) -> np.ndarray:
    """All rows' width searches bisected in parallel.

    Same bracket-and-bisect scheme as ``sigma_search``, vectorized over the
    rows of an (n, n) squared-distance matrix (diagonals ignored). Rows whose
    distances are all zero fall back to sigma = 1 with a warning.
    """
    d2 = np.asarray(sq_dist_matrix, dtype=np.float64)
    n = d2.shape[0]
    if not perplexity < n:
        raise ValueError(
            f"search_sigmas: perplexity {perplexity} must be below n={n}")
    offdiag = ~np.eye(n, dtype=bool)
    rows = d2[offdiag].reshape(n, n - 1)
    degenerate = np.all(rows == 0.0, axis=1)
    if degenerate.any():
        warnings.warn("search_sigmas: all-zero distance rows, using sigma = 1")
        rows = rows.copy()
        rows[degenerate] = 1.0  # placeholder; overwritten below

    scale = np.sqrt(np.array([
        row[row > 0].mean() if np.any(row > 0) else 1.0 for row in rows]))
    lo = scale * 1e-8
    hi = scale * 1e8
    sigma = scale.copy()
    target = perplexity
    for _ in range(max_iter):
        sigma = 0.5 * (lo + hi)
        logits = -rows / (2.0 * sigma * sigma)[:, None]
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log2(p), 0.0)
        perp = 2.0 ** (-plogp.sum(axis=1))
        err = perp - target
        if np.all(np.abs(err) <= tol):
            break
        too_high = err > 0
        hi = np.where(too_high, sigma, hi)
        lo = np.where(too_high, lo, sigma)
    sigma[degenerate] = 1.0
    return sigma


def _pairwise_sq_dist_tensor(z: Tensor) -> Tensor:
    n, d = z.shape
    left = dc.reshape(z, (n, 1, d))
    right = dc.reshape(z, (1, n, d))
    return dc.tensor_sum(dc.square(dc.subtract(left, right)), axis=2)


def _offdiag_mask(n: int) -> Tensor:
    return dc.constant(1.0 - np.eye(n))


def high_affinities(z_w, perplexity: float, sigmas=None):
    """Symmetrized Gaussian joint probabilities over the feature space.

    Returns (Phi, sigmas). When ``sigmas`` is omitted each row's width is
    found on the current values; pass explicit widths to hold them fixed
    (e.g. for finite-difference comparisons).

    Squared distances are divided by their per-row mean (differentiably)
    before the kernel. The widths re-calibrate away any such factor, so the
    probabilities are unchanged, but the gradient loses the spurious mode
    where inflating the feature scale "sharpens" rows past their frozen
    widths; unchecked, that mode ratchets the encoder scale without bound.
    """
    z_w = dc.as_tensor(z_w)
    n = z_w.shape[0]
    if n < 2:
        raise ValueError(f"high_affinities: need at least 2 points, got {n}")
    d2 = _pairwise_sq_dist_tensor(z_w)
    mask = _offdiag_mask(n)
    row_scale = dc.scale(
        dc.tensor_sum(dc.multiply(d2, mask), axis=1, keepdims=True),
        1.0 / (n - 1))
    u2 = dc.divide(d2, dc.clamp_min(row_scale, PROB_FLOOR))
    u2_values = u2.values
    offdiag = ~np.eye(n, dtype=bool)
    if sigmas is None:
        sigmas = search_sigmas(u2_values, perplexity)
    else:
        sigmas = np.asarray(sigmas, dtype=np.float64)
    # Row-min shift inside the exponential; cancels in the ratio. The mask
    # zeroes the diagonal exponent too, whose shifted value would be a large
    # positive number once sigma gets small.
    row_min = np.where(
        offdiag, u2_values, np.inf).min(axis=1, keepdims=True)
    shift = dc.constant(row_min)
    denom = dc.constant((2.0 * sigmas * sigmas)[:, None])
    exponent = dc.multiply(dc.divide(dc.subtract(shift, u2), denom), mask)
    kernel = dc.multiply(dc.exp(exponent), mask)
    row_sums = dc.tensor_sum(kernel, axis=1, keepdims=True)
    conditional = dc.divide(kernel, row_sums)
    phi = dc.scale(dc.add(conditional, dc.transpose(conditional)), 1.0 / (2.0 * n))
    return phi, sigmas


def low_affinities(z_v) -> Tensor:
    """Student-t joint probabilities over the clustering space."""
    z_v = dc.as_tensor(z_v)
    n = z_v.shape[0]
    if n < 2:
        raise ValueError(f"low_affinities: need at least 2 points, got {n}")
    d2 = _pairwise_sq_dist_tensor(z_v)
    affinity = dc.divide(dc.constant(1.0), dc.add(d2, dc.constant(1.0)))
    affinity = dc.multiply(affinity, _offdiag_mask(n))
    total = dc.tensor_sum(affinity)
    return dc.divide(affinity, total)


def _kl(p, q, name: str) -> Tensor:
    p = dc.as_tensor(p)
    q = dc.as_tensor(q)
    if p.shape != q.shape:
        raise dc.ShapeError(f"{name}: shapes differ, {p.shape} vs {q.shape}")
    if np.any((p.values > 0) & (q.values == 0.0)):
        raise dc.DomainError(
            f"{name}: zero probability where the target is positive")
    log_ratio = dc.subtract(dc.log(dc.clamp_min(p, PROB_FLOOR)),
                            dc.log(dc.clamp_min(q, PROB_FLOOR)))
    return dc.tensor_sum(dc.multiply(p, log_ratio))


def dim_loss(phi, omega) -> Tensor:
    """KL divergence between the high- and low-space joint probabilities."""
    return _kl(phi, omega, "dim_loss")


def clustering_loss(p, q) -> Tensor:
    """KL divergence between the target distribution and the assignments."""
    return _kl(p, q, "clustering_loss")


def target_distribution(q) -> np.ndarray:
    """Sharpened, frequency-normalized targets: p ~ q^2 / cluster mass."""
    q = np.asarray(q, dtype=np.float64)
    f = q.sum(axis=0)
    if np.any(f == 0.0):
        raise ValueError(
            f"target_distribution: empty soft cluster(s) {np.where(f == 0)[0].tolist()}")
    w = q * q / f
    return w / w.sum(axis=1, keepdims=True)


@dataclass
class LossBundle:
    """The loss terms of one update plus their weighted combinations."""

    l_rec: object
    l_dim: object
    l_clu: object
    l_stru: object
    l_total: object
    alpha: float
    beta: float

    def floats(self) -> dict:
        def to_float(x):
            return float(x.values) if isinstance(x, Tensor) else float(x)
        return {
            "l_rec": to_float(self.l_rec),
            "l_dim": to_float(self.l_dim),
            "l_clu": to_float(self.l_clu),
            "l_stru": to_float(self.l_stru),
            "l_total": to_float(self.l_total),
        }


def combine(l_rec, l_dim, l_clu, alpha: float, beta: float) -> LossBundle:
    """Structure loss = rec + beta * dim; total = structure + alpha * clu."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"combine: weights must be nonnegative, got {alpha}, {beta}")
    tensors = any(isinstance(x, Tensor) for x in (l_rec, l_dim, l_clu))
    if tensors:
        l_rec = dc.as_tensor(l_rec)
        l_dim = dc.as_tensor(l_dim)
        l_clu = dc.as_tensor(l_clu)
        l_stru = dc.add(l_rec, dc.scale(l_dim, beta))
        l_total = dc.add(l_stru, dc.scale(l_clu, alpha))
    else:
        l_stru = l_rec + beta * l_dim
        l_total = l_stru + alpha * l_clu
    return LossBundle(l_rec, l_dim, l_clu, l_stru, l_total, alpha, beta)


def neighborhood_assignments(z, centers, knn) -> Tensor:
    """Differentiable neighbor-weighted Student-t assignment for a batch.

    ``centers`` and ``knn`` are fixed (numpy); influence weights and the
    membership probabilities are built on the tape from ``z``. Matches
    cluster_head.neighbor_weights + cluster_head.soft_assign numerically.
    """
    z = dc.as_tensor(z)
    knn = np.asarray(knn, dtype=np.intp)
    centers = np.asarray(centers, dtype=np.float64)
    n, dim = z.shape
    k = knn.shape[1]
    k_clusters = centers.shape[0]
    neighbors = dc.reshape(dc.take_rows(z, knn.ravel()), (n, k, dim))
    own = dc.reshape(z, (n, 1, dim))
    nd2 = dc.tensor_sum(dc.square(dc.subtract(neighbors, own)), axis=2)
    inv = dc.divide(dc.constant(1.0), dc.clamp_min(nd2, 1e-12))
    theta = dc.divide(inv, dc.tensor_sum(inv, axis=1, keepdims=True))
    spread = dc.reshape(neighbors, (n, k, 1, dim))
    cd2 = dc.tensor_sum(
        dc.square(dc.subtract(spread, dc.constant(centers.reshape(1, 1, k_clusters, dim)))),
        axis=3)
    affinity = dc.divide(dc.constant(1.0), dc.add(cd2, dc.constant(1.0)))
    weighted = dc.multiply(dc.reshape(theta, (n, k, 1)), affinity)
    numerators = dc.tensor_sum(weighted, axis=1)
    return dc.divide(numerators, dc.tensor_sum(numerators, axis=1, keepdims=True))
