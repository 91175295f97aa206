"""Naive reference implementations used as oracles by the test suite.

Everything here is written as plain double loops over points with scalar
arithmetic, independent of the library's vectorized code paths. Sums use
math.fsum (correctly rounded, order-independent) and transcendentals use
numpy's scalar kernels so results are comparable bit for bit.
"""

import math

import numpy as np


def sq_dist(a, b):
    s = 0.0
    for c in range(len(a)):
        d = a[c] - b[c]
        s += d * d
    return s


def naive_rho(z, dc):
    n = len(z)
    rho = np.empty(n)
    for i in range(n):
        terms = [np.exp(-sq_dist(z[i], z[j]) / (dc * dc)) for j in range(n)]
        rho[i] = math.fsum(terms)
    return rho


def naive_delta(z, rho):
    n = len(z)
    delta = np.empty(n)
    for i in range(n):
        best = None
        for j in range(n):
            denser = rho[j] > rho[i] or (rho[j] == rho[i] and j < i)
            if denser:
                d = np.sqrt(sq_dist(z[i], z[j]))
                if best is None or d < best:
                    best = d
        if best is None:
            best = 0.0
            for j in range(n):
                d = np.sqrt(sq_dist(z[i], z[j]))
                if d > best:
                    best = d
        delta[i] = best
    return delta


def naive_centers(rho, delta, z, k_clusters):
    n = len(rho)
    gamma = [rho[i] * delta[i] for i in range(n)]
    order = sorted(range(n), key=lambda i: (-gamma[i], -rho[i], i))
    chosen = order[:k_clusters]
    return np.array([z[i] for i in chosen]), np.array(chosen)


def naive_knn(z, k):
    n = len(z)
    out = np.empty((n, k), dtype=np.intp)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (sq_dist(z[i], z[j]), j))
        out[i] = others[:k]
    return out


def naive_theta(z, knn, floor=1e-12):
    n, k = knn.shape
    theta = np.empty((n, k))
    for i in range(n):
        inv = [1.0 / max(sq_dist(z[s], z[i]), floor) for s in knn[i]]
        total = math.fsum(inv)
        for s in range(k):
            theta[i, s] = inv[s] / total
    return theta


def naive_q(z, centers, knn, theta):
    n = len(z)
    kc = len(centers)
    q = np.empty((n, kc))
    for i in range(n):
        nums = []
        for t in range(kc):
            terms = [
                theta[i, s] * (1.0 / (1.0 + sq_dist(z[knn[i, s]], centers[t])))
                for s in range(knn.shape[1])
            ]
            nums.append(math.fsum(terms))
        denom = math.fsum(nums)
        for t in range(kc):
            q[i, t] = nums[t] / denom
    return q


def naive_conditional_row(sq_dists, sigma):
    """Gaussian conditional probabilities over one row of squared distances."""
    e = [np.exp(-d / (2.0 * sigma * sigma)) for d in sq_dists]
    total = math.fsum(e)
    return np.array([v / total for v in e])


def row_perplexity(sq_dists, sigma):
    p = naive_conditional_row(sq_dists, sigma)
    h = -math.fsum(v * math.log2(v) for v in p if v > 0)
    return 2.0 ** h


def grid_scan_sigma(sq_dists, perplexity, lo=1e-4, hi=1e4, steps=4000):
    """Best sigma on a fine logarithmic grid (independent of binary search)."""
    grid = np.exp(np.linspace(math.log(lo), math.log(hi), steps))
    errs = [abs(row_perplexity(sq_dists, s) - perplexity) for s in grid]
    return float(grid[int(np.argmin(errs))])


def naive_phi(z, sigmas):
    """Symmetrized joint probabilities from per-point Gaussian conditionals.

    Matches the library's convention: each row of squared distances is
    divided by its off-diagonal mean before the kernel (the widths are
    relative to that row scale).
    """
    n = len(z)
    cond = np.zeros((n, n))
    for i in range(n):
        row = [sq_dist(z[i], z[j]) for j in range(n)]
        scale = max(math.fsum(row[j] for j in range(n) if j != i) / (n - 1),
                    1e-12)
        e = []
        for j in range(n):
            if j == i:
                e.append(0.0)
            else:
                e.append(np.exp(-(row[j] / scale) / (2.0 * sigmas[i] ** 2)))
        total = math.fsum(e)
        for j in range(n):
            cond[i, j] = e[j] / total
    phi = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            phi[i, j] = (cond[i, j] + cond[j, i]) / (2.0 * n)
    return phi


def naive_omega(z):
    """Student-t joint probabilities in the low-dimensional space."""
    n = len(z)
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                a[i, j] = 1.0 / (1.0 + sq_dist(z[i], z[j]))
    total = math.fsum(a[i, j] for i in range(n) for j in range(n))
    return a / total


def naive_kl(p, q, floor=1e-12):
    total = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            if p[i, j] > 0:
                total += p[i, j] * (
                    math.log(max(p[i, j], floor)) - math.log(max(q[i, j], floor)))
    return total


def naive_target(q):
    n, kc = q.shape
    f = [math.fsum(q[i, t] for i in range(n)) for t in range(kc)]
    p = np.empty((n, kc))
    for i in range(n):
        w = [q[i, t] ** 2 / f[t] for t in range(kc)]
        s = math.fsum(w)
        for t in range(kc):
            p[i, t] = w[t] / s
    return p
