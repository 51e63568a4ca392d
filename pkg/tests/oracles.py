"""Brute-force reference implementations used to check the fast paths.

Everything here is deliberately naive: exhaustive path enumeration, triple
loops, full set-partition searches, and dense-matrix likelihood evaluation.
None of it shares code with the package internals it validates.
"""

from __future__ import annotations

from itertools import permutations

import numpy as np


def brute_degree(w: np.ndarray, i: int) -> float:
    total = 0.0
    for j in range(w.shape[0]):
        total += w[i, j]
    return total


def brute_clustering(w: np.ndarray, i: int) -> float:
    n = w.shape[0]
    wmax = w.max()
    if wmax <= 0:
        return 0.0
    kbin = sum(1 for j in range(n) if w[i, j] > 0)
    if kbin < 2:
        return 0.0
    total = 0.0
    for j in range(n):
        for h in range(n):
            if j == i or h == i or j == h:
                continue
            total += ((w[i, j] / wmax) * (w[i, h] / wmax) * (w[j, h] / wmax)) ** (1.0 / 3.0)
    return total / (kbin * (kbin - 1))


def brute_path_lengths(w: np.ndarray) -> np.ndarray:
    """All-pairs shortest lengths (1/weight edges) by enumerating all simple
    paths; only sensible for very small graphs."""
    n = w.shape[0]
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    nodes = list(range(n))
    for src in nodes:
        for dst in nodes:
            if src == dst:
                continue
            best = np.inf
            others = [v for v in nodes if v not in (src, dst)]
            for r in range(len(others) + 1):
                for mid in permutations(others, r):
                    path = (src, *mid, dst)
                    length = 0.0
                    ok = True
                    for a, b in zip(path[:-1], path[1:]):
                        if w[a, b] <= 0:
                            ok = False
                            break
                        length += 1.0 / w[a, b]
                    if ok:
                        best = min(best, length)
            d[src, dst] = best
    return d


def brute_efficiency(w: np.ndarray, i: int, d: np.ndarray | None = None) -> float:
    n = w.shape[0]
    if n < 2:
        return 0.0
    d = brute_path_lengths(w) if d is None else d
    total = 0.0
    for j in range(n):
        if j != i and np.isfinite(d[i, j]) and d[i, j] > 0:
            total += 1.0 / d[i, j]
    return total / (n - 1)


def brute_leverage(w: np.ndarray, i: int, binary: bool = False) -> float:
    n = w.shape[0]
    nbrs = [j for j in range(n) if w[i, j] > 0]
    if not nbrs:
        return np.nan
    if binary:
        deg = lambda v: float(sum(1 for j in range(n) if w[v, j] > 0))
    else:
        deg = lambda v: float(w[v].sum())
    ki = deg(i)
    return sum((ki - deg(j)) / (ki + deg(j)) for j in nbrs) / len(nbrs)


def brute_modularity(w: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    two_m = w.sum()
    k = w.sum(axis=1)
    q = 0.0
    for c in set(labels.tolist()):
        members = [i for i in range(len(labels)) if labels[i] == c]
        s_in = sum(w[i, j] for i in members for j in members)
        s_tot = sum(k[i] for i in members)
        q += s_in / two_m - (s_tot / two_m) ** 2
    return q


def set_partitions(items):
    """All partitions of a list (restricted-growth enumeration)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for sub in set_partitions(rest):
        for i, block in enumerate(sub):
            yield sub[:i] + [[first] + block] + sub[i + 1:]
        yield [[first]] + sub


def best_partition_modularity(w: np.ndarray):
    """Exhaustive max-modularity partition for tiny graphs."""
    n = w.shape[0]
    best_q, best_labels = -np.inf, None
    for part in set_partitions(range(n)):
        labels = np.empty(n, dtype=int)
        for c, block in enumerate(part):
            for v in block:
                labels[v] = c
        q = brute_modularity(w, labels)
        if q > best_q:
            best_q, best_labels = q, labels
    return best_q, best_labels


def random_weighted_graph(rng, n: int, density: float = 0.7) -> np.ndarray:
    """Random symmetric weighted graph with weights in (0, 1)."""
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() < density:
                w[i, j] = w[j, i] = rng.uniform(0.05, 0.95)
    return w


def dense_reml_objective(theta, X, Z, y, subject_index, vc_map, weights=None) -> float:
    """-2 restricted log-likelihood via explicit N x N covariance matrices."""
    q = Z.shape[1]
    n_params = int(vc_map.max()) + 1 if q else 0
    tau = np.exp(np.asarray(theta[:n_params], dtype=float))
    sigma2 = float(np.exp(theta[n_params]))
    N, p = X.shape
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
    V = np.zeros((N, N))
    for s in np.unique(subject_index):
        idx = np.flatnonzero(subject_index == s)
        Zi = Z[idx]
        V[np.ix_(idx, idx)] = Zi @ np.diag(tau[vc_map]) @ Zi.T if q else 0.0
    V += np.diag(sigma2 / w)
    Vinv = np.linalg.inv(V)
    H = X.T @ Vinv @ X
    beta = np.linalg.solve(H, X.T @ Vinv @ y)
    r = y - X @ beta
    return float(
        (N - p) * np.log(2 * np.pi)
        + np.linalg.slogdet(V)[1]
        + np.linalg.slogdet(H)[1]
        + r @ Vinv @ r
    )


def irls_logistic(X: np.ndarray, y: np.ndarray, tol: float = 1e-12,
                  max_iter: int = 100) -> np.ndarray:
    """Plain iteratively reweighted least squares logistic regression."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(X @ beta)))
        w = p * (1 - p)
        z = X @ beta + (y - p) / w
        Xw = X * w[:, None]
        new = np.linalg.solve(Xw.T @ X, Xw.T @ z)
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta
