"""Weighted nodal and whole-network graph metrics.

Metric conventions for weighted graphs follow the standard weighted variants
used in brain-network toolboxes: geometric-mean triangle clustering with
max-normalized weights, inverse-weight edge lengths for path-based measures,
strength (sum of weights) for degree, Newman weighted modularity optimized by
a deterministic Louvain pass, and leverage centrality generalized with
weighted degree (a binary-degree switch is provided).

All functions are pure; a Louvain seed fixes the node visit order so results
are bitwise reproducible regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .netdata import DataError, SubjectNetwork

_GAIN_TOL = 1e-12


@dataclass(frozen=True)
class NodalMetrics:
    """Per-node metric vectors; leverage is NaN for isolated nodes."""

    clustering: np.ndarray
    efficiency: np.ndarray
    degree: np.ndarray
    leverage: np.ndarray


@dataclass(frozen=True)
class NetworkMetrics:
    """Whole-network summaries (Louvain partition attached for modularity)."""

    clustering: float
    efficiency: float
    path_length: float
    degree: float
    leverage: float
    modularity: float
    partition: np.ndarray
    infinite_path_pairs: int


def _weights_of(net) -> np.ndarray:
    if isinstance(net, SubjectNetwork):
        return net.weights
    return np.asarray(net, dtype=float)


def weighted_degree(net, node: int) -> float:
    """Strength of a node: sum of its incident edge weights."""
    w = _weights_of(net)
    return float(w[node].sum())


def weighted_degrees(net) -> np.ndarray:
    return _weights_of(net).sum(axis=1)


def weighted_clustering(net, node: int) -> float:
    """Geometric-mean triangle clustering with max-normalized weights.

    Zero by convention when the node has fewer than two neighbors.
    """
    return float(weighted_clusterings(net)[node])


def weighted_clusterings(net) -> np.ndarray:
    w = _weights_of(net)
    n = w.shape[0]
    wmax = w.max()
    if wmax <= 0:
        return np.zeros(n)
    what = w / wmax
    cube = np.cbrt(what)
    # t[i] = sum over ordered neighbor pairs (j,h) of (w_ij w_ih w_jh)^(1/3);
    # degenerate j==h terms vanish through the zero diagonal
    t = np.einsum("ij,ih,jh->i", cube, cube, cube)
    kbin = (w > 0).sum(axis=1)
    denom = kbin * (kbin - 1)
    out = np.zeros(n)
    ok = denom > 0
    out[ok] = t[ok] / denom[ok]
    return out


def shortest_path_lengths(net) -> np.ndarray:
    """All-pairs weighted shortest path lengths; edge length is 1/weight.

    Unreachable pairs come back as ``inf``.
    """
    w = _weights_of(net)
    n = w.shape[0]
    lengths = np.zeros_like(w)
    nz = w > 0
    lengths[nz] = 1.0 / w[nz]
    graph = csr_matrix(lengths)
    d = dijkstra(graph, directed=False)
    np.fill_diagonal(d, 0.0)
    return d


def nodal_efficiency(net, node: int, path_lengths: np.ndarray | None = None) -> float:
    """Mean inverse shortest-path length from a node to all others."""
    return float(nodal_efficiencies(net, path_lengths)[node])


def nodal_efficiencies(net, path_lengths: np.ndarray | None = None) -> np.ndarray:
    d = shortest_path_lengths(net) if path_lengths is None else path_lengths
    n = d.shape[0]
    if n < 2:
        return np.zeros(n)
    with np.errstate(divide="ignore"):
        inv = np.where(np.isfinite(d) & (d > 0), 1.0 / d, 0.0)
    return inv.sum(axis=1) / (n - 1)


def leverage_centrality(net, node: int, degree: str = "weighted") -> float:
    """Average normalized degree advantage of a node over its neighbors.

    NaN (absent) for isolated nodes.  ``degree`` selects "weighted" strength
    (default) or "binary" neighbor counts.
    """
    return float(leverage_centralities(net, degree=degree)[node])


def leverage_centralities(net, degree: str = "weighted") -> np.ndarray:
    w = _weights_of(net)
    n = w.shape[0]
    adj = w > 0
    if degree == "weighted":
        k = w.sum(axis=1)
    elif degree == "binary":
        k = adj.sum(axis=1).astype(float)
    else:
        raise ValueError(f"unknown degree mode {degree!r}")
    out = np.full(n, np.nan)
    for i in range(n):
        nbrs = np.flatnonzero(adj[i])
        if nbrs.size == 0:
            continue
        kj = k[nbrs]
        out[i] = np.mean((k[i] - kj) / (k[i] + kj))
    return out


def partition_modularity(weights: np.ndarray, labels: np.ndarray) -> float:
    """Newman weighted modularity of a given node partition."""
    w = np.asarray(weights, dtype=float)
    two_m = w.sum()
    if two_m <= 0:
        raise DataError("no edges")
    k = w.sum(axis=1)
    q = 0.0
    for c in np.unique(labels):
        idx = labels == c
        q += w[np.ix_(idx, idx)].sum() / two_m - (k[idx].sum() / two_m) ** 2
    return float(q)


def _louvain_one_level(w: np.ndarray, order: np.ndarray) -> np.ndarray:
    """One Louvain level: local moves until no gain; returns community labels.

    Nodes are visited in ``order``; among equal-gain targets the community
    first encountered (in neighbor visit order) wins, so the pass is fully
    deterministic given ``order``.
    """
    n = w.shape[0]
    two_m = w.sum()
    k = w.sum(axis=1)
    labels = np.arange(n)
    comm_tot = k.copy()  # total degree per community
    pos = np.empty(n, dtype=int)  # visit position of each node
    pos[order] = np.arange(n)
    improved = True
    while improved:
        improved = False
        for v in order:
            cv = labels[v]
            kv = k[v]
            nbrs = np.flatnonzero(w[v])
            nbrs = nbrs[nbrs != v]
            if nbrs.size == 0:
                continue
            # weight from v to each neighboring community
            w_to = {}
            for u in nbrs[np.argsort(pos[nbrs], kind="stable")]:
                w_to.setdefault(labels[u], [0.0, pos[u]])
                w_to[labels[u]][0] += w[v, u]
            comm_tot[cv] -= kv
            w_own = w_to.get(cv, [0.0])[0]
            base = w_own - comm_tot[cv] * kv / two_m
            best_c, best_gain = cv, 0.0
            for c, (wc, _first) in sorted(w_to.items(), key=lambda kvp: kvp[1][1]):
                if c == cv:
                    continue
                gain = (wc - comm_tot[c] * kv / two_m) - base
                if gain > best_gain + _GAIN_TOL:
                    best_gain = gain
                    best_c = c
            labels[v] = best_c
            comm_tot[best_c] += kv
            if best_c != cv:
                improved = True
    return labels


def _aggregate(w: np.ndarray, labels: np.ndarray, order: np.ndarray):
    """Collapse communities to supernodes; supernode visit order follows the
    first appearance of each community along the node visit order."""
    first_seen = {}
    for v in order:
        first_seen.setdefault(labels[v], len(first_seen))
    mapping = np.array([first_seen[c] for c in labels])
    nc = len(first_seen)
    agg = np.zeros((nc, nc))
    np.add.at(agg, (mapping[:, None], mapping[None, :]), w)
    return agg, mapping, np.arange(nc)


def modularity(net, seed: int = 0, visit_order: np.ndarray | None = None):
    """Louvain-optimized Newman weighted modularity.

    Returns ``(Q, partition)`` where partition labels are consecutive
    integers in order of first appearance.  ``seed`` fixes the node visit
    order; passing ``visit_order`` overrides it (used to demonstrate
    relabeling equivariance).
    """
    w = _weights_of(net).copy()
    np.fill_diagonal(w, 0.0)
    if w.sum() <= 0:
        raise DataError("no edges")
    n = w.shape[0]
    if visit_order is None:
        rng = np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.asarray(visit_order, dtype=int)
    node_labels = np.arange(n)
    level_w, level_order = w, order
    while True:
        labels = _louvain_one_level(level_w, level_order)
        agg, mapping, _ = _aggregate(level_w, labels, level_order)
        node_labels = mapping[node_labels]
        if agg.shape[0] == level_w.shape[0]:
            break
        level_w = agg
        # supernode visit order = community first-appearance order
        level_order = np.arange(agg.shape[0])
    # relabel by first appearance over nodes 0..n-1 for a stable output
    remap = {}
    for lab in node_labels:
        remap.setdefault(lab, len(remap))
    partition = np.array([remap[lab] for lab in node_labels])
    return partition_modularity(w, partition), partition


def characteristic_path_length(net, path_lengths: np.ndarray | None = None):
    """Mean finite off-diagonal shortest path length.

    Returns ``(L, n_infinite_pairs)`` where the count is over unordered node
    pairs excluded as unreachable.  Raises if every pair is disconnected.
    """
    d = shortest_path_lengths(net) if path_lengths is None else path_lengths
    n = d.shape[0]
    iu = np.triu_indices(n, k=1)
    vals = d[iu]
    finite = np.isfinite(vals)
    if not finite.any():
        raise DataError("all node pairs are disconnected")
    return float(vals[finite].mean()), int((~finite).sum())


def metric_suite(net, louvain_seed: int = 0, leverage_degree: str = "weighted"):
    """All nodal metrics plus the whole-network summary in one pass.

    Network-level clustering, degree, and leverage are means of nodal values
    (leverage averaged over nodes where it is defined); network efficiency is
    the mean nodal efficiency.
    """
    w = _weights_of(net)
    q, partition = modularity(net, seed=louvain_seed)  # raises on empty nets
    d = shortest_path_lengths(net)
    nodal = NodalMetrics(
        clustering=weighted_clusterings(net),
        efficiency=nodal_efficiencies(net, d),
        degree=weighted_degrees(net),
        leverage=leverage_centralities(net, degree=leverage_degree),
    )
    path_len, n_inf = characteristic_path_length(net, d)
    defined = ~np.isnan(nodal.leverage)
    network = NetworkMetrics(
        clustering=float(nodal.clustering.mean()),
        efficiency=float(nodal.efficiency.mean()),
        path_length=path_len,
        degree=float(nodal.degree.mean()),
        leverage=float(nodal.leverage[defined].mean()) if defined.any() else float("nan"),
        modularity=q,
        partition=partition,
        infinite_path_pairs=n_inf,
    )
    return nodal, network
