"""Structural, behavioral and content metrics for one simulation step.

Graph inputs are square 0/1 adjacency matrices (``scipy.sparse`` or dense).
The follow graph is directed; everything except reciprocity is computed on
its undirected projection.
"""

from __future__ import annotations

import heapq
import math
from collections.abc import Sequence
from dataclasses import dataclass, fields

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

METRIC_COLUMNS = (
    "density",
    "local_clustering_mean",
    "transitivity",
    "modularity",
    "avg_path_length",
    "reciprocity",
    "assortativity",
    "topic_entropy",
    "retention",
    "engagement_rate",
    "content_spread",
    "viral_coefficient_mean",
    "precision_at_10",
    "satisfaction_mean",
)


class MetricError(ValueError):
    """A metric is undefined for the given input."""


@dataclass
class MetricsSnapshot:
    step: int
    density: float
    local_clustering_mean: float
    transitivity: float
    modularity: float
    avg_path_length: float
    reciprocity: float
    assortativity: float
    topic_entropy: float
    retention: float
    engagement_rate: float
    content_spread: float
    viral_coefficient_mean: float
    precision_at_10: float
    satisfaction_mean: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


def _csr(adj) -> sp.csr_matrix:
    m = sp.csr_matrix(adj, dtype=np.int64)
    m.setdiag(0)
    m.eliminate_zeros()
    m.data[:] = 1
    return m


def undirected(adj) -> sp.csr_matrix:
    """Symmetric 0/1 projection without self-loops."""
    a = _csr(adj)
    u = (a + a.T).tocsr()
    u.data[:] = 1
    return u


def density(adj) -> float:
    a = undirected(adj)
    n = a.shape[0]
    if n < 2:
        raise MetricError("density needs at least two nodes")
    edges = a.nnz // 2
    return 2.0 * edges / (n * (n - 1))


def _triangles(a: sp.csr_matrix) -> np.ndarray:
    return np.asarray((a @ a).multiply(a).sum(axis=1)).ravel() // 2


def local_clustering(adj) -> np.ndarray:
    a = undirected(adj)
    k = np.asarray(a.sum(axis=1)).ravel()
    tri = _triangles(a)
    out = np.zeros(a.shape[0])
    ok = k >= 2
    out[ok] = 2.0 * tri[ok] / (k[ok] * (k[ok] - 1))
    return out


def global_transitivity(adj) -> float:
    a = undirected(adj)
    k = np.asarray(a.sum(axis=1)).ravel()
    triads = int(np.sum(k * (k - 1)))
    if triads == 0:
        return 0.0
    return 2.0 * int(_triangles(a).sum()) / triads


def avg_path_length(adj, chunk: int = 512) -> float:
    """Mean shortest-path length over connected (ordered) pairs."""
    a = undirected(adj)
    n = a.shape[0]
    total = 0.0
    count = 0
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        d = csgraph.shortest_path(a, method="D", directed=False, unweighted=True, indices=idx)
        finite = np.isfinite(d) & (d > 0)
        total += float(d[finite].sum())
        count += int(finite.sum())
    if count == 0:
        raise MetricError("no connected pairs")
    return total / count


def reciprocity(adj) -> float:
    a = _csr(adj)
    if a.nnz == 0:
        raise MetricError("reciprocity needs at least one edge")
    mutual = a.multiply(a.T).nnz
    return mutual / a.nnz


def degree_assortativity(adj) -> float:
    """Pearson correlation of end-point degrees over undirected edges."""
    a = undirected(adj)
    if a.nnz == 0:
        raise MetricError("assortativity needs at least one edge")
    k = np.asarray(a.sum(axis=1)).ravel().astype(float)
    coo = a.tocoo()
    x = k[coo.row]
    y = k[coo.col]
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0:
        raise MetricError("assortativity undefined: zero degree variance across edges")
    return float(x @ y) / denom


def topic_entropy(counts: Sequence[float], k: int | None = None) -> float:
    counts = np.asarray(counts, dtype=float)
    k = counts.size if k is None else k
    total = counts.sum()
    if total <= 0:
        raise MetricError("topic entropy needs a positive total count")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum() / math.log(k))


def modularity_of(adj, labels: Sequence[int]) -> float:
    a = undirected(adj)
    m = a.nnz // 2
    if m == 0:
        return 0.0
    _, labels = np.unique(np.asarray(labels), return_inverse=True)
    k = np.asarray(a.sum(axis=1)).ravel()
    coo = a.tocoo()
    same = labels[coo.row] == labels[coo.col]
    internal = np.bincount(labels[coo.row[same]], minlength=labels.max() + 1) // 2
    degsum = np.bincount(labels, weights=k, minlength=labels.max() + 1)
    # exact integer numerator: sum_c (4m L_c - D_c^2) / 4m^2
    num = sum(4 * m * int(lc) - int(dc) ** 2 for lc, dc in zip(internal, degsum))
    return num / (4.0 * m * m)


def greedy_modularity(adj) -> tuple[float, list[int]]:
    """Agglomerative modularity maximization (Clauset-Newman-Moore).

    Gains are compared as exact integers ``2m*L_ij - D_i*D_j`` so ties are
    real ties; they break toward the smallest ``(i, j)`` community pair, where
    a community's id is its smallest node id. Merging stops when no merge has
    a positive gain.

    Returns ``(Q, labels)`` with ``labels[v]`` the community id of node ``v``.
    """
    a = undirected(adj)
    n = a.shape[0]
    m = a.nnz // 2
    labels = list(range(n))
    if m == 0:
        return 0.0, labels
    two_m = 2 * m
    deg = np.asarray(a.sum(axis=1)).ravel().astype(np.int64).tolist()
    links: dict[int, dict[int, int]] = {i: {} for i in range(n)}
    coo = sp.triu(a, k=1).tocoo()
    for r, c in zip(coo.row.tolist(), coo.col.tolist()):
        links[r][c] = 1
        links[c][r] = 1
    members = {i: [i] for i in range(n)}
    heap = []
    for i in range(n):
        for j, lij in links[i].items():
            if i < j:
                heap.append((-(two_m * lij - deg[i] * deg[j]), i, j))
    heapq.heapify(heap)
    while heap:
        negkey, i, j = heapq.heappop(heap)
        if negkey >= 0:
            break
        if i not in members or j not in members:
            continue
        lij = links[i].get(j)
        if lij is None or -(two_m * lij - deg[i] * deg[j]) != negkey:
            continue
        # merge j into i (i < j keeps the smallest node id as label)
        del links[i][j]
        del links[j][i]
        for c, ljc in links.pop(j).items():
            del links[c][j]
            links[i][c] = links[i].get(c, 0) + ljc
            links[c][i] = links[i][c]
        deg[i] += deg[j]
        deg[j] = 0
        members[i].extend(members.pop(j))
        for c, lic in links[i].items():
            key = two_m * lic - deg[i] * deg[c]
            lo, hi = (i, c) if i < c else (c, i)
            heapq.heappush(heap, (-key, lo, hi))
    for cid, nodes in members.items():
        for v in nodes:
            labels[v] = cid
    return modularity_of(a, labels), labels


def precision_at_k(recommended: dict[int, Sequence[int]], interacted: dict[int, set[int]],
                   k: int = 10) -> float:
    """Mean over users with recommendations of ``|top-k ∩ next-step interactions| / k``."""
    users = [u for u, recs in recommended.items() if len(recs) > 0]
    if not users:
        raise MetricError("no recommendations to evaluate")
    total = 0.0
    for u in users:
        hits = interacted.get(u, set())
        total += sum(1 for c in list(recommended[u])[:k] if c in hits) / k
    return total / len(users)


def retention(satisfaction: np.ndarray, threshold: float = 0.2) -> float:
    satisfaction = np.asarray(satisfaction, dtype=float)
    if satisfaction.size == 0:
        return 0.0
    return float(np.mean(satisfaction >= threshold))


def engagement_rate(views: int, likes: int, shares: int) -> float:
    if views <= 0:
        return 0.0
    return (likes + shares) / views


def safe(fn, *args, **kwargs) -> float:
    """Evaluate a metric, mapping an undefined value to NaN."""
    try:
        return float(fn(*args, **kwargs))
    except MetricError:
        return float("nan")
