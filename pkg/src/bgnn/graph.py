"""Dynamic k-nearest-neighbour graph construction.

Three interchangeable metrics build the same topology type: squared l2 on
real features, Hamming distance on packed binary features, and the matmul
relaxation used during training, whose off-diagonal score for {-1,+1} rows
equals 2 * Hamming - dim and therefore orders neighbours identically.

Every path funnels through one top-k routine (float distance matrix, +inf
diagonal, stable argsort) so ties always break toward the smaller index and
the metrics agree exactly on tied inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bitcore import BitMatrix, pairwise_hamming


@dataclass(frozen=True)
class GraphTopology:
    """Fixed-degree neighbour lists: neighbours[i] are the k nearest to i.

    Self-loops are never produced; the diagonal is excluded before top-k
    selection and validation rejects it outright.
    """

    neighbours: np.ndarray = field(repr=False)

    def __post_init__(self):
        nb = np.asarray(self.neighbours)
        if nb.ndim != 2:
            raise ValueError("neighbours must be an (n, k) index array")
        if not np.issubdtype(nb.dtype, np.integer):
            raise ValueError("neighbour indices must be integers")
        if nb.dtype != np.int32:
            nb = nb.astype(np.int32)
        object.__setattr__(self, "neighbours", nb)
        n, k = nb.shape
        if k < 1 or k >= max(n, 1):
            raise ValueError(f"need 1 <= k < n, got k={k} with n={n}")
        if nb.size and (nb.min() < 0 or nb.max() >= n):
            raise ValueError("neighbour index out of range")
        if np.any(nb == np.arange(n, dtype=nb.dtype)[:, None]):
            raise ValueError("self-loop in neighbour list")

    @property
    def n(self) -> int:
        return self.neighbours.shape[0]

    @property
    def k(self) -> int:
        return self.neighbours.shape[1]

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat (source, target) arrays in row-major (node, slot) order."""
        n, k = self.neighbours.shape
        src = np.repeat(np.arange(n, dtype=np.int32), k)
        return src, self.neighbours.reshape(-1)


def topology_from_distances(dist: np.ndarray, k: int) -> GraphTopology:
    """Top-k selection shared by every metric.

    `dist` is any square array where smaller means closer. The diagonal is
    ignored. Rows are ranked by a stable argsort so equal distances resolve
    to the smaller index on every platform.
    """
    dist = np.asarray(dist)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError("distance matrix must be square")
    n = dist.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k} with n={n}")
    work = dist.astype(np.float64, copy=True)
    np.fill_diagonal(work, np.inf)
    order = np.argsort(work, axis=1, kind="stable")
    return GraphTopology(order[:, :k].astype(np.int32))


def pairwise_sq_l2(x: np.ndarray) -> np.ndarray:
    """All-pairs squared euclidean distances via the GEMM expansion."""
    x = np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    return d


def knn_l2(x: np.ndarray, k: int) -> GraphTopology:
    """k nearest neighbours of real-valued rows under squared l2."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("features must be (n, d)")
    if not np.all(np.isfinite(x)):
        raise ValueError("knn features contain non-finite values")
    return topology_from_distances(pairwise_sq_l2(x), k)


def knn_hamming(x: BitMatrix, k: int) -> GraphTopology:
    """k nearest neighbours of packed binary rows under Hamming distance."""
    return topology_from_distances(pairwise_hamming(x).astype(np.float64), k)


def knn_score_matmul(x: np.ndarray, k: int) -> GraphTopology:
    """Training-time relaxation: distances from a single matmul.

    For rows in {-1,+1}, x @ x.T has off-diagonal entries dim - 2 * Hamming,
    so D = -(x x^T - dim I) = 2 * Hamming - dim off the diagonal: a strictly
    increasing function of Hamming distance, hence the same neighbour ranking
    as `knn_hamming` under the shared tie rule. Inputs are validated to be
    exactly {-1,+1} so the products stay integer-exact in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be (n, d)")
    if not np.all(np.abs(x) == 1.0):
        raise ValueError("matmul-score knn expects features in {-1,+1}")
    d = x.shape[1]
    scores = -(x @ x.T)
    np.fill_diagonal(scores, -float(d))
    return topology_from_distances(scores, k)


def batched_knn(features, k: int, n_graphs: int, metric: str = "l2") -> GraphTopology:
    """Per-graph kNN over equal-size graphs stacked along the row axis.

    Row blocks of size rows / n_graphs are treated as independent graphs;
    neighbour indices come back offset into the stacked numbering, so edges
    never cross graph boundaries. `features` is a real array for "l2" and
    "score", a BitMatrix for "hamming".
    """
    if metric == "hamming":
        rows = features.rows
    else:
        features = np.asarray(features)
        rows = features.shape[0]
    if rows % n_graphs:
        raise ValueError(f"{rows} rows do not split into {n_graphs} equal graphs")
    per = rows // n_graphs
    if n_graphs == 1:
        return _knn_single(features, k, metric)
    blocks = []
    for g in range(n_graphs):
        lo = g * per
        if metric == "hamming":
            part = features.take(np.arange(lo, lo + per))
        else:
            part = features[lo : lo + per]
        blocks.append(_knn_single(part, k, metric).neighbours + np.int32(lo))
    return GraphTopology(np.vstack(blocks))


def _knn_single(features, k: int, metric: str) -> GraphTopology:
    if metric == "l2":
        return knn_l2(features, k)
    if metric == "hamming":
        return knn_hamming(features, k)
    if metric == "score":
        return knn_score_matmul(features, k)
    raise ValueError(f"unknown knn metric: {metric!r}")


def neighbour_union(a: GraphTopology, b: GraphTopology) -> tuple[np.ndarray, np.ndarray]:
    """Per-node union of two neighbour lists, as flat columns + row pointer.

    Returns (cols, indptr) in CSR style: cols[indptr[i]:indptr[i+1]] are the
    sorted distinct neighbours of node i taken from either topology. Used by
    similarity-distribution losses that compare teacher and student graphs.
    """
    if a.n != b.n:
        raise ValueError("topologies cover different node counts")
    merged = np.concatenate([a.neighbours, b.neighbours], axis=1)
    merged.sort(axis=1)
    keep = np.ones(merged.shape, dtype=bool)
    keep[:, 1:] = merged[:, 1:] != merged[:, :-1]
    counts = keep.sum(axis=1)
    indptr = np.zeros(a.n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return merged[keep].astype(np.int32), indptr
