"""K-nearest-neighbor graphs and edge-feature assembly for EdgeConv.

Three query paths share one contract (k nearest by Euclidean distance,
self excluded, ties by ascending index):

* ``brute`` — exact pairwise differences, the reference path.
* ``tree``  — cKDTree candidate generation followed by an exact re-rank
  using the same arithmetic as ``brute``, so index tables are identical
  even on duplicate points.
* ``gram``  — Gram-matrix distances, fastest for wide feature spaces;
  used internally by the network where exact tie order is irrelevant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class KnnGraph:
    """N x k neighbor indices, each row sorted by (distance, index)."""

    neighbors: np.ndarray
    k: int
    metric_space: str = "spatial"  # or "feature"

    def __post_init__(self):
        nb = np.asarray(self.neighbors, dtype=np.int64)
        object.__setattr__(self, "neighbors", nb)
        n = nb.shape[0]
        if nb.ndim != 2 or nb.shape[1] != self.k:
            raise ValueError("neighbor table must be N x k")
        if n and ((nb < 0).any() or (nb >= n).any()):
            raise ValueError("neighbor index out of range")
        if (nb == np.arange(n)[:, None]).any():
            raise ValueError("self loop in neighbor table")


@dataclass(frozen=True)
class EdgeFeatureBlock:
    """N x k x 2F values: [h_i, h_j - h_i] per directed edge (i -> j)."""

    values: np.ndarray
    F: int


def _rank_rows(d2: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    """Pick k smallest (d2, idx) per row. idx broadcasts or matches d2's shape."""
    idx = np.broadcast_to(idx, d2.shape)
    order = np.lexsort((idx, d2), axis=-1)
    return np.take_along_axis(idx, order, axis=-1)[:, :k]


def _knn_brute(features: np.ndarray, k: int) -> np.ndarray:
    n = features.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    chunk = max(1, int(4e6) // max(1, n))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        diff = features[s:e, None, :] - features[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        d2[np.arange(e - s), idx[s:e]] = np.inf  # exclude self
        out[s:e] = _rank_rows(d2, idx, k)
    return out


def _exact_d2(features: np.ndarray, rows: np.ndarray, cand: np.ndarray) -> np.ndarray:
    diff = features[cand] - features[rows, None, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _knn_tree(features: np.ndarray, k: int) -> np.ndarray:
    n = features.shape[0]
    tree = cKDTree(features)
    m = min(n, k + 2)
    rows = np.arange(n)
    out = np.empty((n, k), dtype=np.int64)
    pending = rows
    while pending.size:
        _, cand = tree.query(features[pending], k=m)
        cand = np.atleast_2d(cand)
        d2 = _exact_d2(features, pending, cand)
        d2[cand == pending[:, None]] = np.inf
        order = np.lexsort((cand, d2), axis=-1)
        d2s = np.take_along_axis(d2, order, axis=-1)
        cs = np.take_along_axis(cand, order, axis=-1)
        if m >= n:
            out[pending] = cs[:, :k]
            break
        # A row is settled when nothing beyond the kth candidate could tie
        # or beat it: the (k+1)th exact distance must strictly exceed the kth.
        ok = d2s[:, k] > d2s[:, k - 1]
        out[pending[ok]] = cs[ok, :k]
        pending = pending[~ok]
        m = min(n, m * 2)
    return out


def _knn_gram(features: np.ndarray, k: int) -> np.ndarray:
    sq = np.einsum("ij,ij->i", features, features)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
    np.fill_diagonal(d2, np.inf)
    n = features.shape[0]
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, pd), axis=1)
    return np.take_along_axis(part, order, axis=1).astype(np.int64)


def knn(features: np.ndarray, k: int, metric_space: str = "spatial",
        method: str = "auto") -> KnnGraph:
    """K nearest neighbors under Euclidean distance, self excluded.

    The gram path keeps the input dtype (fast float32 inside the network);
    brute and tree paths compute in float64 and agree exactly, ties included.
    """
    if method == "gram":
        features = np.ascontiguousarray(features)
    else:
        features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be N x F")
    n, f = features.shape
    if k < 1 or k >= n:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={n}")
    if not np.isfinite(features).all():
        raise ValueError("non-finite feature values")
    if method == "auto":
        method = "tree" if f <= 8 else "brute"
    table = {"brute": _knn_brute, "tree": _knn_tree, "gram": _knn_gram}[method](
        features, k)
    return KnnGraph(table, k, metric_space)


def build_edge_features(features: np.ndarray, graph: KnnGraph) -> EdgeFeatureBlock:
    """Gather [h_i, h_j - h_i] for every edge of the graph."""
    features = np.asarray(features)
    n, f = features.shape
    if graph.neighbors.shape[0] != n:
        raise ValueError("graph/features point count mismatch")
    hj = features[graph.neighbors]                     # N x k x F
    hi = np.broadcast_to(features[:, None, :], hj.shape)
    values = np.concatenate([hi, hj - hi], axis=2)
    return EdgeFeatureBlock(values, f)
