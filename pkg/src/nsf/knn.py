"""Exact k-nearest-neighbour index with deterministic tie-breaking.

Backed by ``scipy.spatial.cKDTree``; results are post-sorted by
``(distance, index)`` so equidistant neighbours always come back in
increasing index order, identical to a brute-force scan.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .validation import as_points

_EXTRA = 4


class KnnIndex:
    """Immutable snapshot of a point set organised for k-NN queries."""

    def __init__(self, points):
        p = np.asarray(points, dtype=np.float64)
        if p.size == 0:
            raise ValueError("empty point set")
        p = as_points(p)
        p.setflags(write=False)
        self.points = p
        self._tree = cKDTree(p)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, k: int = 1):
        """Return ``(distances, indices)`` of shape ``(m, min(k, n))``."""
        q = as_points(queries, allow_empty=True, name="queries")
        n = len(self.points)
        k_eff = min(int(k), n)
        if k_eff < 1:
            raise ValueError("k must be >= 1")
        if len(q) == 0:
            return np.zeros((0, k_eff)), np.zeros((0, k_eff), dtype=np.int64)
        k_ask = min(k_eff + _EXTRA, n)
        d, i = self._tree.query(q, k=k_ask)
        d = np.asarray(d, dtype=np.float64).reshape(len(q), k_ask)
        i = np.asarray(i, dtype=np.int64).reshape(len(q), k_ask)
        # recompute distances exactly so ties compare bitwise like brute force
        d = np.linalg.norm(self.points[i] - q[:, None, :], axis=2)
        order = np.lexsort((i, d), axis=1)
        d = np.take_along_axis(d, order, axis=1)
        i = np.take_along_axis(i, order, axis=1)
        # rows whose k-th distance ties with the last candidate may hide
        # lower-index equals beyond the fetched window: resolve exactly
        if k_ask < n:
            ambiguous = np.nonzero(d[:, k_eff - 1] >= d[:, -1])[0]
            for r in ambiguous:
                d[r, :k_eff], i[r, :k_eff] = self._exact_row(q[r], k_eff, d[r, k_eff - 1])
        return d[:, :k_eff], i[:, :k_eff]

    def _exact_row(self, x, k, radius):
        cand = np.asarray(self._tree.query_ball_point(x, radius * (1 + 1e-9) + 1e-15), dtype=np.int64)
        dd = np.linalg.norm(self.points[cand] - x, axis=1)
        order = np.lexsort((cand, dd))[:k]
        return dd[order], cand[order]

    def nearest(self, queries):
        d, i = self.query(queries, 1)
        return d[:, 0], i[:, 0]


def build_knn_index(points) -> KnnIndex:
    return KnnIndex(points)

