"""Point-cloud normal estimation by local plane fitting."""
from __future__ import annotations

import numpy as np

from .geometry import PointCloud
from .knn import KnnIndex
from .validation import as_points

DEFAULT_K = 16
_COLLINEAR_RATIO = 1e-10


def fit_normals(points, viewpoint, k: int = DEFAULT_K):
    """Per-point plane-fit normals oriented toward ``viewpoint``.

    Returns ``(normals, valid)``; ``valid`` is False where the k-NN
    neighbourhood is collinear and no plane is defined.
    """
    p = as_points(points)
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(p) < k:
        raise ValueError(f"need at least k={k} points, got {len(p)}")
    _, nbr = KnnIndex(p).query(p, k)
    q = p[nbr]
    q = q - q.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", q, q) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    valid = evals[:, 1] > _COLLINEAR_RATIO * np.maximum(evals[:, 2], 1e-300)
    to_view = np.asarray(viewpoint, dtype=np.float64).reshape(1, 3) - p
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, valid


def estimate_normals(points, viewpoint, k: int = DEFAULT_K, colors=None) -> PointCloud:
    """Oriented normals for a scanned cloud; degenerate points are dropped."""
    p = as_points(points)
    normals, valid = fit_normals(p, viewpoint, k)
    c = None if colors is None else np.asarray(colors, dtype=np.float64)[valid]
    return PointCloud(p[valid], normals[valid], c)
