"""Input validation helpers shared by the estimators and geometry kernels."""
from __future__ import annotations

import numpy as np


class NotFittedError(RuntimeError):
    """Raised when a model is queried before ``fit``."""


def as_points(points, *, allow_empty: bool = False, name: str = "points") -> np.ndarray:
    """Coerce to a finite float64 ``(n, 3)`` array."""
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        if not allow_empty:
            raise ValueError(f"empty {name}")
        return p.reshape(0, 3)
    if p.ndim == 1:
        p = p.reshape(1, -1)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} contain non-finite values")
    return p


def check_unit_normals(normals: np.ndarray, tol: float) -> None:
    if len(normals) == 0:
        return
    err = np.abs(np.linalg.norm(normals, axis=1) - 1.0)
    if err.max() > tol:
        raise ValueError(f"normals not unit length (max deviation {err.max():.3g})")


def normalize_rows(v: np.ndarray, eps: float = 1e-300) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, eps)


def check_is_fitted(estimator, attributes) -> None:
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
