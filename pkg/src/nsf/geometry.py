"""Core geometry containers and mesh utilities.

Meshes and point clouds hold numpy arrays that are frozen (non-writeable)
after construction, so they can be shared freely between threads and
cached without defensive copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .validation import as_points, check_unit_normals

UNIT_TOL = 1e-6


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", _frozen(lo))
        object.__setattr__(self, "max", _frozen(hi))

    @classmethod
    def from_points(cls, points, pad: float = 0.0) -> "Aabb":
        p = as_points(points)
        return cls(p.min(axis=0) - pad, p.max(axis=0) + pad)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def padded(self, pad: float) -> "Aabb":
        return Aabb(self.min - pad, self.max + pad)

    def contains(self, points) -> np.ndarray:
        p = as_points(points)
        return np.all((p >= self.min) & (p <= self.max), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.min, self.max, size=(n, 3))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = as_points(self.points, allow_empty=True)
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(pts):
                raise ValueError(f"{len(pts)} points but {len(n)} normals")
            check_unit_normals(n, UNIT_TOL)
            object.__setattr__(self, "normals", _frozen(n))
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(pts):
                raise ValueError(f"{len(pts)} points but {len(c)} colors")
            object.__setattr__(self, "colors", _frozen(c))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(
            self.points[mask_or_index],
            None if self.normals is None else self.normals[mask_or_index],
            None if self.colors is None else self.colors[mask_or_index],
        )


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = as_points(self.vertices, allow_empty=True)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise ValueError("colors must be per-vertex")
            object.__setattr__(self, "colors", _frozen(np.clip(c, 0.0, 1.0)))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(v):
                raise ValueError("normals must be per-vertex")
            check_unit_normals(n, UNIT_TOL)
            object.__setattr__(self, "normals", _frozen(n))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same connectivity (and colors) on new vertex positions."""
        return TriMesh(vertices, self.faces, self.colors)

    def with_colors(self, colors) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, colors, self.normals)

    # -- derived quantities --------------------------------------------------

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals; isolated vertices get +z."""
        fn = self.face_normals(normalize=False)
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        out = np.where(norm > 1e-300, vn / np.maximum(norm, 1e-300), [0.0, 0.0, 1.0])
        return out

    def edges(self) -> np.ndarray:
        """Directed half-edges (3 per face), shape (3F, 2)."""
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def unique_edges(self) -> np.ndarray:
        e = np.sort(self.edges(), axis=1)
        return np.unique(e, axis=0)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 vertex adjacency matrix."""
        if "adj" not in self._cache:
            e = self.unique_edges()
            n = self.n_vertices
            data = np.ones(2 * len(e))
            a = sp.coo_matrix(
                (data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)
            ).tocsr()
            a.data[:] = 1.0
            self._cache["adj"] = a
        return self._cache["adj"]

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.unique_edges()) + self.n_faces

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two faces."""
        if self.n_faces == 0:
            return False
        e = np.sort(self.edges(), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        """Each directed half-edge appears once; shared edges run opposite ways."""
        e = self.edges()
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 1))

    def connected_components(self) -> np.ndarray:
        """Component label per vertex (face connectivity)."""
        _, labels = connected_components(self.adjacency(), directed=False)
        return labels

    def n_components(self) -> int:
        used = np.unique(self.faces)
        if len(used) == 0:
            return 0
        return len(np.unique(self.connected_components()[used]))

    def largest_component(self) -> "TriMesh":
        if self.n_faces == 0:
            return self
        labels = self.connected_components()
        face_lab = labels[self.faces[:, 0]]
        keep_label = np.bincount(face_lab).argmax()
        return self.submesh(face_lab == keep_label)

    def submesh(self, face_mask) -> "TriMesh":
        f = self.faces[face_mask]
        used = np.unique(f)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriMesh(
            self.vertices[used],
            remap[f],
            None if self.colors is None else self.colors[used],
            None if self.normals is None else self.normals[used],
        )

    def sample_surface(self, n: int, seed: int = 0) -> PointCloud:
        """Area-weighted uniform surface samples with face normals (and colors)."""
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        if areas.sum() <= 0:
            raise ValueError("mesh has no area to sample")
        fid = rng.choice(self.n_faces, size=n, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
        tri = self.vertices[self.faces[fid]]
        pts = np.einsum("nk,nkd->nd", bary, tri)
        normals = self.face_normals()[fid]
        colors = None
        if self.colors is not None:
            colors = np.einsum("nk,nkd->nd", bary, self.colors[self.faces[fid]])
        return PointCloud(pts, normals, colors)

    def to_point_cloud(self) -> PointCloud:
        return PointCloud(self.vertices, self.vertex_normals(), self.colors)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron projected to a sphere, outward-wound."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mids = v[uniq[:, 0]] + v[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)  # midpoints of (01, 12, 20)
        v = np.vstack([v, mids])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return TriMesh(v * radius + np.asarray(center, dtype=np.float64), f)


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    """Closed axis-aligned box with outward winding."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    v = lo + corners * (hi - lo)
    f = np.array([
        [0, 1, 3], [0, 3, 2],   # x = lo
        [4, 6, 7], [4, 7, 5],   # x = hi
        [0, 4, 5], [0, 5, 1],   # y = lo
        [2, 3, 7], [2, 7, 6],   # y = hi
        [0, 2, 6], [0, 6, 4],   # z = lo
        [1, 5, 7], [1, 7, 3],   # z = hi
    ])
    return TriMesh(v, f)


def grid_mesh(n: int = 5, size: float = 1.0) -> TriMesh:
    """Planar n x n vertex grid on z = 0."""
    xs = np.linspace(0.0, size, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(n * n)], axis=1)
    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriMesh(v, f)
