"""Table-driven marching cubes and cached fusion-mesh extraction."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .geometry import Aabb, TriMesh

logger = logging.getLogger(__name__)

_EDGE_LOWER = np.minimum(CORNERS[EDGES[:, 0]], CORNERS[EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(CORNERS[EDGES[:, 1]] - CORNERS[EDGES[:, 0]]), axis=1)

# process-wide count of marching-cubes runs (instrumentation for amortisation checks)
EXTRACTION_COUNTER = {"count": 0}


class EmptySurface(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """``resolution`` cells per axis over ``aabb`` (``resolution + 1`` samples)."""

    aabb: Aabb
    resolution: int

    def __post_init__(self):
        if int(self.resolution) < 8:
            raise ValueError("grid resolution must be >= 8")
        if np.any(self.aabb.extent <= 0):
            raise ValueError("grid box is degenerate")

    @property
    def spacing(self) -> np.ndarray:
        return self.aabb.extent / self.resolution

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))

    def axes(self):
        return [np.linspace(self.aabb.min[a], self.aabb.max[a], self.resolution + 1) for a in range(3)]

    def points(self) -> np.ndarray:
        X, Y, Z = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def marching_cubes(sampler: Callable[[np.ndarray], np.ndarray], grid: GridSpec) -> TriMesh:
    """Triangulate the zero level set of ``sampler`` over ``grid``.

    Triangles are wound so that face normals point toward positive values.
    A field without sign changes yields an empty mesh.
    """
    n = grid.resolution + 1
    values = np.asarray(sampler(grid.points()), dtype=np.float64).reshape(n, n, n)
    return marching_cubes_volume(values, grid.aabb.min, grid.spacing)


def marching_cubes_volume(values: np.ndarray, origin, spacing) -> TriMesh:
    EXTRACTION_COUNTER["count"] += 1
    V = np.asarray(values, dtype=np.float64)
    if np.isnan(V).any():
        raise ValueError("NaN in sampled field")
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    nx, ny, nz = V.shape
    inside = V < 0
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    ci, cj, ck = np.nonzero((case != 0) & (case != 255))
    if len(ci) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    table = TRI_TABLE[case[ci, cj, ck]]  # (A, 16)
    cell, slot = np.nonzero(table >= 0)
    local_edge = table[cell, slot]
    lower = _EDGE_LOWER[local_edge]
    axis = _EDGE_AXIS[local_edge]
    pi = ci[cell] + lower[:, 0]
    pj = cj[cell] + lower[:, 1]
    pk = ck[cell] + lower[:, 2]
    n_pts = nx * ny * nz
    gid = axis * n_pts + (pi * ny + pj) * nz + pk
    uniq, inv = np.unique(gid, return_inverse=True)
    faces = inv.reshape(-1, 3)

    ax = uniq // n_pts
    lin = uniq % n_pts
    p0 = np.stack([lin // (ny * nz), (lin // nz) % ny, lin % nz], axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    v0 = V[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = V[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = v0 / (v0 - v1)
    pos = p0.astype(np.float64)
    pos[np.arange(len(pos)), ax] += t
    verts = origin + pos * spacing

    # corners with value exactly 0 make several edge vertices coincide: weld them
    if np.any((t == 0.0) | (t == 1.0)):
        verts, remap = np.unique(verts, axis=0, return_inverse=True)
        faces = remap.reshape(-1)[faces]
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        faces = faces[keep]
        used = np.unique(faces)
        re = np.full(len(verts), -1, dtype=np.int64)
        re[used] = np.arange(len(used))
        verts, faces = verts[used], re[faces]
    # table winding faces the negative side; flip toward positive values
    faces = faces[:, [0, 2, 1]]
    return TriMesh(verts, faces)


# -- fusion-shape extraction ---------------------------------------------------------

class MeshCache:
    """In-memory (and optionally on-disk) cache of fusion meshes per (subject, resolution).

    On disk the layout is ``<root>/<subject>/fusion_r<res>.ply``.
    """

    def __init__(self, root: Optional[str] = None):
        self.root = root
        self._mem: Dict[Tuple[str, int], TriMesh] = {}

    def path(self, subject: str, resolution: int) -> Optional[str]:
        if self.root is None:
            return None
        return os.path.join(self.root, subject, f"fusion_r{resolution}.ply")

    def get(self, subject: str, resolution: int) -> Optional[TriMesh]:
        key = (subject, int(resolution))
        if key in self._mem:
            return self._mem[key]
        p = self.path(subject, resolution)
        if p is not None and os.path.exists(p):
            from .io import load_ply
            mesh = load_ply(p)
            self._mem[key] = mesh
            return mesh
        return None

    def put(self, subject: str, resolution: int, mesh: TriMesh) -> None:
        self._mem[(subject, int(resolution))] = mesh
        p = self.path(subject, resolution)
        if p is not None:
            from .io import save_ply
            os.makedirs(os.path.dirname(p), exist_ok=True)
            save_ply(p, mesh)


def fusion_grid(model, resolution: int, pad: float = 0.0) -> GridSpec:
    return GridSpec(model.aabb_.padded(pad) if pad else model.aabb_, int(resolution))


def extract_fusion_mesh(model, subject: str, resolution: int = 64, cache: Optional[MeshCache] = None,
                        grid: Optional[GridSpec] = None) -> TriMesh:
    """Marching cubes on the subject's fusion SDF, keeping the largest component."""
    if cache is not None:
        hit = cache.get(subject, resolution)
        if hit is not None:
            return hit
    grid = grid if grid is not None else fusion_grid(model, resolution)
    mesh = marching_cubes(lambda p: model.sdf(subject, p, dtype=np.float32), grid)
    if mesh.n_faces == 0:
        raise EmptySurface("no surface in box")
    mesh = mesh.largest_component()
    logger.info("extracted %s at r%d: %d vertices, %d faces", subject, resolution, mesh.n_vertices, mesh.n_faces)
    if cache is not None:
        cache.put(subject, resolution, mesh)
    return mesh
