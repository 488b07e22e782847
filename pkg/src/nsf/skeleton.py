"""Articulation: forward kinematics, linear blend skinning and its inverse."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointCloud
from .knn import KnnIndex
from .validation import as_points, normalize_rows

logger = logging.getLogger(__name__)

ROOT_EPS = 1e-5
MAX_ITER = 20
STEP = 1.0


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Kinematic tree; ``offsets[j]`` is joint j's rest position relative to its parent."""

    parents: tuple
    offsets: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        k = len(parents)
        if k < 1:
            raise ValueError("skeleton needs at least one joint")
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(parents[1:], 1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has invalid parent {p}; parents must precede children")
        off = np.array(self.offsets, dtype=np.float64).reshape(k, 3)
        off.setflags(write=False)
        names = tuple(self.names) if self.names else tuple(f"joint{j}" for j in range(k))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "names", names)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j, p in enumerate(self.parents):
            pos[j] = self.offsets[j] + (pos[p] if p >= 0 else 0.0)
        return pos

    def scaled(self, s: float) -> "Skeleton":
        return Skeleton(self.parents, self.offsets * s, self.names)


@dataclass(frozen=True, eq=False)
class Pose:
    axis_angle: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        aa = np.array(self.axis_angle, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(aa)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.any(np.linalg.norm(aa, axis=1) >= np.pi):
            raise ValueError("axis-angle magnitude must be < pi")
        aa.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "axis_angle", aa)
        object.__setattr__(self, "translation", t)

    @classmethod
    def zero(cls, n_joints: int) -> "Pose":
        return cls(np.zeros((n_joints, 3)))

    @property
    def n_joints(self) -> int:
        return len(self.axis_angle)

    def bend_angles(self) -> np.ndarray:
        return np.linalg.norm(self.axis_angle, axis=1)


@dataclass(frozen=True, eq=False)
class JointTransforms:
    """Per-joint rest-to-posed rigid transforms ``T`` (K, 4, 4) and posed joint positions."""

    matrices: np.ndarray
    joint_positions: np.ndarray

    @property
    def n_joints(self) -> int:
        return len(self.matrices)

    def inverse(self) -> np.ndarray:
        R = self.matrices[:, :3, :3]
        t = self.matrices[:, :3, 3]
        inv = np.tile(np.eye(4), (len(R), 1, 1))
        inv[:, :3, :3] = np.transpose(R, (0, 2, 1))
        inv[:, :3, 3] = -np.einsum("kji,kj->ki", R, t)
        return inv


def rotation_matrices(axis_angle: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.array(axis_angle, dtype=np.float64).reshape(-1, 3)).as_matrix()


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> JointTransforms:
    if pose.n_joints != skeleton.n_joints:
        raise ValueError(f"pose has {pose.n_joints} joints, skeleton has {skeleton.n_joints}")
    k = skeleton.n_joints
    R = rotation_matrices(pose.axis_angle)
    G = np.zeros((k, 4, 4))
    for j, p in enumerate(skeleton.parents):
        local = np.eye(4)
        local[:3, :3] = R[j]
        local[:3, 3] = skeleton.offsets[j]
        if p < 0:
            local[:3, 3] += pose.translation
            G[j] = local
        else:
            G[j] = G[p] @ local
    rest = skeleton.rest_positions()
    T = G.copy()
    T[:, :3, 3] -= np.einsum("kij,kj->ki", G[:, :3, :3], rest)
    return JointTransforms(T, G[:, :3, 3].copy())


def blend_matrices(weights: np.ndarray, transforms: JointTransforms) -> np.ndarray:
    """Per-point blended affine maps ``sum_i w_i T_i``, shape (N, 4, 4)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != transforms.n_joints:
        raise ValueError(f"weights have shape {w.shape}, expected (N, {transforms.n_joints})")
    return np.einsum("nk,kij->nij", w, transforms.matrices)


def apply_affine(M: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.einsum("nij,nj->ni", M[:, :3, :3], points) + M[:, :3, 3]


def lbs_forward(points, weights, transforms: JointTransforms) -> np.ndarray:
    """Pose points by linear blend skinning."""
    p = as_points(points, allow_empty=True)
    M = blend_matrices(weights, transforms)
    if len(M) != len(p):
        raise ValueError("one weight vector per point required")
    return apply_affine(M, p)


def push_normals(M: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Transform normals by the inverse-transpose of each blended linear map."""
    A = M[:, :3, :3]
    return normalize_rows(np.linalg.solve(np.transpose(A, (0, 2, 1)), normals[..., None])[..., 0])


class SkinningField:
    """Skinning weights diffused off a set of basis points.

    A query blends the ``k`` nearest basis weight vectors with inverse
    distance weights ``d_i^-p - d_(k+1)^-p`` (the nearest excluded
    neighbour's weight is subtracted), renormalised to sum to one. The
    subtraction makes the field continuous where the neighbour set changes.
    """

    def __init__(self, basis_points, basis_weights, k: int = 8, power: float = 2.0):
        b = as_points(basis_points)
        w = np.array(basis_weights, dtype=np.float64)
        if w.ndim != 2 or len(w) != len(b):
            raise ValueError("need one weight vector per basis point")
        if np.any(w < 0) or not np.allclose(w.sum(1), 1.0, atol=1e-6):
            raise ValueError("basis weights must be convex")
        w.setflags(write=False)
        self.basis_points = b
        self.basis_weights = w
        self.k = int(k)
        self.power = float(power)
        self.index = KnnIndex(b)

    @property
    def n_joints(self) -> int:
        return self.basis_weights.shape[1]

    def query(self, x, return_distance: bool = False):
        x = as_points(x, allow_empty=True)
        if len(x) == 0:
            out = np.zeros((0, self.n_joints))
            return (out, np.zeros(0)) if return_distance else out
        k = min(self.k, len(self.basis_points))
        d, idx = self.index.query(x, k + 1 if len(self.basis_points) > k else k)
        inv = 1.0 / np.maximum(d, 1e-12) ** self.power
        if d.shape[1] > k:
            inv = inv[:, :k] - inv[:, k:]
            d, idx = d[:, :k], idx[:, :k]
        flat = inv.sum(axis=1) <= 0  # k+1 equidistant neighbours
        inv[flat] = 1.0
        exact = d[:, 0] <= 1e-12
        inv[exact] = 0.0
        inv[exact, 0] = 1.0
        w = np.einsum("nk,nkj->nj", inv, self.basis_weights[idx])
        w /= w.sum(axis=1, keepdims=True)
        return (w, d[:, 0]) if return_distance else w


def query_weights(field: SkinningField, x) -> np.ndarray:
    return field.query(x)


@dataclass
class CanonicalizationResult:
    cloud: PointCloud
    converged: np.ndarray
    residual: np.ndarray
    iterations: int

    @property
    def converged_cloud(self) -> PointCloud:
        return self.cloud.subset(self.converged)


def _candidates(x, transforms, field, reach: float = 0.05):
    """Rigid inverse of every joint plus a plausibility score per candidate.

    A candidate scores its own joint weight minus a penalty for lying far
    from the basis, where the diffused weights stop being meaningful.
    """
    inv = transforms.inverse()
    k = transforms.n_joints
    cands = np.einsum("kij,nj->kni", inv[:, :3, :3], x) + inv[:, None, :3, 3]
    scores = np.empty((len(x), k))
    for j in range(k):
        w, dist = field.query(cands[j], return_distance=True)
        scores[:, j] = w[:, j] - dist / reach
    return cands, scores


def _skin_map(xc, T, field):
    M = blend_matrices(field.query(xc), T)
    return apply_affine(M, xc), M


def _jacobian(xc, g0, T, field, h: float = 1e-6):
    """Forward-difference Jacobian of the full skinning map (weights included)."""
    J = np.empty((len(xc), 3, 3))
    for c in range(3):
        xp = xc.copy()
        xp[:, c] += h
        J[:, :, c] = (_skin_map(xp, T, field)[0] - g0) / h
    return J


def _solve(x, xc, T, field, eps, max_iter, step, method):
    g, M = _skin_map(xc, T, field)
    res = np.linalg.norm(g - x, axis=1)
    lam = np.full(len(x), float(step))
    it = 0
    for it in range(1, max_iter + 1):
        active = res >= eps
        if not np.any(active):
            break
        a = np.nonzero(active)[0]
        A = M[a, :3, :3]
        if method == "newton":
            J = _jacobian(xc[a], g[a], T, field)
            good = np.abs(np.linalg.det(J)) > 1e-8 * np.abs(np.linalg.det(A))
            A = np.where(good[:, None, None], J, A)
        delta = np.linalg.solve(A, (x[a] - g[a])[..., None])[..., 0]
        trial = xc[a] + lam[a, None] * delta
        gt, Mt = _skin_map(trial, T, field)
        rt = np.linalg.norm(gt - x[a], axis=1)
        ok = rt < res[a]
        acc = a[ok]
        xc[acc], g[acc], M[acc], res[acc] = trial[ok], gt[ok], Mt[ok], rt[ok]
        lam[acc] = np.minimum(step, 2.0 * lam[acc])
        lam[a[~ok]] *= 0.5
    return xc, M, res, it


def canonicalize(
    cloud: PointCloud,
    pose: Pose,
    skeleton: Skeleton,
    field: SkinningField,
    *,
    eps: float = ROOT_EPS,
    max_iter: int = MAX_ITER,
    step: float = STEP,
    method: str = "newton",
    restarts: int = 2,
) -> CanonicalizationResult:
    """Invert LBS point-wise by damped root finding.

    Each point starts from the rigid inverse of the joint that best claims
    it. ``method="fixed_point"`` iterates
    ``x_c += step * M(x_c)^-1 (x - M(x_c) x_c)``; ``"newton"`` replaces
    ``M`` by the Jacobian of the whole map, including how the weights vary
    with ``x_c`` (falls back to ``M`` where that Jacobian is singular). A
    step that fails to shrink the residual is halved and retried, so
    residuals decrease monotonically over accepted iterations. Points that
    do not converge are retried from the next ``restarts`` best-scoring
    joints; the lowest residual wins.
    """
    if method not in ("newton", "fixed_point"):
        raise ValueError(f"unknown method {method!r}")
    x = cloud.points
    T = forward_kinematics(skeleton, pose)
    cands, scores = _candidates(x, T, field)
    order = np.argsort(-scores, axis=1, kind="stable")
    n = len(x)
    xc, M, res, it = _solve(x, cands[order[:, 0], np.arange(n)].copy(), T, field, eps, max_iter, step, method)
    for r in range(1, min(restarts, T.n_joints - 1) + 1):
        bad = np.nonzero(res >= eps)[0]
        if len(bad) == 0:
            break
        start = cands[order[bad, r], bad].copy()
        xb, Mb, rb, _ = _solve(x[bad], start, T, field, eps, max_iter, step, method)
        better = rb < res[bad]
        idx = bad[better]
        xc[idx], M[idx], res[idx] = xb[better], Mb[better], rb[better]
    converged = res < eps
    normals = None
    if cloud.normals is not None:
        # canonical normal: inverse-transpose of the inverse map = A^T n
        normals = normalize_rows(np.einsum("nji,nj->ni", M[:, :3, :3], cloud.normals))
    if not np.all(converged):
        logger.debug("canonicalize: %d/%d points unconverged", int((~converged).sum()), n)
    return CanonicalizationResult(PointCloud(xc, normals, cloud.colors), converged, res, it)


def repose(points, normals, skeleton: Skeleton, pose: Pose, field: SkinningField):
    """LBS with weights queried at the (canonical) input positions."""
    T = forward_kinematics(skeleton, pose)
    M = blend_matrices(field.query(points), T)
    out = apply_affine(M, np.asarray(points, dtype=np.float64))
    return out, (None if normals is None else push_normals(M, normals))


# -- JSON pose sequences ------------------------------------------------------

def save_pose_sequence(path, skeleton: Skeleton, poses: Sequence[Pose], extra: Optional[dict] = None) -> None:
    doc = {
        "version": 1,
        "joints": list(skeleton.names),
        "parents": list(skeleton.parents),
        "offsets": skeleton.offsets.tolist(),
        "frames": [{"axis_angle": p.axis_angle.tolist(), "translation": p.translation.tolist()} for p in poses],
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_pose_sequence(path):
    """Return ``(skeleton, poses, document)``."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        skel = Skeleton(doc["parents"], doc["offsets"], tuple(doc.get("joints", ())))
        poses: List[Pose] = [Pose(f["axis_angle"], f.get("translation", [0, 0, 0])) for f in doc["frames"]]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed pose sequence {path}: missing {exc}") from None
    return skel, poses, doc
