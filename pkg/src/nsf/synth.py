"""Synthetic articulated bodies, pose-dependent bulges and depth rendering.

A toy body is a union of capsules bound to a small kinematic tree. Posing
applies a smooth, normal-directed bulge near each bent joint before linear
blend skinning, then a pinhole camera rasterizes the posed mesh into a depth
map that is unprojected into a partial, single-view point cloud.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .extract import GridSpec, marching_cubes
from .geometry import Aabb, PointCloud, TriMesh
from .normals import estimate_normals
from .skeleton import Pose, Skeleton, SkinningField, forward_kinematics, lbs_forward
from .validation import as_points, normalize_rows

logger = logging.getLogger(__name__)

RED = (0.85, 0.1, 0.1)
BLUE = (0.1, 0.2, 0.85)


def _default_capsules():
    # (joint, a, b, radius); a == b gives a sphere
    return (
        (0, (0.0, 0.88, 0.0), (0.0, 1.36, 0.0), 0.13),
        (0, (0.0, 1.57, 0.0), (0.0, 1.57, 0.0), 0.1),
        (1, (0.1, 0.86, 0.0), (0.1, 0.12, 0.0), 0.07),
        (2, (-0.1, 0.86, 0.0), (-0.1, 0.12, 0.0), 0.07),
        (3, (0.08, 1.4, 0.0), (0.75, 1.4, 0.0), 0.05),
        (4, (-0.08, 1.4, 0.0), (-0.75, 1.4, 0.0), 0.05),
    )


def _default_limits():
    # per joint: (low xyz, high xyz) of the axis-angle components
    return (
        ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
        ((-0.8, 0.0, -0.1), (0.5, 0.0, 0.4)),
        ((-0.8, 0.0, -0.4), (0.5, 0.0, 0.1)),
        ((-0.3, -0.6, -1.0), (0.3, 0.6, 0.6)),
        ((-0.3, -0.6, -0.6), (0.3, 0.6, 1.0)),
    )


@dataclass(frozen=True)
class ToyBodySpec:
    """Capsule body description; every length is multiplied by ``scale``.

    ``joint_positions`` are rest positions in the world frame. The bulge of
    a non-root joint peaks ``bulge_offset`` metres down its first capsule.
    """

    joint_names: tuple = ("pelvis", "left_leg", "right_leg", "left_arm", "right_arm")
    parents: tuple = (-1, 0, 0, 0, 0)
    joint_positions: tuple = ((0.0, 0.95, 0.0), (0.1, 0.88, 0.0), (-0.1, 0.88, 0.0),
                              (0.2, 1.4, 0.0), (-0.2, 1.4, 0.0))
    capsules: tuple = field(default_factory=_default_capsules)
    joint_limits: tuple = field(default_factory=_default_limits)
    scale: float = 1.0
    radius_scale: float = 1.0
    bulge_amplitude: float = 0.03
    bulge_frequency: float = 1.0
    bulge_offset: float = 0.25
    bulge_sigma: float = 0.06
    skin_temperature: float = 0.02
    mesh_resolution: int = 96
    tone_split_height: float = 0.95

    def __post_init__(self):
        if self.scale <= 0 or self.radius_scale <= 0:
            raise ValueError("scale must be positive")
        if len(self.parents) != len(self.joint_positions) or len(self.joint_names) != len(self.parents):
            raise ValueError("joint names, parents and positions must align")
        if not self.capsules:
            raise ValueError("body needs at least one capsule")
        for cap in self.capsules:
            if cap[3] <= 0:
                raise ValueError("capsule radii must be positive")
            if not 0 <= int(cap[0]) < len(self.parents):
                raise ValueError(f"capsule bound to unknown joint {cap[0]}")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    def skeleton(self) -> Skeleton:
        pos = np.asarray(self.joint_positions, dtype=np.float64) * self.scale
        off = pos.copy()
        for j, p in enumerate(self.parents):
            if p >= 0:
                off[j] = pos[j] - pos[p]
        return Skeleton(self.parents, off, self.joint_names)

    def capsule_arrays(self):
        joints = np.array([int(c[0]) for c in self.capsules])
        a = np.array([c[1] for c in self.capsules], dtype=np.float64) * self.scale
        b = np.array([c[2] for c in self.capsules], dtype=np.float64) * self.scale
        r = np.array([c[3] for c in self.capsules], dtype=np.float64) * self.scale * self.radius_scale
        return joints, a, b, r

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyBodySpec":
        def tup(x):
            return tuple(tup(v) for v in x) if isinstance(x, (list, tuple)) else x
        return cls(**{k: tup(v) for k, v in d.items()})


def single_capsule_spec(length: float = 0.6, radius: float = 0.1) -> ToyBodySpec:
    return ToyBodySpec(
        joint_names=("root",), parents=(-1,), joint_positions=((0.0, 0.0, 0.0),),
        capsules=((0, (0.0, -length / 2, 0.0), (0.0, length / 2, 0.0), radius),),
        joint_limits=(((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),), mesh_resolution=64,
    )


# -- analytic geometry ------------------------------------------------------------------

def capsule_sdf(points, a, b, radius) -> np.ndarray:
    """Signed distance to the capsule around segment ``ab``; shape (n, n_capsules)."""
    p = as_points(points, allow_empty=True)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    ap = p[:, None, :] - a[None]
    h = np.clip(np.einsum("nki,ki->nk", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + h[..., None] * ab[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=2) - np.atleast_1d(radius)[None]


class ToyBody:
    """Canonical template, skinning field and analytic SDF of a :class:`ToyBodySpec`."""

    def __init__(self, spec: ToyBodySpec):
        self.spec = spec
        self.skeleton = spec.skeleton()
        self.cap_joint, self.cap_a, self.cap_b, self.cap_r = spec.capsule_arrays()
        self.template = self._mesh()
        n = self.template.normals
        shell = np.vstack([self.template.vertices, self.template.vertices + 0.03 * n,
                           self.template.vertices - 0.5 * 0.03 * n])
        self.field = SkinningField(shell, self.analytic_weights(shell))

    def sdf(self, points) -> np.ndarray:
        return capsule_sdf(points, self.cap_a, self.cap_b, self.cap_r).min(axis=1)

    def sdf_grad(self, points) -> np.ndarray:
        p = as_points(points, allow_empty=True)
        d = capsule_sdf(p, self.cap_a, self.cap_b, self.cap_r)
        k = d.argmin(axis=1)
        a, b = self.cap_a[k], self.cap_b[k]
        ab = b - a
        h = np.clip(np.sum((p - a) * ab, axis=1) / np.maximum(np.sum(ab * ab, axis=1), 1e-300), 0.0, 1.0)
        g = p - (a + h[:, None] * ab)
        return normalize_rows(g)

    def analytic_weights(self, points) -> np.ndarray:
        """Softmax over joints of ``-capsule_sdf / temperature``."""
        d = capsule_sdf(points, self.cap_a, self.cap_b, self.cap_r)
        per_joint = np.full((len(d), self.spec.n_joints), np.inf)
        for j in range(self.spec.n_joints):
            cols = self.cap_joint == j
            if np.any(cols):
                per_joint[:, j] = d[:, cols].min(axis=1)
        logits = -(per_joint - per_joint.min(axis=1, keepdims=True)) / self.spec.skin_temperature
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True)

    def _mesh(self) -> TriMesh:
        lo = np.minimum(self.cap_a, self.cap_b).min(axis=0) - self.cap_r.max()
        hi = np.maximum(self.cap_a, self.cap_b).max(axis=0) + self.cap_r.max()
        c, half = 0.5 * (lo + hi), 0.5 * float(np.max(hi - lo)) + 0.05
        grid = GridSpec(Aabb(c - half, c + half), self.spec.mesh_resolution)
        mesh = marching_cubes(self.sdf, grid)
        if mesh.n_faces == 0:
            raise ValueError("capsule union has no surface")
        if not (mesh.is_watertight() and mesh.n_components() == 1 and mesh.euler_characteristic() == 2):
            raise ValueError("capsule union is not a single closed genus-0 surface")
        normals = self.sdf_grad(mesh.vertices)
        top = mesh.vertices[:, 1] >= self.spec.tone_split_height * self.spec.scale
        colors = np.where(top[:, None], np.array(RED), np.array(BLUE))
        return TriMesh(mesh.vertices, mesh.faces, colors=colors, normals=normals)

    # -- pose-dependent deformation ----------------------------------------------------
    def bone_axes(self) -> np.ndarray:
        axes = np.zeros((self.spec.n_joints, 3))
        for j in range(self.spec.n_joints):
            k = np.nonzero(self.cap_joint == j)[0]
            if len(k):
                d = self.cap_b[k[0]] - self.cap_a[k[0]]
                n = np.linalg.norm(d)
                axes[j] = d / n if n > 0 else 0.0
        return axes

    def displacement(self, points, pose: Pose, normals=None) -> np.ndarray:
        """Bulge ``A sin(freq |theta_j|)`` along the outward normal, masked by
        the joint's skinning weight and a Gaussian along its bone."""
        p = as_points(points, allow_empty=True)
        spec = self.spec
        n = self.sdf_grad(p) if normals is None else np.asarray(normals, dtype=np.float64)
        w = self.analytic_weights(p)
        rest = self.skeleton.rest_positions()
        axes = self.bone_axes()
        angles = pose.bend_angles()
        amp = np.zeros(len(p))
        off, sig = spec.bulge_offset * spec.scale, spec.bulge_sigma * spec.scale
        for j in range(spec.n_joints):
            if self.skeleton.parents[j] < 0 or not np.any(axes[j]):
                continue
            s = (p - rest[j]) @ axes[j]
            mask = w[:, j] * np.exp(-0.5 * ((s - off) / sig) ** 2)
            amp += spec.bulge_amplitude * np.sin(spec.bulge_frequency * angles[j]) * mask
        return amp[:, None] * n

    def pose_mesh(self, pose: Pose) -> TriMesh:
        """Ground-truth posed mesh: bulge in canonical space, then LBS."""
        t = self.template
        deformed = t.vertices + self.displacement(t.vertices, pose, t.normals)
        posed = lbs_forward(deformed, self.field.query(deformed), forward_kinematics(self.skeleton, pose))
        return TriMesh(posed, t.faces, colors=t.colors)

    def height(self) -> float:
        return float(np.ptp(self.template.vertices[:, 1]))


def build_toy_body(spec: ToyBodySpec) -> ToyBody:
    return ToyBody(spec)


def apply_procedural_deformation(points, pose: Pose, body: ToyBody, normals=None) -> np.ndarray:
    p = as_points(points, allow_empty=True)
    return p + body.displacement(p, pose, normals)


# -- poses -------------------------------------------------------------------------

def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def random_pose(spec: ToyBodySpec, rng: np.random.Generator, yaw: Optional[float] = None) -> Pose:
    lim = np.asarray(spec.joint_limits, dtype=np.float64)
    aa = rng.uniform(lim[:, 0], lim[:, 1])
    aa[0] = (0.0, rng.uniform(-np.pi + 0.05, np.pi - 0.05) if yaw is None else yaw, 0.0)
    return Pose(aa)


def pose_sequence(spec: ToyBodySpec, n_frames: int, rng: np.random.Generator, n_keys: int = 6) -> List[Pose]:
    """Smoothly interpolated random joint targets; root yaw sweeps a full turn."""
    lim = np.asarray(spec.joint_limits, dtype=np.float64)
    keys = rng.uniform(lim[:, 0], lim[:, 1], size=(n_keys,) + lim[:, 0].shape)
    tk = np.linspace(0.0, 1.0, n_keys)
    poses = []
    for t in range(n_frames):
        u = (t + 0.5) / n_frames
        aa = np.empty_like(keys[0])
        for j in range(spec.n_joints):
            for c in range(3):
                aa[j, c] = np.interp(u, tk, keys[:, j, c])
        aa[0] = (0.0, _wrap(-np.pi + 2 * np.pi * u), 0.0)
        poses.append(Pose(aa))
    return poses


# -- camera and rasterization -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera
    (x right, y down, z forward). Pixel ``(row, col)`` is centred at
    ``u = col, v = row``."""

    fx: float = 525.0
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480
    rotation: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.9, 2.5]))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), **intrinsics) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = normalize_rows(target - eye)
        x = normalize_rows(np.cross(z, -up))
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(rotation=R, translation=-R @ eye, **intrinsics)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return as_points(points, allow_empty=True) @ self.rotation.T + self.translation

    def to_world(self, points) -> np.ndarray:
        return (as_points(points, allow_empty=True) - self.translation) @ self.rotation

    def project(self, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy, z

    def unproject(self, u, v, z) -> np.ndarray:
        u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
        pc = np.stack([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z], axis=-1)
        return self.to_world(pc.reshape(-1, 3))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width,
                "height": self.height, "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


@dataclass
class DepthFrame:
    """Z-buffer output: depth (inf where empty), hit face and perspective-correct barycentrics."""

    depth: np.ndarray
    face: np.ndarray
    bary: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.isfinite(self.depth)


_TILE = 12
_NEAR = 0.05


def _raster_candidates(u, v, z, tri, rows, cols, W, H, dys, dxs):
    """Test pixel offsets ``(dy, dx)`` against each triangle's bbox origin."""
    out = []
    u0, u1, u2 = (u[tri[:, i]] for i in range(3))
    v0, v1, v2 = (v[tri[:, i]] for i in range(3))
    iz = 1.0 / z[tri]
    area = (u1 - u0) * (v2 - v0) - (v1 - v0) * (u2 - u0)
    for dy in dys:
        for dx in dxs:
            py = rows[0] + dy
            px = cols[0] + dx
            ok = (py <= rows[1]) & (px <= cols[1])
            if not np.any(ok):
                continue
            w0 = (u2 - u1) * (py - v1) - (v2 - v1) * (px - u1)
            w1 = (u0 - u2) * (py - v2) - (v0 - v2) * (px - u2)
            w2 = (u1 - u0) * (py - v0) - (v1 - v0) * (px - u0)
            s = np.sign(area)
            ok &= (w0 * s >= 0) & (w1 * s >= 0) & (w2 * s >= 0) & (area != 0)
            if not np.any(ok):
                continue
            b = np.stack([w0[ok], w1[ok], w2[ok]], axis=1) / area[ok, None]
            wz = b * iz[ok]
            inv_depth = wz.sum(axis=1)
            depth = 1.0 / inv_depth
            out.append((py[ok] * W + px[ok], depth, np.nonzero(ok)[0], wz * depth[:, None]))
    return out


def render_depth(mesh: TriMesh, camera: Camera) -> DepthFrame:
    """Z-buffer rasterization of ``mesh`` (vectorised over triangles)."""
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    face = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    if mesh.n_faces == 0:
        return DepthFrame(depth, face, bary)
    u, v, z = camera.project(mesh.vertices)
    F = mesh.faces
    front = np.all(z[F] > _NEAR, axis=1)
    cmin = np.ceil(u[F].min(axis=1))
    cmax = np.floor(u[F].max(axis=1))
    rmin = np.ceil(v[F].min(axis=1))
    rmax = np.floor(v[F].max(axis=1))
    cmin, rmin = np.maximum(cmin, 0), np.maximum(rmin, 0)
    cmax, rmax = np.minimum(cmax, W - 1), np.minimum(rmax, H - 1)
    live = front & (cmin <= cmax) & (rmin <= rmax)
    if not np.any(live):
        if np.any(front):
            raise ValueError("body is outside the camera frustum")
        raise ValueError("body is behind the camera")
    ids = np.nonzero(live)[0]
    span = np.maximum(cmax - cmin, rmax - rmin)[ids]
    cands = []
    small = ids[span < _TILE]
    if len(small):
        c = _raster_candidates(u, v, z, F[small], (rmin[small], rmax[small]), (cmin[small], cmax[small]),
                               W, H, range(_TILE), range(_TILE))
        cands += [(pix, d, small[k], b) for pix, d, k, b in c]
    for t in ids[span >= _TILE]:
        dy = range(int(rmax[t] - rmin[t]) + 1)
        dx = range(int(cmax[t] - cmin[t]) + 1)
        c = _raster_candidates(u, v, z, F[[t]], (rmin[[t]], rmax[[t]]), (cmin[[t]], cmax[[t]]), W, H, dy, dx)
        cands += [(pix, d, np.full(len(k), t), b) for pix, d, k, b in c]
    if not cands:
        return DepthFrame(depth, face, bary)
    pix = np.concatenate([c[0] for c in cands]).astype(np.int64)
    dep = np.concatenate([c[1] for c in cands])
    fid = np.concatenate([c[2] for c in cands])
    bc = np.concatenate([c[3] for c in cands])
    order = np.lexsort((fid, dep, pix))
    pix, dep, fid, bc = pix[order], dep[order], fid[order], bc[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, dep, fid, bc = pix[first], dep[first], fid[first], bc[first]
    depth.ravel()[pix] = dep
    face.ravel()[pix] = fid
    bary.reshape(-1, 3)[pix] = bc
    return DepthFrame(depth, face, bary)


def depth_to_cloud(frame: DepthFrame, camera: Camera, mesh: Optional[TriMesh] = None,
                   jitter: float = 0.0, rng: Optional[np.random.Generator] = None,
                   normal_k: int = 16) -> PointCloud:
    """Unproject valid pixels to world points with estimated, camera-facing normals.

    ``jitter`` adds Gaussian noise to depth along each pixel ray. Colors
    come from the nearest corner of the hit face when ``mesh`` has colors.
    """
    rows, cols = np.nonzero(frame.mask)
    if len(rows) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    z = frame.depth[rows, cols].copy()
    if jitter > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        z = z + rng.normal(0.0, jitter, size=len(z))
    pts = camera.unproject(cols.astype(np.float64), rows.astype(np.float64), z)
    colors = None
    if mesh is not None and mesh.colors is not None:
        f = mesh.faces[frame.face[rows, cols]]
        corner = frame.bary[rows, cols].argmax(axis=1)
        colors = mesh.colors[f[np.arange(len(f)), corner]]
    if len(pts) < normal_k:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return estimate_normals(pts, camera.center, k=normal_k, colors=colors)


@dataclass
class RenderedFrame:
    cloud: PointCloud
    pose: Pose
    gt_mesh: TriMesh


def render_frame(body: ToyBody, pose: Pose, camera: Camera, jitter: float = 0.002,
                 rng: Optional[np.random.Generator] = None) -> RenderedFrame:
    gt = body.pose_mesh(pose)
    frame = render_depth(gt, camera)
    return RenderedFrame(depth_to_cloud(frame, camera, gt, jitter, rng), pose, gt)


def render_depth_sequence(body: ToyBody, poses: Sequence[Pose], camera: Camera, jitter: float = 0.002,
                          seed: int = 0) -> List[RenderedFrame]:
    rng = np.random.default_rng(seed)
    return [render_frame(body, p, camera, jitter, rng) for p in poses]


# -- dataset on disk -------------------------------------------------------------------

DEFAULT_SUBJECTS = {
    "s0": dict(scale=1.0, radius_scale=1.0),
    "s1": dict(scale=0.92, radius_scale=1.15),
    "s2": dict(scale=1.06, radius_scale=0.9),
}


def default_subject_specs(overrides: Optional[Dict[str, dict]] = None) -> Dict[str, ToyBodySpec]:
    table = overrides if overrides is not None else DEFAULT_SUBJECTS
    return {sid: ToyBodySpec(**kw) for sid, kw in table.items()}


def write_dataset(root: str, specs: Dict[str, ToyBodySpec], camera: Optional[Camera] = None,
                  n_train: int = 60, n_heldout: int = 10, jitter: float = 0.002, seed: int = 0,
                  roles: Optional[dict] = None, n_keys: int = 20) -> dict:
    """Render every subject and write clouds, poses and evaluation meshes.

    Layout per subject: ``frame_%04d.ply`` (partial cloud), ``poses.json``,
    ``gt/frame_%04d.ply``, ``camera.json``, ``body.json``. Frames
    ``0..n_train-1`` are training frames (a smooth motion through ``n_keys``
    random key poses), the rest are independent random poses held out.
    """
    from .io import save_cloud_ply, save_ply
    from .skeleton import save_pose_sequence

    camera = camera if camera is not None else Camera()
    os.makedirs(root, exist_ok=True)
    subjects = list(specs)
    for i, sid in enumerate(subjects):
        spec = specs[sid]
        body = build_toy_body(spec)
        rng = np.random.default_rng([seed, i])
        poses = pose_sequence(spec, n_train, rng, n_keys) + [random_pose(spec, rng) for _ in range(n_heldout)]
        sdir = os.path.join(root, sid)
        os.makedirs(os.path.join(sdir, "gt"), exist_ok=True)
        frames = render_depth_sequence(body, poses, camera, jitter, seed=int(rng.integers(2**31)))
        for t, fr in enumerate(frames):
            save_cloud_ply(os.path.join(sdir, f"frame_{t:04d}.ply"), fr.cloud)
            save_ply(os.path.join(sdir, "gt", f"frame_{t:04d}.ply"), fr.gt_mesh)
        save_pose_sequence(os.path.join(sdir, "poses.json"), body.skeleton, poses)
        with open(os.path.join(sdir, "camera.json"), "w") as fh:
            json.dump(camera.to_dict(), fh, indent=1)
        with open(os.path.join(sdir, "body.json"), "w") as fh:
            json.dump(spec.to_dict(), fh, indent=1)
        logger.info("subject %s: %d frames, %.0f points/frame", sid, len(frames),
                    np.mean([len(f.cloud) for f in frames]))
    roles = roles if roles is not None else {
        "train_subjects": subjects[:-1] if len(subjects) > 1 else subjects,
        "finetune_subject": subjects[-1] if len(subjects) > 1 else None,
    }
    manifest = {
        "version": 1, "seed": seed, "subjects": subjects, "jitter": jitter,
        "train_frames": list(range(n_train)), "heldout_frames": list(range(n_train, n_train + n_heldout)),
        **roles,
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


@dataclass
class SubjectSequence:
    """Training-side view of one subject: partial clouds and poses only."""

    subject: str
    root: str
    skeleton: Skeleton
    poses: List[Pose]
    camera: Camera
    spec: ToyBodySpec
    _body: Optional[ToyBody] = field(default=None, repr=False)

    @property
    def body(self) -> ToyBody:
        if self._body is None:
            self._body = build_toy_body(self.spec)
        return self._body

    @property
    def skinning(self) -> SkinningField:
        return self.body.field

    def cloud(self, frame: int) -> PointCloud:
        from .io import load_cloud_ply
        return load_cloud_ply(os.path.join(self.root, self.subject, f"frame_{frame:04d}.ply"))


@dataclass
class SynthDataset:
    root: str
    manifest: dict
    subjects: Dict[str, SubjectSequence]

    @property
    def train_frames(self) -> List[int]:
        return list(self.manifest["train_frames"])

    @property
    def heldout_frames(self) -> List[int]:
        return list(self.manifest["heldout_frames"])


def load_dataset(root: str) -> SynthDataset:
    from .skeleton import load_pose_sequence

    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(path) as fh:
        manifest = json.load(fh)
    subjects = {}
    for sid in manifest["subjects"]:
        sdir = os.path.join(root, sid)
        skel, poses, _ = load_pose_sequence(os.path.join(sdir, "poses.json"))
        with open(os.path.join(sdir, "camera.json")) as fh:
            cam = Camera.from_dict(json.load(fh))
        with open(os.path.join(sdir, "body.json")) as fh:
            spec = ToyBodySpec.from_dict(json.load(fh))
        subjects[sid] = SubjectSequence(sid, root, skel, poses, cam, spec)
    return SynthDataset(root, manifest, subjects)


def load_ground_truth(root: str, subject: str, frame: int) -> TriMesh:
    """Evaluation-only full mesh; kept out of :class:`SubjectSequence` on purpose."""
    from .io import load_ply
    return load_ply(os.path.join(root, subject, "gt", f"frame_{frame:04d}.ply"))
