"""Cycle-consistency training, frozen-decoder fine-tuning, inference-time
refinement, colour lifting and evaluation for :class:`NeuralSurfaceField`.

One training sample is an observed posed point ``x`` with normal ``n``.
Canonicalisation gives ``x_c``; projecting onto the fusion surface gives
``x_cc`` where the surface feature is read. The decoder predicts a
displacement ``d`` and the reconstruction ``x_pp = LBS(x_cc + d)`` must land
back on ``x``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .fusion import FusionShape, TrainingDiverged
from .geometry import PointCloud, TriMesh
from .knn import KnnIndex
from .metrics import chamfer_sym, chamfer_to_mesh, iou_voxel, laplacian_matrix, normal_consistency
from .skeleton import Pose, blend_matrices, canonicalize, forward_kinematics
from .surface_field import NeuralSurfaceField, SubjectRig
from .validation import normalize_rows

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation settings and loss weights for the surface field."""

    epochs: int = 40
    frames_per_step: int = 4
    points_per_frame: int = 2000
    points_per_step: int = 384
    lr_decoder: float = 1e-3
    lr_features: float = 5e-3
    w_point: float = 1.0
    w_normal: float = 0.1
    w_cd: float = 1.0
    w_disp: float = 0.1
    w_feat: float = 1e-3
    w_edr: float = 0.1
    omega: float = 0.01
    max_canonical_sdf: float = 0.1
    seed: int = 0
    log_every: int = 50
    log_path: Optional[str] = None

    def __post_init__(self):
        for name in ("w_point", "w_normal", "w_cd", "w_disp", "w_feat", "w_edr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.omega <= 0:
            raise ValueError("omega must be > 0")
        if self.epochs < 0 or self.frames_per_step < 1 or self.points_per_step < 1:
            raise ValueError("step and batch sizes must be positive")

    @property
    def weights(self) -> Dict[str, float]:
        return {"point": self.w_point, "normal": self.w_normal, "cd": self.w_cd, "disp": self.w_disp,
                "feat": self.w_feat, "edr": self.w_edr}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FrameBatch:
    """One observed frame restricted to points whose canonicalisation converged.

    ``surface`` holds the projections of the canonical points onto the
    subject's fusion surface (filled by :func:`attach_projection`).
    """

    subject: str
    frame: int
    pose: Pose
    observed: PointCloud
    canonical: PointCloud
    surface: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.observed) != len(self.canonical):
            raise ValueError("observed and canonical clouds must align")
        if self.observed.normals is None or self.canonical.normals is None:
            raise ValueError("frames need normals")

    def __len__(self) -> int:
        return len(self.observed)


# -- data preparation -------------------------------------------------------------------

def make_batch(subject: str, frame: int, cloud: PointCloud, pose: Pose, rig: SubjectRig,
               n_points: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> FrameBatch:
    """Subsample, canonicalise and keep converged points."""
    if n_points is not None and len(cloud) > n_points:
        rng = rng if rng is not None else np.random.default_rng(frame)
        cloud = cloud.subset(np.sort(rng.choice(len(cloud), n_points, replace=False)))
    res = canonicalize(cloud, pose, rig.skeleton, rig.skinning)
    keep = res.converged
    return FrameBatch(subject, frame, pose, cloud.subset(keep), res.cloud.subset(keep))


def prepare_batches(dataset, subjects: Iterable[str], frames: Sequence[int], n_points: int = 2000,
                    seed: int = 0) -> List[FrameBatch]:
    """Canonicalised training frames from a :class:`~nsf.synth.SynthDataset`."""
    out = []
    for sid in subjects:
        seq = dataset.subjects[sid]
        rig = SubjectRig(seq.skeleton, seq.skinning)
        for t in frames:
            rng = np.random.default_rng([seed, t, sum(map(ord, sid))])
            out.append(make_batch(sid, t, seq.cloud(t), seq.poses[t], rig, n_points, rng))
    return out


def pooled_canonical(batches: Sequence[FrameBatch]) -> Dict[str, PointCloud]:
    """Canonical oriented points per subject, for fusion training."""
    pts: Dict[str, list] = {}
    for b in batches:
        pts.setdefault(b.subject, []).append(b.canonical)
    return {sid: PointCloud(np.vstack([c.points for c in cs]), np.vstack([c.normals for c in cs]))
            for sid, cs in pts.items()}


def attach_projection(batches: Sequence[FrameBatch], fusion: FusionShape, max_sdf: float = 0.1) -> List[FrameBatch]:
    """Project canonical points onto the fusion surface; drop far outliers."""
    out = []
    for b in batches:
        f = fusion.sdf(b.subject, b.canonical.points)
        keep = np.abs(f) <= max_sdf
        obs, can = b.observed.subset(keep), b.canonical.subset(keep)
        surface = fusion.project(b.subject, can.points) if len(can) else np.zeros((0, 3))
        out.append(FrameBatch(b.subject, b.frame, b.pose, obs, can, surface))
    return out


# -- loss --------------------------------------------------------------------------------

def _unit(rng, n):
    u = rng.normal(size=(n, 3))
    return normalize_rows(u)


def cycle_loss(model: NeuralSurfaceField, batches: Sequence[FrameBatch], cfg: TrainConfig,
               rng: Optional[np.random.Generator] = None, assignments: Optional[dict] = None):
    """Weighted cycle-consistency loss over one or more frames.

    Returns ``(total, terms, assignments)``. ``terms`` holds the unweighted
    means; ``total`` equals ``sum(cfg.weights[k] * terms[k])``.
    ``assignments`` (point subsets, perturbation directions, Chamfer
    neighbours and skinning matrices) can be passed back in to evaluate the
    same loss with every discrete choice frozen, which is what a
    finite-difference check needs.
    """
    if isinstance(batches, FrameBatch):
        batches = [batches]
    if not batches or any(len(b) == 0 for b in batches):
        raise ValueError("empty batch")
    if any(b.surface is None for b in batches):
        raise ValueError("batches need surface projections (attach_projection)")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    fixed = assignments is not None
    asg = assignments if fixed else {"subset": [], "dirs": [], "nn": [], "M": []}
    dec = model.pose_decoder_
    codes = dec.graph_encode([b.pose for b in batches])

    feats, feats_edr, rows, x_obs, n_obs, n_can, x_cc, spans = [], [], [], [], [], [], [], []
    start = 0
    for i, b in enumerate(batches):
        if fixed:
            sel = asg["subset"][i]
            u = asg["dirs"][i]
        else:
            sel = np.arange(len(b)) if len(b) <= cfg.points_per_step else \
                np.sort(rng.choice(len(b), cfg.points_per_step, replace=False))
            u = _unit(rng, len(sel))
            asg["subset"].append(sel)
            asg["dirs"].append(u)
        sf = model.features_[b.subject]
        xs = b.surface[sel]
        feats.append(sf.graph_query(xs))
        feats_edr.append(sf.graph_query(xs + cfg.omega * u))
        rows.append(np.full(len(sel), i))
        x_obs.append(b.observed.points[sel])
        n_obs.append(b.observed.normals[sel])
        n_can.append(b.canonical.normals[sel])
        x_cc.append(xs)
        spans.append((start, start + len(sel)))
        start += len(sel)

    F = ad.concat(feats, axis=0)
    Fe = ad.concat(feats_edr, axis=0)
    rows = np.concatenate(rows)
    x_obs = np.vstack(x_obs)
    n_obs = np.vstack(n_obs)
    n_can = np.vstack(n_can)
    x_cc = np.vstack(x_cc)

    d = dec.graph_displacement(F, codes, rows)
    x_p = d + x_cc
    # skinning matrices at the deformed canonical points, held fixed for the gradient
    if not fixed:
        Ms = []
        for i, b in enumerate(batches):
            lo, hi = spans[i]
            rig = model.rigs_[b.subject]
            T = forward_kinematics(rig.skeleton, b.pose)
            Ms.append(blend_matrices(rig.skinning.query(x_p.data[lo:hi]), T))
        asg["M"] = Ms
    M = np.concatenate(asg["M"], axis=0)
    x_pp = ad.rowwise_matvec(M[:, :3, :3], x_p) + M[:, :3, 3]
    n_pp = normalize_rows(np.linalg.solve(np.transpose(M[:, :3, :3], (0, 2, 1)), n_can[..., None])[..., 0])

    if not fixed:
        nn = []
        for lo, hi in spans:
            _, j = KnnIndex(x_pp.data[lo:hi]).nearest(x_obs[lo:hi])
            nn.append(j + lo)
        asg["nn"] = nn
    nn = np.concatenate(asg["nn"])

    terms_t = {
        "point": ad.norm(x_pp - x_obs).mean(),
        "normal": Tensor(np.mean(np.linalg.norm(n_obs - n_pp, axis=1))),
        "cd": ad.norm(ad.gather_rows(x_pp, nn) - x_obs).mean(),
        "disp": ad.norm(d).mean(),
        "feat": ad.norm(F).mean(),
        "edr": ad.norm(F - Fe).mean(),
    }
    w = cfg.weights
    total = None
    for k, t in terms_t.items():
        part = t * w[k]
        total = part if total is None else total + part
    terms = {k: t.item() for k, t in terms_t.items()}
    terms["total"] = total.item()
    return total, terms, asg


# -- training loops ------------------------------------------------------------------------

def _lr_scale(step: int, n_steps: int) -> float:
    frac = step / max(n_steps, 1)
    return 0.5 ** sum(frac >= b for b in (0.5, 0.75, 0.9))


def _snapshot(params: Sequence[Tensor]) -> List[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: Sequence[Tensor], snap: Sequence[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data = s.copy()


def _optimise(model, batches, cfg, groups, epochs, tag) -> List[dict]:
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(groups)
    params = opt.parameters()
    good = _snapshot(params)
    history: List[dict] = []
    per_epoch = -(-len(batches) // cfg.frames_per_step)
    n_steps = epochs * per_epoch
    log = open(cfg.log_path, "a") if cfg.log_path else None
    try:
        step = 0
        for epoch in range(epochs):
            order = rng.permutation(len(batches))
            for s in range(per_epoch):
                pick = sorted(order[s * cfg.frames_per_step:(s + 1) * cfg.frames_per_step])
                total, terms, _ = cycle_loss(model, [batches[i] for i in pick], cfg, rng)
                if not np.isfinite(terms["total"]):
                    _restore(params, good)
                    raise TrainingDiverged(f"{tag}: non-finite loss at epoch {epoch}; parameters restored to "
                                           f"last finite state; terms {terms}")
                good = _snapshot(params)
                opt.zero_grad()
                total.backward()
                opt.step(_lr_scale(step, n_steps))
                step += 1
                if cfg.log_every and (step % cfg.log_every == 1 or step == n_steps):
                    rec = {"stage": tag, "epoch": epoch, "step": step,
                           **{k: round(v, 8) for k, v in terms.items()}}
                    history.append(rec)
                    logger.info("%s %s", tag, rec)
                    if log:
                        log.write(json.dumps(rec) + "\n")
    finally:
        if log:
            log.close()
    return history


def train_nsf(model: NeuralSurfaceField, batches: Sequence[FrameBatch], cfg: TrainConfig) -> List[dict]:
    """Jointly optimise all subjects' features and the shared pose decoder."""
    if cfg.epochs and not batches:
        raise ValueError("no training frames")
    missing = {b.subject for b in batches} - set(model.features_)
    if missing:
        raise KeyError(f"subjects without features: {sorted(missing)}")
    subjects = sorted({b.subject for b in batches})
    groups = [(model.pose_decoder_.parameters(), cfg.lr_decoder),
              ([model.features_[s].features for s in subjects], cfg.lr_features)]
    hist = _optimise(model, batches, cfg, groups, cfg.epochs, "train")
    model.history_.extend(hist)
    return hist


def finetune_subject(model: NeuralSurfaceField, subject: str, batches: Sequence[FrameBatch], cfg: TrainConfig,
                     epochs: Optional[int] = None) -> List[dict]:
    """Fit one subject's features with the pose decoder frozen."""
    if any(b.subject != subject for b in batches):
        raise ValueError("all fine-tuning frames must belong to the subject")
    model._check_subject(subject)
    before = model.pose_decoder_.checksum()
    epochs = cfg.epochs if epochs is None else epochs
    if epochs and not batches:
        raise ValueError("no fine-tuning frames")
    hist = _optimise(model, batches, cfg, [([model.features_[subject].features], cfg.lr_features)],
                     epochs, "finetune")
    if model.pose_decoder_.checksum() != before:
        raise AssertionError("pose decoder changed during fine-tuning")
    model.history_.extend(hist)
    return hist


# -- inference-time refinement ----------------------------------------------------------------

@dataclass
class RefineResult:
    mesh: TriMesh
    objective: List[float]
    accepted: int


def _posed_vertices(model, subject, feats_param, W, base, code, pose, rig_T, fixed_M=None):
    F = ad.spmm(W, feats_param)
    rows = np.zeros(W.shape[0], dtype=np.int64)
    d = model.pose_decoder_.graph_displacement(F, code, rows)
    x_p = d + base
    M = fixed_M if fixed_M is not None else blend_matrices(model.rigs_[subject].skinning.query(x_p.data), rig_T)
    return ad.rowwise_matvec(M[:, :3, :3], x_p) + M[:, :3, 3], M


def _surface_samples(mesh: TriMesh, n: int, seed: int = 0):
    """Fixed barycentric sample operator ``B`` (n x V) on ``mesh``."""
    import scipy.sparse as sp
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    fid = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    r1, r2 = np.sqrt(rng.random(n)), rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    cols = mesh.faces[fid]
    return sp.csr_matrix((bary.ravel(), cols.ravel(), np.arange(0, 3 * n + 1, 3)), shape=(n, mesh.n_vertices))


def inference_refine(model: NeuralSurfaceField, subject: str, observed, pose: Pose, steps: int = 20,
                     w_lap: float = 10.0, lr: float = 5e-3, n_samples: Optional[int] = None,
                     max_halvings: int = 6, inplace: bool = False) -> RefineResult:
    """Tune one subject's features so the posed basis mesh covers ``observed``.

    Objective: one-sided Chamfer (observation to fixed surface samples of the
    posed mesh) plus ``w_lap`` times the mean squared uniform Laplacian.
    Candidate steps that raise the objective are halved, and dropped after
    ``max_halvings`` tries, so the objective never increases. The pose
    decoder is left untouched; features change only if ``inplace``.
    """
    model._check_subject(subject)
    obs = observed.points if isinstance(observed, PointCloud) else np.asarray(observed, dtype=np.float64)
    mesh = model.meshes_[subject]
    sf = model.features_[subject]
    feats = ad.parameter(sf.features.data)
    base = np.array(mesh.vertices)
    W = sf.interpolation_matrix(model.fusion_.project(subject, base))
    B = _surface_samples(mesh, n_samples or 2 * mesh.n_vertices)
    L = laplacian_matrix(mesh)
    T = forward_kinematics(model.rigs_[subject].skeleton, pose)
    code = model.pose_decoder_.graph_encode([pose])
    code = Tensor(code.data)  # decoder frozen
    dec_sum = model.pose_decoder_.checksum()

    def objective(fixed=None):
        V, M = _posed_vertices(model, subject, feats, W, base, code, pose, T)
        S = ad.spmm(B, V)
        nn = fixed if fixed is not None else KnnIndex(S.data).nearest(obs)[1]
        cd = ad.norm(ad.gather_rows(S, nn) - obs).mean()
        LV = ad.spmm(L, V)
        lap = (LV * LV).sum(axis=1).mean()
        return cd + lap * w_lap, V

    J, V = objective()
    hist = [J.item()]
    accepted = 0
    state = ad.AdamState(lr=lr)
    for _ in range(steps):
        feats.grad = None
        J.backward()
        g = feats.grad
        saved = feats.data.copy()
        m_saved = {k: v.copy() for k, v in state.m.items()}
        v_saved = {k: v.copy() for k, v in state.v.items()}
        t_saved = state.step
        scale = 1.0
        ok = False
        for _ in range(max_halvings + 1):
            state.m = {k: v.copy() for k, v in m_saved.items()}
            state.v = {k: v.copy() for k, v in v_saved.items()}
            state.step = t_saved
            feats.data = saved.copy()
            ad.adam_step([feats], [g], state, lr=lr * scale)
            J_new, V_new = objective()
            if J_new.item() <= hist[-1]:
                ok = True
                break
            scale *= 0.5
        if not ok:
            feats.data = saved
            state.m, state.v, state.step = m_saved, v_saved, t_saved
            J, V = objective()
            continue
        J, V = J_new, V_new
        hist.append(J.item())
        accepted += 1
    if model.pose_decoder_.checksum() != dec_sum:
        raise AssertionError("pose decoder changed during refinement")
    if inplace:
        sf.features.data = feats.data.copy()
    return RefineResult(TriMesh(V.data, mesh.faces, colors=mesh.colors), hist, accepted)


# -- colour lifting ------------------------------------------------------------------------

def lift_colors(model: NeuralSurfaceField, subject: str, frames: Sequence[Tuple[PointCloud, Pose]]) -> TriMesh:
    """Vote observed colours onto the canonical basis mesh.

    Each canonicalised point adds its colour to the basis vertex nearest to
    its surface projection; vertices never hit copy their nearest coloured
    neighbour.
    """
    model._check_subject(subject)
    mesh = model.meshes_[subject]
    rig = model.rigs_[subject]
    index = KnnIndex(mesh.vertices)
    total = np.zeros((mesh.n_vertices, 3))
    count = np.zeros(mesh.n_vertices)
    for cloud, pose in frames:
        if cloud.colors is None or len(cloud) == 0:
            continue
        res = canonicalize(cloud, pose, rig.skeleton, rig.skinning)
        ok = res.converged
        if not np.any(ok):
            continue
        surf = model.fusion_.project(subject, res.cloud.points[ok])
        _, vid = index.nearest(surf)
        np.add.at(total, vid, cloud.colors[ok])
        np.add.at(count, vid, 1.0)
    seen = count > 0
    if not np.any(seen):
        raise ValueError("no coloured input points")
    colors = np.zeros_like(total)
    colors[seen] = total[seen] / count[seen, None]
    if not np.all(seen):
        _, src = KnnIndex(mesh.vertices[seen]).nearest(mesh.vertices[~seen])
        colors[~seen] = colors[seen][src]
    return TriMesh(mesh.vertices, mesh.faces, colors=colors)


# -- evaluation -------------------------------------------------------------------------------

EVAL_COLUMNS = ("frame_id", "cd_cm", "nc", "iou")


def mesh_metrics(pred: TriMesh, gt: TriMesh, n_samples: int = 20000, seed: int = 0,
                 iou_resolution: int = 64) -> Dict[str, float]:
    """Symmetric Chamfer (cm), normal consistency and voxel IoU of two meshes.

    Both meshes are sampled with the same seed, so identical inputs score
    exactly 0 / 1 / 1.
    """
    a = pred.sample_surface(n_samples, seed)
    b = gt.sample_surface(n_samples, seed)
    return {"cd_cm": 100.0 * chamfer_sym(a, b), "nc": normal_consistency(a, b),
            "iou": iou_voxel(pred, gt, iou_resolution)}


def evaluate(model: NeuralSurfaceField, subject: str, poses: Dict[int, Pose], ground_truth: Dict[int, TriMesh],
             out_csv: Optional[str] = None, deform: bool = True, n_samples: int = 20000) -> List[dict]:
    """Per-frame metrics against evaluation meshes, plus a final ``mean`` row."""
    rows = []
    for t in sorted(poses):
        pred = model.pose_mesh(subject, pose=poses[t], deform=deform)
        rows.append({"frame_id": t, **mesh_metrics(pred, ground_truth[t], n_samples, seed=t)})
    if rows:
        rows.append({"frame_id": "mean", **{k: float(np.mean([r[k] for r in rows])) for k in EVAL_COLUMNS[1:]}})
    if out_csv:
        write_metrics_csv(out_csv, rows)
    return rows


def write_metrics_csv(path: str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r["frame_id"]] + [f"{r[k]:.6f}" for k in EVAL_COLUMNS[1:]])


def observation_chamfer(model: NeuralSurfaceField, subject: str, cloud, pose: Pose, deform: bool = True) -> float:
    """Mean distance from observed points to the posed reconstruction surface."""
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return chamfer_to_mesh(pts, model.pose_mesh(subject, pose=pose, deform=deform))


class Stopwatch:
    def __init__(self):
        self.elapsed = 0.0

    def __enter__(self):
        self._t = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed += time.perf_counter() - self._t
        return False
