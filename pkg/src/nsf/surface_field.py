"""Neural surface field: learnable features on the fusion surface plus a
pose-conditioned deformation decoder.

Features live on the vertices of the extracted fusion mesh (the basis). A
query point on the surface reads a normalised inverse-distance blend of its
three nearest basis features; points off the surface are first projected
onto it. The decoder maps (feature, pose embedding) to a canonical
displacement, and posing finishes with linear blend skinning.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Mlp, Tensor
from .fusion import FusionShape, fusion_from_state, fusion_state
from .geometry import TriMesh
from .knn import KnnIndex
from .skeleton import Pose, Skeleton, SkinningField, blend_matrices, forward_kinematics, apply_affine
from .validation import as_points, check_is_fitted

N_INTERP = 3


# -- surface features -------------------------------------------------------------------

class SurfaceFeatures:
    """One trainable ``dim``-vector per basis point, with a k-NN index."""

    def __init__(self, basis_points, features):
        b = as_points(basis_points)
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or len(f) != len(b):
            raise ValueError(f"{len(b)} basis points but feature matrix of shape {f.shape}")
        b = b.copy()
        b.setflags(write=False)
        self.basis_points = b
        self.features = ad.parameter(f, name="features")
        self.index = KnnIndex(b)

    def __len__(self) -> int:
        return len(self.basis_points)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def weights(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Indices and normalised inverse-distance weights of the 3 nearest basis points."""
        if len(self) < N_INTERP:
            raise ValueError(f"need at least {N_INTERP} basis points, have {len(self)}")
        x = as_points(x, allow_empty=True)
        d, idx = self.index.query(x, N_INTERP)
        exact = d[:, 0] <= 1e-12
        inv = 1.0 / np.maximum(d, 1e-300)
        inv[exact] = (1.0, 0.0, 0.0)
        w = inv / inv.sum(axis=1, keepdims=True)
        return idx, w

    def interpolation_matrix(self, x) -> sp.csr_matrix:
        idx, w = self.weights(x)
        n = len(idx)
        return sp.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, N_INTERP * n + 1, N_INTERP)),
                             shape=(n, len(self)))

    def query(self, x) -> np.ndarray:
        idx, w = self.weights(x)
        return np.einsum("nk,nkd->nd", w, self.features.data[idx])

    def graph_query(self, x=None, matrix: Optional[sp.csr_matrix] = None) -> Tensor:
        """Differentiable lookup; pass a precomputed ``matrix`` to reuse assignments."""
        W = matrix if matrix is not None else self.interpolation_matrix(x)
        return ad.spmm(W, self.features)


def init_features(mesh: TriMesh, dim: int = 64, seed: int = 0, std: float = 0.01) -> SurfaceFeatures:
    """Features ``N(0, std^2)`` on every vertex of ``mesh``."""
    if mesh.n_vertices == 0:
        raise ValueError("cannot place features on an empty mesh")
    rng = np.random.default_rng(seed)
    return SurfaceFeatures(mesh.vertices, rng.normal(0.0, std, size=(mesh.n_vertices, dim)))


def query_feature(features: SurfaceFeatures, x):
    """``(feature, indices, weights)`` for each query point."""
    idx, w = features.weights(x)
    return np.einsum("nk,nkd->nd", w, features.features.data[idx]), idx, w


# -- pose decoder ------------------------------------------------------------------------

def pose_vector(pose: Pose) -> np.ndarray:
    """Flattened non-root axis-angles; the global root transform is left to LBS."""
    return np.asarray(pose.axis_angle[1:], dtype=np.float64).reshape(1, -1)


class PoseDecoder:
    """Pose encoder MLP and displacement MLP, shared by all subjects.

    The last displacement layer starts at zero, so a fresh decoder
    predicts no deformation.
    """

    def __init__(self, n_joints: int, feature_dim: int = 64, pose_dim: int = 64,
                 encoder_hidden=(64,), decoder_hidden=(128, 128, 128, 128), beta: float = 100.0,
                 seed: int = 0, zero_last: bool = True):
        rng = np.random.default_rng(seed)
        n_in = 3 * max(n_joints - 1, 1)
        enc_w = [n_in, *encoder_hidden, pose_dim]
        self.encoder = Mlp(enc_w, ["softplus"] * (len(enc_w) - 2) + ["none"], beta=beta, rng=rng)
        dec_w = [feature_dim + pose_dim, *decoder_hidden, 3]
        self.decoder = Mlp(dec_w, ["softplus"] * (len(dec_w) - 2) + ["none"], beta=beta, rng=rng)
        if zero_last:
            self.decoder.weights[-1].data[:] = 0.0
            self.decoder.biases[-1].data[:] = 0.0
        self.n_joints = n_joints
        self.feature_dim = feature_dim
        self.pose_dim = pose_dim

    def parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def checksum(self) -> str:
        return hashlib.sha256((self.encoder.checksum() + self.decoder.checksum()).encode()).hexdigest()

    def _pose_input(self, pose: Pose) -> np.ndarray:
        if pose.n_joints != self.n_joints:
            raise ValueError(f"pose has {pose.n_joints} joints, decoder expects {self.n_joints}")
        v = pose_vector(pose)
        return v if v.shape[1] else np.zeros((1, 3))

    def encode(self, pose: Pose) -> np.ndarray:
        return self.encoder.evaluate(self._pose_input(pose))[0]

    def graph_encode(self, poses: List[Pose]) -> Tensor:
        return self.encoder(Tensor(np.vstack([self._pose_input(p) for p in poses])))

    def graph_displacement(self, feats: Tensor, pose_codes: Tensor, rows: np.ndarray) -> Tensor:
        """Displacements for features ``feats`` whose pose code is ``pose_codes[rows]``."""
        return self.decoder(ad.concat([feats, ad.gather_rows(pose_codes, rows)], axis=1))

    def displacement(self, feats: np.ndarray, pose: Pose) -> np.ndarray:
        code = np.broadcast_to(self.encode(pose), (len(feats), self.pose_dim))
        return self.decoder.evaluate(np.hstack([feats, code]))

    def state(self, prefix: str = "pose/") -> Dict[str, np.ndarray]:
        out = {f"{prefix}enc/{k}": p.data for k, p in self.encoder.named_parameters().items()}
        out.update({f"{prefix}dec/{k}": p.data for k, p in self.decoder.named_parameters().items()})
        return out

    @classmethod
    def from_state(cls, arrays, n_joints: int, beta: float = 100.0, prefix: str = "pose/") -> "PoseDecoder":
        obj = cls.__new__(cls)
        acts = lambda n: ["softplus"] * (n - 1) + ["none"]  # noqa: E731
        obj.encoder = Mlp.from_arrays(arrays, f"{prefix}enc/", acts, beta=beta)
        obj.decoder = Mlp.from_arrays(arrays, f"{prefix}dec/", acts, beta=beta)
        obj.n_joints = n_joints
        obj.pose_dim = obj.encoder.widths[-1]
        obj.feature_dim = obj.decoder.widths[0] - obj.pose_dim
        return obj


# -- feature-count arithmetic -------------------------------------------------------------

@dataclass(frozen=True)
class FeatureCountReport:
    volume: int
    triplane: int
    surface: int
    feature_dim: int

    @property
    def saving_vs_volume(self) -> float:
        return 1.0 - self.surface / self.volume

    @property
    def saving_vs_triplane(self) -> float:
        return 1.0 - self.surface / self.triplane

    def as_dict(self) -> dict:
        return {"volume": self.volume, "triplane": self.triplane, "nsf": self.surface,
                "saving_vs_volume_pct": round(100 * self.saving_vs_volume, 1),
                "saving_vs_triplane_pct": round(100 * self.saving_vs_triplane, 1),
                "floats_volume": self.volume * self.feature_dim,
                "floats_triplane": self.triplane * self.feature_dim,
                "floats_nsf": self.surface * self.feature_dim}


def feature_count_report(n_vertices: int, volume_res: int, plane_res: int, feature_dim: int = 64) -> FeatureCountReport:
    """Feature vectors needed by a dense volume, a triplane and a surface field."""
    if volume_res < 1 or plane_res < 1 or n_vertices < 0:
        raise ValueError("resolutions must be positive")
    return FeatureCountReport(int(volume_res) ** 3, 3 * int(plane_res) ** 2, int(n_vertices), int(feature_dim))


# -- the model -----------------------------------------------------------------------------

@dataclass
class SubjectRig:
    """Per-subject articulation: skeleton and skinning-weight field."""

    skeleton: Skeleton
    skinning: SkinningField


class NeuralSurfaceField(BaseEstimator):
    """Pose-dependent surface model over per-subject fusion shapes.

    Parameters
    ----------
    feature_dim : int
        Channels per surface feature.
    pose_dim : int
        Size of the pose embedding.
    encoder_hidden, decoder_hidden : tuple of int
        Hidden widths of the pose encoder and the displacement decoder.
    mesh_resolution : int
        Marching-cubes resolution of the basis mesh.
    """

    def __init__(self, feature_dim: int = 64, pose_dim: int = 64, encoder_hidden=(64,),
                 decoder_hidden=(128, 128, 128, 128), beta: float = 100.0, mesh_resolution: int = 64,
                 feature_std: float = 0.01, seed: int = 0):
        self.feature_dim = feature_dim
        self.pose_dim = pose_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.beta = beta
        self.mesh_resolution = mesh_resolution
        self.feature_std = feature_std
        self.seed = seed

    # -- setup ---------------------------------------------------------------------------
    def initialize(self, fusion: FusionShape, rigs: Dict[str, SubjectRig], meshes: Optional[Dict[str, TriMesh]] = None,
                   cache=None) -> "NeuralSurfaceField":
        """Attach a trained fusion model, extract basis meshes and draw features."""
        from .extract import extract_fusion_mesh

        check_is_fitted(fusion, "decoder_")
        if not rigs:
            raise ValueError("need at least one subject")
        n_joints = {r.skeleton.n_joints for r in rigs.values()}
        if len(n_joints) != 1:
            raise ValueError("all subjects must share the joint count")
        self.fusion_ = fusion
        self.rigs_: Dict[str, SubjectRig] = dict(rigs)
        self.pose_decoder_ = PoseDecoder(n_joints.pop(), self.feature_dim, self.pose_dim, self.encoder_hidden,
                                         self.decoder_hidden, self.beta, seed=self.seed)
        self.meshes_: Dict[str, TriMesh] = {}
        self.features_: Dict[str, SurfaceFeatures] = {}
        for i, sid in enumerate(rigs):
            mesh = (meshes or {}).get(sid)
            if mesh is None:
                mesh = extract_fusion_mesh(fusion, sid, self.mesh_resolution, cache=cache)
            self.meshes_[sid] = mesh
            self.features_[sid] = init_features(mesh, self.feature_dim, seed=self.seed + 1000 + i,
                                                std=self.feature_std)
        self.history_: List[dict] = []
        return self

    def add_subject(self, subject: str, rig: SubjectRig, mesh: Optional[TriMesh] = None, cache=None) -> None:
        from .extract import extract_fusion_mesh

        check_is_fitted(self, "pose_decoder_")
        if rig.skeleton.n_joints != self.pose_decoder_.n_joints:
            raise ValueError("subject skeleton does not match the decoder's joint count")
        if mesh is None:
            mesh = extract_fusion_mesh(self.fusion_, subject, self.mesh_resolution, cache=cache)
        self.rigs_[subject] = rig
        self.meshes_[subject] = mesh
        self.features_[subject] = init_features(mesh, self.feature_dim, seed=self.seed + 1000 + len(self.features_),
                                                std=self.feature_std)

    def fit(self, batches, y=None, config=None, fusion: Optional[FusionShape] = None,
            rigs: Optional[Dict[str, SubjectRig]] = None) -> "NeuralSurfaceField":
        """Train on projected :class:`~nsf.train.FrameBatch` frames (see :func:`nsf.train.train_nsf`).

        ``fusion`` and ``rigs`` are needed on the first call only.
        """
        from .train import TrainConfig, train_nsf

        if fusion is not None or not hasattr(self, "pose_decoder_"):
            if fusion is None or rigs is None:
                raise ValueError("first fit needs the fusion model and subject rigs")
            self.initialize(fusion, rigs)
        train_nsf(self, batches, config or TrainConfig())
        return self

    @property
    def subjects(self) -> List[str]:
        check_is_fitted(self, "features_")
        return list(self.features_)

    def _check_subject(self, subject: str) -> None:
        check_is_fitted(self, "features_")
        if subject not in self.features_:
            raise KeyError(f"unknown subject {subject!r}")

    def checksum(self) -> str:
        check_is_fitted(self, "pose_decoder_")
        h = hashlib.sha256(self.pose_decoder_.checksum().encode())
        for sid in sorted(self.features_):
            h.update(self.features_[sid].features.data.tobytes())
        h.update(self.fusion_.checksum().encode())
        return h.hexdigest()

    def parameters(self) -> List[Tensor]:
        return self.pose_decoder_.parameters() + [f.features for f in self.features_.values()]

    # -- queries -------------------------------------------------------------------------
    def encode_pose(self, pose: Pose) -> np.ndarray:
        check_is_fitted(self, "pose_decoder_")
        return self.pose_decoder_.encode(pose)

    def displacement_on_surface(self, subject: str, x_cc, pose: Pose) -> np.ndarray:
        """Decoder output for points already on the fusion surface."""
        self._check_subject(subject)
        return self.pose_decoder_.displacement(self.features_[subject].query(x_cc), pose)

    def _surface_lookup(self, subject: str, x: np.ndarray):
        """Surface projection and feature interpolation operator of ``x``.

        Neither depends on the pose, so they are cached for the last few
        point sets; posing the same mesh again only reruns the decoder and
        skinning.
        """
        sf = self.features_[subject]
        key = (subject, id(sf), hashlib.sha1(x.tobytes()).hexdigest(), self.fusion_.checksum())
        cache = self.__dict__.setdefault("_lookup_cache", {})
        hit = cache.get(key)
        if hit is None:
            x_cc = self.fusion_.project(subject, x)
            hit = (x_cc, sf.interpolation_matrix(x_cc), sf)
            if len(cache) >= 8:
                cache.pop(next(iter(cache)))
            cache[key] = hit
        return hit[0], hit[1]

    def deform_points(self, subject: str, points, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
        """Canonical points to pose-deformed canonical points.

        Each point is projected onto the fusion surface, its feature is
        lifted from there, and the decoded displacement is added to the
        original point. Returns ``(deformed, displacement)``.
        """
        self._check_subject(subject)
        x = as_points(points, allow_empty=True)
        if len(x) == 0:
            return x.copy(), x.copy()
        _, W = self._surface_lookup(subject, x)
        d = self.pose_decoder_.displacement(W @ self.features_[subject].features.data, pose)
        return x + d, d

    def skin(self, subject: str, points, pose: Pose) -> np.ndarray:
        rig = self.rigs_[subject]
        T = forward_kinematics(rig.skeleton, pose)
        return apply_affine(blend_matrices(rig.skinning.query(points), T), as_points(points, allow_empty=True))

    def pose_mesh(self, subject: str, mesh: Optional[TriMesh] = None, pose: Optional[Pose] = None,
                  deform: bool = True) -> TriMesh:
        """Pose a canonical mesh of this subject (any resolution); faces are copied.

        ``deform=False`` skips the learned displacement (fusion shape + LBS only).
        """
        self._check_subject(subject)
        mesh = self.meshes_[subject] if mesh is None else mesh
        if pose is None:
            raise ValueError("pose is required")
        xp = self.deform_points(subject, mesh.vertices, pose)[0] if deform else np.array(mesh.vertices)
        return TriMesh(self.skin(subject, xp, pose), mesh.faces, colors=mesh.colors)

    def feature_count_report(self, subject: str, volume_res: int = 64, plane_res: int = 128) -> FeatureCountReport:
        self._check_subject(subject)
        return feature_count_report(len(self.features_[subject]), volume_res, plane_res, self.feature_dim)

    # -- persistence -----------------------------------------------------------------------
    def state(self) -> Dict[str, np.ndarray]:
        check_is_fitted(self, "pose_decoder_")
        out = dict(fusion_state(self.fusion_))
        out.update(self.pose_decoder_.state())
        out["nsf/mesh_resolution"] = np.array([self.mesh_resolution], dtype=np.float64)
        for sid, feats in self.features_.items():
            out[f"feat/{sid}"] = feats.features.data
            out[f"basis/{sid}"] = feats.basis_points
            out[f"faces/{sid}"] = self.meshes_[sid].faces.astype(np.float64)
            rig = self.rigs_[sid]
            out[f"skel/{sid}/parents"] = np.asarray(rig.skeleton.parents, dtype=np.float64)
            out[f"skel/{sid}/offsets"] = rig.skeleton.offsets
            out[f"skin/{sid}/points"] = rig.skinning.basis_points
            out[f"skin/{sid}/weights"] = rig.skinning.basis_weights
        return out

    def save(self, path) -> None:
        ad.save_tensors(path, self.state())

    @classmethod
    def from_state(cls, arrays, **params) -> "NeuralSurfaceField":
        subjects = [k[len("feat/"):] for k in arrays if k.startswith("feat/")]
        model = cls(**params)
        if "nsf/mesh_resolution" in arrays and "mesh_resolution" not in params:
            model.mesh_resolution = int(round(float(np.asarray(arrays["nsf/mesh_resolution"]).ravel()[0])))
        model.fusion_ = fusion_from_state(arrays)
        model.rigs_, model.meshes_, model.features_ = {}, {}, {}
        for sid in subjects:
            parents = tuple(int(round(p)) for p in np.asarray(arrays[f"skel/{sid}/parents"]).ravel())
            skel = Skeleton(parents, arrays[f"skel/{sid}/offsets"])
            w = np.asarray(arrays[f"skin/{sid}/weights"])
            w = w / w.sum(axis=1, keepdims=True)  # re-normalise after f32 storage
            model.rigs_[sid] = SubjectRig(skel, SkinningField(arrays[f"skin/{sid}/points"], w))
            basis = np.asarray(arrays[f"basis/{sid}"])
            faces = np.rint(np.asarray(arrays[f"faces/{sid}"])).astype(np.int64).reshape(-1, 3)
            model.meshes_[sid] = TriMesh(basis, faces)
            model.features_[sid] = SurfaceFeatures(basis, arrays[f"feat/{sid}"])
        n_joints = model.rigs_[subjects[0]].skeleton.n_joints if subjects else 1
        model.pose_decoder_ = PoseDecoder.from_state(arrays, n_joints, beta=model.beta)
        model.feature_dim = model.pose_decoder_.feature_dim
        model.pose_dim = model.pose_decoder_.pose_dim
        model.encoder_hidden = tuple(model.pose_decoder_.encoder.widths[1:-1])
        model.decoder_hidden = tuple(model.pose_decoder_.decoder.widths[1:-1])
        model.history_ = []
        return model

    @classmethod
    def load(cls, path, **params) -> "NeuralSurfaceField":
        return cls.from_state(ad.load_tensors(path), **params)


def deform_points(model: NeuralSurfaceField, subject: str, points, pose: Pose):
    return model.deform_points(subject, points, pose)


def pose_mesh(model: NeuralSurfaceField, subject: str, mesh: TriMesh, pose: Pose) -> TriMesh:
    return model.pose_mesh(subject, mesh, pose)


def encode_pose(model: NeuralSurfaceField, pose: Pose) -> np.ndarray:
    return model.encode_pose(pose)
