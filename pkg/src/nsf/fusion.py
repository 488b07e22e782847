"""Latent-conditioned SDF that fuses canonicalised partial scans.

A shared decoder ``f(x, h_s)`` plus one latent code per subject, trained
auto-decoder style (no encoder) on oriented canonical points with an
eikonal penalty. Negative inside, positive outside.
"""
from __future__ import annotations

import logging
import math
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Adam, Mlp, Tensor, geometric_init
from .geometry import Aabb, PointCloud
from .validation import as_points, check_is_fitted

logger = logging.getLogger(__name__)

PROJ_EPS = 1e-4
PROJ_MAX_STEPS = 8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite diagnostics."""


class DegenerateGradient(RuntimeError):
    pass


class FusionShape(BaseEstimator):
    """Per-subject implicit fusion shape with a shared SDF decoder.

    Parameters
    ----------
    hidden : tuple of int
        Hidden widths of the decoder (softplus activations).
    code_dim : int
        Latent code size per subject.
    n_steps : int
        Optimisation steps in :meth:`fit`.
    lambda_eik, lambda_normal : float
        Weights of the eikonal term and of the normal term inside the
        surface loss.
    """

    def __init__(self, hidden=(128, 128, 128, 128), code_dim: int = 256, beta: float = 100.0,
                 init_radius: float = 0.5, sphere_steps: int = 300, n_steps: int = 2000,
                 batch_surface: int = 1024, batch_eikonal: int = 1024, lr: float = 1e-3,
                 lr_code: float = 1e-3, lambda_eik: float = 0.1, lambda_normal: float = 1.0,
                 eik_sigma: float = 0.05, box_pad: float = 0.1, max_code_norm: float = 10.0,
                 seed: int = 0, warm_start: bool = False, log_every: int = 100):
        self.hidden = hidden
        self.code_dim = code_dim
        self.beta = beta
        self.init_radius = init_radius
        self.sphere_steps = sphere_steps
        self.n_steps = n_steps
        self.batch_surface = batch_surface
        self.batch_eikonal = batch_eikonal
        self.lr = lr
        self.lr_code = lr_code
        self.lambda_eik = lambda_eik
        self.lambda_normal = lambda_normal
        self.eik_sigma = eik_sigma
        self.box_pad = box_pad
        self.max_code_norm = max_code_norm
        self.seed = seed
        self.warm_start = warm_start
        self.log_every = log_every

    # -- construction -----------------------------------------------------------
    def initialize(self, subjects: Iterable[str], aabb: Optional[Aabb] = None) -> "FusionShape":
        """Build the decoder (sphere SDF of ``init_radius``) and one code per subject."""
        rng = np.random.default_rng(self.seed)
        widths = [3, *self.hidden, 1]
        self.decoder_ = Mlp(widths, ["softplus"] * len(self.hidden) + ["none"], beta=self.beta, rng=rng)
        geometric_init(self.decoder_, self.init_radius, rng)
        self.code_weight_ = ad.parameter(np.zeros((self.code_dim, widths[1])), name="code_weight")
        self.subjects_: List[str] = list(subjects)
        self.codes_ = ad.parameter(
            rng.normal(0.0, 1.0 / math.sqrt(self.code_dim), size=(len(self.subjects_), self.code_dim)), name="codes")
        self.aabb_ = aabb if aabb is not None else Aabb([-1.0] * 3, [1.0] * 3)
        self.loss_history_: List[dict] = []
        if self.sphere_steps:
            self._fit_sphere(rng)
        return self

    def _fit_sphere(self, rng) -> None:
        """Regress ``|x| - r`` so the initial shape is an accurate sphere."""
        opt = Adam([(self.decoder_.parameters(), 1e-3)])
        span = max(1.2, 1.2 * float(np.max(np.abs(np.r_[self.aabb_.min, self.aabb_.max]))))
        for _ in range(self.sphere_steps):
            # extra mass near the centre where the cone tip is hardest to fit
            x = np.concatenate([rng.uniform(-span, span, size=(512, 3)), rng.normal(0.0, 0.1, size=(128, 3)),
                                rng.normal(0.0, 0.02, size=(128, 3))])
            target = np.linalg.norm(x, axis=1, keepdims=True) - self.init_radius
            loss = ad.absolute(self.decoder_(Tensor(x)) - target).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()

    def add_subject(self, subject: str, seed: int = 0) -> None:
        """Append a fresh latent code (for fitting a new subject)."""
        check_is_fitted(self, "decoder_")
        if subject in self.subjects_:
            raise ValueError(f"subject {subject!r} already registered")
        rng = np.random.default_rng(seed)
        new = rng.normal(0.0, 1.0 / math.sqrt(self.code_dim), size=(1, self.code_dim))
        self.codes_ = ad.parameter(np.vstack([self.codes_.data, new]), name="codes")
        self.subjects_.append(subject)

    def subject_index(self, subject: str) -> int:
        check_is_fitted(self, "decoder_")
        try:
            return self.subjects_.index(subject)
        except ValueError:
            raise KeyError(f"unknown subject {subject!r}") from None

    def code(self, subject: str) -> np.ndarray:
        return self.codes_.data[self.subject_index(subject)].copy()

    def parameters(self) -> List[Tensor]:
        return self.decoder_.parameters() + [self.code_weight_]

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256(self.decoder_.checksum().encode())
        h.update(self.code_weight_.data.tobytes())
        h.update(self.codes_.data.tobytes())
        return h.hexdigest()

    # -- evaluation ----------------------------------------------------------------
    def _code_bias(self, subject: str) -> np.ndarray:
        i = self.subject_index(subject)
        return self.codes_.data[i:i + 1] @ self.code_weight_.data

    def sdf(self, subject: str, x, dtype=np.float64) -> np.ndarray:
        x = as_points(x, allow_empty=True)
        return self.decoder_.evaluate(x, self._code_bias(subject), dtype=dtype)[:, 0].astype(np.float64)

    def sdf_and_grad(self, subject: str, x) -> Tuple[np.ndarray, np.ndarray]:
        x = as_points(x, allow_empty=True)
        return self.decoder_.evaluate_with_grad(x, self._code_bias(subject))

    def sdf_grad(self, subject: str, x) -> np.ndarray:
        return self.sdf_and_grad(subject, x)[1]

    def graph_sdf(self, x: np.ndarray, subject_rows: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Differentiable ``(f, grad_x f)`` for points tagged with subject indices."""
        bias = ad.gather_rows(ad.matmul(self.codes_, self.code_weight_), subject_rows)
        return self.decoder_.forward_with_input_grad(Tensor(x), bias)

    def project(self, subject: str, x, max_steps: int = PROJ_MAX_STEPS, eps: float = PROJ_EPS,
                return_info: bool = False):
        """Move points onto the zero level set along the SDF gradient.

        Iterates ``x <- x - f(x) grad f / |grad f|^2``; a step that would
        increase ``|f|`` is halved (up to 4 times) and otherwise rejected, so
        the residual never grows.
        """
        x = as_points(x, allow_empty=True).copy()
        f, g = self.sdf_and_grad(subject, x)
        history = [np.abs(f).copy()]
        for _ in range(max_steps):
            active = np.abs(f) >= eps
            if not np.any(active):
                break
            a = np.nonzero(active)[0]
            gn2 = np.sum(g[a] ** 2, axis=1)
            if np.any(gn2 < 1e-12):
                raise DegenerateGradient("degenerate gradient")
            delta = -(f[a] / gn2)[:, None] * g[a]
            scale = np.ones(len(a))
            pending = np.arange(len(a))
            for _ in range(5):
                trial = x[a[pending]] + scale[pending, None] * delta[pending]
                ft, gt = self.sdf_and_grad(subject, trial)
                ok = np.abs(ft) <= np.abs(f[a[pending]])
                idx = a[pending[ok]]
                x[idx], f[idx], g[idx] = trial[ok], ft[ok], gt[ok]
                pending = pending[~ok]
                if len(pending) == 0:
                    break
                scale[pending] *= 0.5
            history.append(np.abs(f).copy())
        if return_info:
            return x, {"residual": np.abs(f), "history": np.array(history)}
        return x

    # -- training --------------------------------------------------------------------
    def fit(self, clouds: Mapping[str, PointCloud], y=None) -> "FusionShape":
        """Fuse canonical oriented points per subject into one SDF each.

        ``clouds`` maps subject id to its pooled canonical points with
        canonical normals.
        """
        if not clouds:
            raise ValueError("need at least one subject")
        for sid, c in clouds.items():
            if len(c) == 0 or c.normals is None:
                raise ValueError(f"subject {sid!r} has no oriented points")
        all_pts = np.vstack([c.points for c in clouds.values()])
        if not (self.warm_start and getattr(self, "decoder_", None) is not None):
            self.initialize(list(clouds), Aabb.from_points(all_pts, pad=self.box_pad))
        else:
            for sid in clouds:
                if sid not in self.subjects_:
                    self.add_subject(sid, seed=self.seed + len(self.subjects_))
        train_fusion(self, clouds)
        return self

    def sample_eikonal(self, pts: np.ndarray, rows: np.ndarray, n: int, rng) -> Tuple[np.ndarray, np.ndarray]:
        """Half uniform in the box, half Gaussian around the given surface points."""
        n_box = n // 2
        box = self.aabb_.sample(n_box, rng)
        box_rows = rng.choice(np.unique(rows), size=n_box)
        pick = rng.integers(0, len(pts), size=n - n_box)
        near = pts[pick] + rng.normal(0.0, self.eik_sigma, size=(n - n_box, 3))
        return np.vstack([box, near]), np.concatenate([box_rows, rows[pick]])


def fusion_loss(model: FusionShape, points: np.ndarray, normals: np.ndarray, rows: np.ndarray,
                eik_points: np.ndarray, eik_rows: np.ndarray) -> Tuple[Tensor, Dict[str, float]]:
    """Surface (value + normal) loss plus weighted eikonal loss.

    ``rows`` / ``eik_rows`` give the subject index of every point.
    """
    if len(points) == 0:
        raise ValueError("empty surface batch")
    n = len(points)
    x = np.vstack([points, eik_points]) if len(eik_points) else points
    r = np.concatenate([rows, eik_rows]) if len(eik_points) else rows
    f, g = model.graph_sdf(x, r)
    f_s, g_s = f[:n], g[:n]
    geo_val = ad.absolute(f_s).mean()
    geo_nrm = ad.norm(g_s - normals).mean()
    e_geo = geo_val + model.lambda_normal * geo_nrm
    if len(eik_points):
        e_eik = ad.square(ad.norm(g[n:]) - 1.0).mean()
    else:
        e_eik = Tensor(0.0)
    total = e_geo + model.lambda_eik * e_eik
    terms = {"sdf": geo_val.item(), "normal": geo_nrm.item(), "geo": e_geo.item(),
             "eikonal": e_eik.item(), "total": total.item()}
    return total, terms


def _pool(model: FusionShape, clouds: Mapping[str, PointCloud]):
    pts, nrm, rows = [], [], []
    for sid, c in clouds.items():
        pts.append(c.points)
        nrm.append(c.normals)
        rows.append(np.full(len(c), model.subject_index(sid)))
    return np.vstack(pts), np.vstack(nrm), np.concatenate(rows)


def train_fusion(model: FusionShape, clouds: Mapping[str, PointCloud], n_steps: Optional[int] = None,
                 train_decoder: bool = True) -> List[dict]:
    """Jointly optimise decoder and codes (auto-decoder regime).

    With ``train_decoder=False`` only the latent codes move.
    """
    n_steps = model.n_steps if n_steps is None else n_steps
    pts, nrm, rows = _pool(model, clouds)
    rng = np.random.default_rng(model.seed + 1)
    groups = [([model.codes_], model.lr_code)]
    if train_decoder:
        groups.insert(0, (model.parameters(), model.lr))
    opt = Adam(groups)
    history = model.loss_history_
    last_good = None
    for step in range(n_steps):
        # step decay: x0.5 at 50%, 75%, 90% of the schedule
        frac = step / max(n_steps, 1)
        scale = 0.5 ** sum(frac >= b for b in (0.5, 0.75, 0.9))
        pick = rng.integers(0, len(pts), size=min(model.batch_surface, len(pts)))
        ex, er = model.sample_eikonal(pts[pick], rows[pick], model.batch_eikonal, rng)
        loss, terms = fusion_loss(model, pts[pick], nrm[pick], rows[pick], ex, er)
        if not np.isfinite(terms["total"]):
            raise TrainingDiverged(f"non-finite fusion loss at step {step}; last finite terms: {last_good}")
        last_good = terms
        opt.zero_grad()
        loss.backward()
        opt.step(scale)
        norms = np.linalg.norm(model.codes_.data, axis=1, keepdims=True)
        model.codes_.data *= np.minimum(1.0, model.max_code_norm / np.maximum(norms, 1e-12))
        if model.log_every and (step % model.log_every == 0 or step == n_steps - 1):
            history.append({"step": step, **terms})
            logger.info("fusion step %d: %s", step, {k: round(v, 5) for k, v in terms.items()})
    return history


# -- functional surface ---------------------------------------------------------------

def sdf_eval(model: FusionShape, subject: str, x) -> np.ndarray:
    return model.sdf(subject, x)


def sdf_grad(model: FusionShape, subject: str, x) -> np.ndarray:
    return model.sdf_grad(subject, x)


def project_to_surface(model: FusionShape, subject: str, x, max_steps: int = PROJ_MAX_STEPS,
                       eps: float = PROJ_EPS) -> np.ndarray:
    return model.project(subject, x, max_steps=max_steps, eps=eps)


# -- persistence ---------------------------------------------------------------------

def fusion_state(model: FusionShape) -> Dict[str, np.ndarray]:
    """Named tensors for the ``NSF1`` container (decoder input = xyz + code)."""
    check_is_fitted(model, "decoder_")
    out: Dict[str, np.ndarray] = {}
    for name, p in model.decoder_.named_parameters("shape/").items():
        out[name] = p.data
    out["shape/w0"] = np.vstack([model.decoder_.weights[0].data, model.code_weight_.data])
    for i, sid in enumerate(model.subjects_):
        out[f"code/{sid}"] = model.codes_.data[i]
    out["fusion/aabb"] = np.vstack([model.aabb_.min, model.aabb_.max])
    return out


def fusion_from_state(arrays: Mapping[str, np.ndarray], **params) -> FusionShape:
    w0 = np.asarray(arrays["shape/w0"])
    subjects = [k[len("code/"):] for k in arrays if k.startswith("code/")]
    code_dim = w0.shape[0] - 3
    model = FusionShape(code_dim=code_dim, **params)
    dec = Mlp.from_arrays({**arrays, "shape/w0": w0[:3]}, "shape/",
                          lambda n: ["softplus"] * (n - 1) + ["none"], beta=model.beta)
    model.hidden = tuple(dec.widths[1:-1])
    model.decoder_ = dec
    model.code_weight_ = ad.parameter(w0[3:], name="code_weight")
    model.subjects_ = subjects
    model.codes_ = ad.parameter(np.vstack([np.asarray(arrays[f"code/{s}"]).reshape(1, -1) for s in subjects]),
                                name="codes")
    box = np.asarray(arrays["fusion/aabb"])
    model.aabb_ = Aabb(box[0], box[1])
    model.loss_history_ = []
    return model
