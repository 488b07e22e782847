"""Timing and storage benchmarks: amortised extraction and feature counts."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .extract import extract_fusion_mesh
from .skeleton import Pose
from .surface_field import FeatureCountReport, NeuralSurfaceField, feature_count_report


@dataclass(frozen=True)
class ExtractionBench:
    """Per-frame marching cubes versus one extraction reused for every frame.

    ``baseline_s`` is ``frames * extract_s``; ``amortized_s`` is one
    extraction plus the measured posing time of every frame.
    """

    frames: int
    resolution: int
    n_vertices: int
    extract_s: float
    pose_s: float
    baseline_s: float
    amortized_s: float

    @property
    def speedup(self) -> float:
        return self.baseline_s / self.amortized_s

    def as_dict(self) -> dict:
        return {**asdict(self), "speedup": self.speedup}


def random_poses(n_joints: int, n: int, seed: int = 0, scale: float = 0.5) -> List[Pose]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        aa = rng.uniform(-scale, scale, size=(n_joints, 3))
        aa[0] = (0.0, rng.uniform(-np.pi, np.pi), 0.0)
        out.append(Pose(aa))
    return out


def bench_amortization(model: NeuralSurfaceField, subject: str, frame_counts: Sequence[int], resolution: int = 128,
                       poses: Optional[Sequence[Pose]] = None, seed: int = 0) -> Dict[int, ExtractionBench]:
    """Time one extraction and ``max(frame_counts)`` posings; report each prefix."""
    model._check_subject(subject)
    counts = sorted({int(f) for f in frame_counts})
    if not counts or counts[0] < 1:
        raise ValueError("frame counts must be >= 1")
    n = counts[-1]
    if poses is None:
        poses = random_poses(model.rigs_[subject].skeleton.n_joints, n, seed)
    if len(poses) < n:
        raise ValueError(f"need {n} poses, got {len(poses)}")
    t0 = time.perf_counter()
    mesh = extract_fusion_mesh(model.fusion_, subject, resolution)
    t_mc = time.perf_counter() - t0
    pose_times = []
    for p in poses[:n]:
        t0 = time.perf_counter()
        model.pose_mesh(subject, mesh, p)
        pose_times.append(time.perf_counter() - t0)
    cum = np.cumsum(pose_times)
    return {f: ExtractionBench(f, resolution, mesh.n_vertices, t_mc, float(cum[f - 1] / f), f * t_mc,
                               t_mc + float(cum[f - 1])) for f in counts}


def bench_extraction(model: NeuralSurfaceField, subject: str, frames: int, resolution: int = 128,
                     poses: Optional[Sequence[Pose]] = None, seed: int = 0) -> ExtractionBench:
    return bench_amortization(model, subject, [frames], resolution, poses, seed)[int(frames)]


def format_feature_report(r: FeatureCountReport) -> str:
    return "\n".join([
        f"volume   {r.volume:>9,d}",
        f"triplane {r.triplane:>9,d}",
        f"nsf      {r.surface:>9,d}",
        f"saving vs volume   {100 * r.saving_vs_volume:.1f}%",
        f"saving vs triplane {100 * r.saving_vs_triplane:.1f}%",
    ])


def features_bench(n_vertices: int = 6890, volume_res: int = 64, plane_res: int = 128,
                   feature_dim: int = 64) -> FeatureCountReport:
    return feature_count_report(n_vertices, volume_res, plane_res, feature_dim)
