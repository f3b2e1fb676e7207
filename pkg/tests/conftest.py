from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np
import pytest

from AutoCal.camera import CameraIntrinsics, project_batch, unproject
from AutoCal.factors import Landmark, Measurement
from AutoCal.liegroups import PoseSE3, so3_exp
from AutoCal.settings import Settings
from AutoCal.sim import GroundTruth, Keyframe, KeyframeStream, Scenario, generate
from AutoCal.solver import Problem
from AutoCal.store import MapStore

TRUE_INTRINSICS = CameraIntrinsics(300.0, 300.0, 320.0, 240.0, 0.9)
WIDTH, HEIGHT = 640, 480


@dataclass
class Synthetic:
    problem: Problem
    poses: Dict[int, PoseSE3]
    landmarks: Dict[int, Landmark]
    measurements: List[Measurement]
    intrinsics: CameraIntrinsics


def make_synthetic(seed: int = 0, n_poses: int = 5, n_landmarks: int = 80, noise: float = 0.0,
                   sigma: float = 0.5, intrinsics: CameraIntrinsics = TRUE_INTRINSICS) -> Synthetic:
    """Landmarks anchored in frame 0, observed from laterally displaced, slightly rotated cameras."""
    rng = np.random.default_rng(seed)
    poses = {0: PoseSE3.identity()}
    for i in range(1, n_poses):
        R = so3_exp(rng.normal(scale=0.06, size=3))
        t = np.array([0.35 * i, 0.1 * rng.normal(), 0.15 * rng.normal()])
        poses[i] = PoseSE3(R, t)

    landmarks: Dict[int, Landmark] = {}
    measurements: List[Measurement] = []
    for lid in range(n_landmarks):
        px = np.array([rng.uniform(30.0, WIDTH - 30.0), rng.uniform(30.0, HEIGHT - 30.0)])
        rng_range = rng.uniform(4.0, 12.0)
        X = unproject(intrinsics, px) * rng_range
        seen: List[Measurement] = []
        for f in range(1, n_poses):
            T = poses[f]
            pc = T.rotation.T @ (X - T.translation)
            e = rng.normal(size=2)
            if pc[2] <= 0.5:
                continue
            uv = project_batch(intrinsics, pc[None])[0]
            if not (0.0 <= uv[0] < WIDTH and 0.0 <= uv[1] < HEIGHT):
                continue
            seen.append(Measurement(lid, f, uv + noise * e, sigma))
        if seen:
            landmarks[lid] = Landmark(0, px, 1.0 / rng_range)
            measurements.extend(seen)

    gauge = min(landmarks)
    problem = Problem(
        poses=dict(poses), landmarks=dict(landmarks), measurements=list(measurements),
        intrinsics=intrinsics, active_poses=list(range(1, n_poses)),
        active_landmarks=[l for l in landmarks if l != gauge], intrinsics_active=True,
    )
    return Synthetic(problem, poses, landmarks, measurements, intrinsics)


def synthetic_store(syn: Synthetic) -> MapStore:
    store = MapStore()
    for f in sorted(syn.poses):
        new = {l: lm for l, lm in syn.landmarks.items() if lm.ref_frame_id == f}
        store.add_keyframe(f, syn.poses[f], new, [m for m in syn.measurements if m.frame_id == f])
    return store


def add_truth_keyframe(store: MapStore, kf: Keyframe, truth: GroundTruth) -> None:
    """Insert a simulated keyframe with ground-truth pose and inverse depths."""
    new = {tid: truth.landmarks[tid] for tid in kf.references}
    store.add_keyframe(kf.frame_id, truth.poses[kf.frame_id], new, kf.measurements)


def store_from_truth(stream: KeyframeStream, truth: GroundTruth) -> MapStore:
    store = MapStore()
    for kf in stream:
        add_truth_keyframe(store, kf, truth)
    return store


# ---------------- fixtures ----------------
@pytest.fixture
def synthetic() -> Synthetic:
    return make_synthetic()


@pytest.fixture(scope="session")
def small_scenario() -> Scenario:
    return Scenario(name="small", seed=3, path="line", path_length=8.0,
                    noise_sigma=0.0, outlier_fraction=0.0)


@pytest.fixture(scope="session")
def small_world(small_scenario):
    return generate(small_scenario)


@pytest.fixture
def small_store(small_world) -> MapStore:
    stream, truth = small_world
    return store_from_truth(stream, truth)


@pytest.fixture
def settings() -> Settings:
    return Settings(_env_file=None)
