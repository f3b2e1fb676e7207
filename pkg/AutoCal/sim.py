# sim.py — deterministic synthetic world: trajectories, landmark fields, tracks, keyframes, zoom events
"""
All randomness comes from numpy's Philox counter-based generator seeded with the
scenario seed (zoom refills use the seed sequence [seed, n_star]).  The bit
stream is fixed for a given numpy version; requirements.txt pins it.

World frame is z-up.  Cameras follow the usual x-right, y-down, z-forward
convention.  Track ids are assigned in order of appearance and are distinct
from the indices of the world points they follow.  The first observation of a
track (its reference pixel) is exact; later observations carry noise.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Set, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.spatial.transform import Rotation

from .camera import CameraIntrinsics, project_batch
from .errors import InfeasibleScenario, ScenarioParseError
from .factors import Landmark, Measurement
from .liegroups import PoseSE3, so3_exp

logger = logging.getLogger(__name__)

__all__ = [
    "Scenario", "Keyframe", "KeyframeStream", "GroundTruth",
    "generate", "inject_zoom", "degenerate_motion", "pose_at",
    "load_scenario", "dump_stream", "load_stream",
]

UP = np.array([0.0, 0.0, 1.0])
CAMERA_HEIGHT = 1.5
MIN_DEPTH = 0.5
PATH_MARGIN = 10.0


# ---------------- scenario ----------------
class Scenario(BaseModel):
    """Everything that determines a synthetic run. Key=value scenario files map onto these fields."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "default"
    seed: int = 7
    motion: Literal["rich", "pure_rotation", "stationary"] = "rich"
    path: Literal["circle", "line"] = "circle"
    path_length: float = Field(default=60.0, gt=0.0)
    max_keyframes: Optional[int] = Field(default=None, ge=1)
    step: float = Field(default=0.02, gt=0.0)

    landmark_density: float = Field(default=0.1, gt=0.0)
    tube_inner_radius: float = Field(default=3.0, gt=0.0)
    tube_outer_radius: float = Field(default=12.0, gt=0.0)
    max_range: float = Field(default=40.0, gt=0.0)

    noise_sigma: float = Field(default=0.5, ge=0.0)
    outlier_fraction: float = Field(default=0.02, ge=0.0, le=1.0)
    pixel_sigma_floor: float = Field(default=0.1, gt=0.0)

    width: int = Field(default=640, gt=0)
    height: int = Field(default=480, gt=0)
    fx: float = Field(default=300.0, gt=0.0)
    fy: float = Field(default=300.0, gt=0.0)
    cx: float = 320.0
    cy: float = 240.0
    w: float = Field(default=0.9, ge=0.0, lt=np.pi)

    zoom_frame: Optional[int] = Field(default=None, ge=1)
    zoom_fraction: Optional[float] = Field(default=None, gt=0.0, lt=1.0)   # zoom at this share of the keyframes
    zoom_scale: float = Field(default=2.0, gt=0.0)

    keyframe_rotation: float = Field(default=0.1, gt=0.0)
    keyframe_translation: float = Field(default=0.2, gt=0.0)
    keyframe_track_loss: float = Field(default=0.2, gt=0.0, le=1.0)
    target_tracks: int = Field(default=128, ge=8)
    min_landmarks: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _check_tube(self):
        if self.tube_outer_radius <= self.tube_inner_radius:
            raise ValueError("tube_outer_radius must exceed tube_inner_radius")
        return self

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.w)

    @property
    def sigma(self) -> float:
        return self.noise_sigma if self.noise_sigma > 0.0 else self.pixel_sigma_floor


def load_scenario(path: Union[str, Path], **overrides) -> Scenario:
    """Parse a key=value scenario file (comments with #); `overrides` win over the file."""
    p = Path(path)
    if not p.is_file():
        raise ScenarioParseError(f"scenario file not found: {p}", reason="scenario_not_found")
    raw = {k.strip().lower(): v for k, v in dotenv_values(p).items() if v is not None and v != ""}
    raw.setdefault("name", p.stem)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Scenario.model_validate(raw)
    except ValidationError as e:
        raise ScenarioParseError(f"{p}: {e.errors()[0]['loc']}: {e.errors()[0]['msg']}") from e


# ---------------- stream / truth ----------------
@dataclass(frozen=True)
class Keyframe:
    frame_id: int
    pose: PoseSE3                               # ground-truth camera-to-world
    references: Dict[int, np.ndarray]           # track id -> reference pixel (new landmarks)
    measurements: Tuple[Measurement, ...]       # observations of earlier tracks

    @property
    def n_tracks(self) -> int:
        return len(self.references) + len(self.measurements)


@dataclass
class KeyframeStream:
    keyframes: List[Keyframe]
    width: int
    height: int

    def __len__(self) -> int:
        return len(self.keyframes)

    def __iter__(self) -> Iterator[Keyframe]:
        return iter(self.keyframes)

    def __getitem__(self, i: int) -> Keyframe:
        return self.keyframes[i]


@dataclass
class GroundTruth:
    scenario: Scenario
    world: np.ndarray                                   # (N, 3) world points
    poses: Dict[int, PoseSE3] = field(default_factory=dict)
    track_point: Dict[int, int] = field(default_factory=dict)
    landmarks: Dict[int, Landmark] = field(default_factory=dict)
    noise: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    outliers: Set[Tuple[int, int]] = field(default_factory=set)
    timeline: List[Tuple[int, CameraIntrinsics]] = field(default_factory=list)
    path_length: float = 0.0

    def intrinsics_at(self, frame_id: int) -> CameraIntrinsics:
        current = self.timeline[0][1]
        for start, intr in self.timeline:
            if start <= frame_id:
                current = intr
        return current


def _rng(seed: int, *extra: int) -> np.random.Generator:
    if extra:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *extra])))
    return np.random.Generator(np.random.Philox(seed))


# ---------------- trajectories ----------------
def _centerline(s: float, sc: Scenario) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Position, forward heading and left normal of the unperturbed path at arc length s."""
    if sc.path == "line":
        return np.array([s, 0.0, CAMERA_HEIGHT]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    rc = sc.path_length / (2.0 * np.pi)
    phi = s / rc
    pos = np.array([rc * np.sin(phi), rc * (1.0 - np.cos(phi)), CAMERA_HEIGHT])
    return pos, np.array([np.cos(phi), np.sin(phi), 0.0]), np.array([-np.sin(phi), np.cos(phi), 0.0])


def _look(forward: np.ndarray, roll: float) -> np.ndarray:
    right = np.cross(forward, UP)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.column_stack([right, down, forward]) @ so3_exp([0.0, 0.0, roll])


def pose_at(s: float, sc: Scenario) -> PoseSE3:
    """Ground-truth camera pose at arc length (or rotation parameter) s."""
    tau = 2.0 * np.pi
    yaw = 0.35 * np.sin(tau * s / 5.0)
    pitch = 0.2 * np.sin(tau * s / 6.3)
    roll = 0.1 * np.sin(tau * s / 8.0)
    if sc.motion == "stationary":
        s, yaw, pitch, roll = 0.0, 0.0, 0.0, 0.0
    if sc.motion == "pure_rotation":
        pos = np.array([0.0, 0.0, CAMERA_HEIGHT])
        heading = np.array([np.cos(0.5 * s), np.sin(0.5 * s), 0.0])
        left = np.cross(UP, heading)
    else:
        pos, heading, left = _centerline(s, sc)
        pos = pos + left * 0.25 * np.sin(tau * s / 9.0) + UP * 0.2 * np.sin(tau * s / 7.0)
        heading = so3_exp(UP * yaw) @ heading
    forward = np.cos(pitch) * heading + np.sin(pitch) * UP
    return PoseSE3(_look(forward, roll), pos)


def _sample_world(sc: Scenario, rng: np.random.Generator) -> np.ndarray:
    r0, r1 = sc.tube_inner_radius, sc.tube_outer_radius
    if sc.motion == "pure_rotation":
        r0, r1 = 8.0, 20.0
        n = int(round(sc.landmark_density * 4.0 / 3.0 * np.pi * (r1 ** 3 - r0 ** 3)))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = np.cbrt(rng.uniform(r0 ** 3, r1 ** 3, size=n))
        return d * r[:, None] + np.array([0.0, 0.0, CAMERA_HEIGHT])
    length = sc.path_length + 2.0 * PATH_MARGIN
    n = int(round(sc.landmark_density * length * np.pi * (r1 ** 2 - r0 ** 2)))
    s = rng.uniform(-PATH_MARGIN, sc.path_length + PATH_MARGIN, size=n)
    r = np.sqrt(rng.uniform(r0 ** 2, r1 ** 2, size=n))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        c, _, left = _centerline(float(s[i]), sc)
        pts[i] = c + r[i] * (np.cos(theta[i]) * left + np.sin(theta[i]) * UP)
    return pts


def _visible(world: np.ndarray, idx: np.ndarray, pose: PoseSE3, intr: CameraIntrinsics,
             sc: Scenario) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subset of `idx` inside the image; returns (indices, pixels, camera-frame points)."""
    if idx.size == 0:
        return idx, np.zeros((0, 2)), np.zeros((0, 3))
    pc = (world[idx] - pose.translation) @ pose.rotation
    ok = (pc[:, 2] > MIN_DEPTH) & (np.linalg.norm(pc, axis=1) < sc.max_range)
    idx, pc = idx[ok], pc[ok]
    uv = project_batch(intr, pc) if idx.size else np.zeros((0, 2))
    inb = (uv[:, 0] >= 0.0) & (uv[:, 0] < sc.width) & (uv[:, 1] >= 0.0) & (uv[:, 1] < sc.height)
    return idx[inb], uv[inb], pc[inb]


def _observe(rng: np.random.Generator, sc: Scenario, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    noise = rng.normal(0.0, sc.noise_sigma, size=2) if sc.noise_sigma > 0.0 else np.zeros(2)
    if sc.outlier_fraction > 0.0 and rng.random() < sc.outlier_fraction:
        return np.array([rng.uniform(0.0, sc.width), rng.uniform(0.0, sc.height)]), noise, True
    return uv + noise, noise, False


def _rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = 0.5 * (np.trace(Ra.T @ Rb) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------- generation ----------------
def generate(scenario: Scenario) -> Tuple[KeyframeStream, GroundTruth]:
    sc = scenario
    rng = _rng(sc.seed)
    intr = sc.intrinsics
    world = _sample_world(sc, rng)
    truth = GroundTruth(scenario=sc, world=world, timeline=[(0, intr)])
    all_idx = np.arange(world.shape[0])

    live: Dict[int, int] = {}               # track id -> world index
    next_track = 0
    keyframes: List[Keyframe] = []
    kf_tracks: Set[int] = set()
    last_pose: Optional[PoseSE3] = None
    travelled = 0.0
    s = 0.0
    prev_pos = None

    def emit(pose: PoseSE3) -> None:
        nonlocal next_track, kf_tracks, last_pose
        fid = len(keyframes)
        vis, uv, pc = _visible(world, all_idx, pose, intr, sc)
        pixel = {int(i): (u, p) for i, u, p in zip(vis, uv, pc)}
        meas: List[Measurement] = []
        for tid in sorted(live):
            wi = live[tid]
            z, noise, outlier = _observe(rng, sc, pixel[wi][0])
            truth.noise[(tid, fid)] = noise
            if outlier:
                truth.outliers.add((tid, fid))
            meas.append(Measurement(tid, fid, z, sc.sigma))
        tracked = set(live.values())
        free = np.array([i for i in vis if int(i) not in tracked], dtype=int)
        need = max(0, sc.target_tracks - len(live))
        refs: Dict[int, np.ndarray] = {}
        if need and free.size:
            chosen = np.sort(rng.choice(free, size=min(need, free.size), replace=False))
            for wi in chosen:
                u, p = pixel[int(wi)]
                tid = next_track
                next_track += 1
                live[tid] = int(wi)
                refs[tid] = u.copy()
                truth.track_point[tid] = int(wi)
                truth.landmarks[tid] = Landmark(fid, u, 1.0 / float(np.linalg.norm(p)))
        if len(live) < sc.min_landmarks:
            raise InfeasibleScenario(f"keyframe {fid} sees only {len(live)} landmarks", reason="too_few_landmarks")
        truth.poses[fid] = pose
        keyframes.append(Keyframe(fid, pose, refs, tuple(meas)))
        kf_tracks = set(live)
        last_pose = pose

    pose = pose_at(0.0, sc)
    emit(pose)
    prev_pos = pose.translation
    while s + sc.step <= sc.path_length + 1e-9:
        if sc.max_keyframes is not None and len(keyframes) >= sc.max_keyframes:
            break
        s += sc.step
        pose = pose_at(s, sc)
        travelled += float(np.linalg.norm(pose.translation - prev_pos))
        prev_pos = pose.translation
        if live:
            tids = np.array(sorted(live), dtype=int)
            vis, _, _ = _visible(world, np.array([live[t] for t in tids]), pose, intr, sc)
            keep = set(int(v) for v in vis)
            for t in tids:
                if live[int(t)] not in keep:
                    del live[int(t)]
        lost = 1.0 - len(kf_tracks & set(live)) / max(len(kf_tracks), 1)
        rot = _rotation_angle(last_pose.rotation, pose.rotation)
        trans = float(np.linalg.norm(pose.translation - last_pose.translation))
        if rot > sc.keyframe_rotation or trans > sc.keyframe_translation or lost > sc.keyframe_track_loss:
            emit(pose)

    truth.path_length = travelled
    stream = KeyframeStream(keyframes, sc.width, sc.height)
    logger.info("generated %d keyframes, %d tracks, %d world points (scenario %s, seed %d)",
                len(keyframes), next_track, world.shape[0], sc.name, sc.seed)
    n_star = sc.zoom_frame
    if n_star is None and sc.zoom_fraction is not None:
        n_star = int(round(sc.zoom_fraction * len(keyframes)))
    if n_star is not None:
        if 0 < n_star < len(keyframes):
            stream, truth = inject_zoom(stream, truth, n_star, sc.zoom_scale)
        else:
            logger.warning("zoom frame %d outside the %d generated keyframes; ignored", n_star, len(keyframes))
    return stream, truth


def inject_zoom(stream: KeyframeStream, truth: GroundTruth, n_star: int,
                scale: float) -> Tuple[KeyframeStream, GroundTruth]:
    """
    Re-observe keyframes n_star.. with focal lengths scaled by `scale`. Every
    track alive at n_star is cut: observations from n_star on belong to new
    track ids. Stored noise is reused; points leaving the narrower image are
    dropped and replacements are drawn from a generator seeded by (seed, n_star).
    """
    if not 0 < n_star < len(stream):
        raise ValueError(f"zoom frame {n_star} must be interior to a stream of {len(stream)} keyframes")
    sc = truth.scenario
    zoomed = truth.intrinsics_at(n_star).zoomed(scale)
    rng = _rng(sc.seed, n_star)
    all_idx = np.arange(truth.world.shape[0])
    next_track = max(truth.track_point, default=-1) + 1

    remap: Dict[int, int] = {}
    ended: Set[int] = set()
    refill: Dict[int, int] = {}                 # new track id -> world index
    out: List[Keyframe] = [kf for kf in stream.keyframes if kf.frame_id < n_star]
    new_truth = GroundTruth(
        scenario=truth.scenario, world=truth.world, poses=dict(truth.poses),
        track_point={t: w for t, w in truth.track_point.items() if truth.landmarks[t].ref_frame_id < n_star},
        landmarks={t: l for t, l in truth.landmarks.items() if l.ref_frame_id < n_star},
        noise={k: v for k, v in truth.noise.items() if k[1] < n_star},
        outliers={k for k in truth.outliers if k[1] < n_star},
        timeline=[e for e in truth.timeline if e[0] < n_star] + [(n_star, zoomed)],
        path_length=truth.path_length,
    )

    for kf in stream.keyframes[n_star:]:
        fid = kf.frame_id
        vis, uv, pc = _visible(truth.world, all_idx, kf.pose, zoomed, sc)
        pixel = {int(i): (u, p) for i, u, p in zip(vis, uv, pc)}
        refs: Dict[int, np.ndarray] = {}
        meas: List[Measurement] = []
        seen: Set[int] = set()

        def start_track(wi: int) -> int:
            nonlocal next_track
            tid = next_track
            next_track += 1
            u, p = pixel[wi]
            refs[tid] = u.copy()
            new_truth.track_point[tid] = wi
            new_truth.landmarks[tid] = Landmark(fid, u, 1.0 / float(np.linalg.norm(p)))
            return tid

        original = sorted(list(kf.references) + [m.landmark_id for m in kf.measurements])
        z_by_track = {m.landmark_id: m.z for m in kf.measurements}
        for old in original:
            wi = truth.track_point[old]
            if old in ended:
                continue
            if wi not in pixel:
                ended.add(old)
                remap.pop(old, None)
                continue
            seen.add(wi)
            if old not in remap:
                remap[old] = start_track(wi)
                continue
            tid = remap[old]
            if (old, fid) in truth.outliers:
                z = z_by_track[old]
                new_truth.outliers.add((tid, fid))
            else:
                noise = truth.noise.get((old, fid), np.zeros(2))
                z = pixel[wi][0] + noise
            new_truth.noise[(tid, fid)] = truth.noise.get((old, fid), np.zeros(2))
            meas.append(Measurement(tid, fid, z, sc.sigma))

        for tid in sorted(refill):
            wi = refill[tid]
            if wi not in pixel or wi in seen:
                del refill[tid]
                continue
            seen.add(wi)
            z, noise, outlier = _observe(rng, sc, pixel[wi][0])
            new_truth.noise[(tid, fid)] = noise
            if outlier:
                new_truth.outliers.add((tid, fid))
            meas.append(Measurement(tid, fid, z, sc.sigma))

        need = sc.target_tracks - len(seen)
        free = np.array([i for i in vis if int(i) not in seen], dtype=int)
        if need > 0 and free.size:
            for wi in np.sort(rng.choice(free, size=min(need, free.size), replace=False)):
                tid = start_track(int(wi))
                refill[tid] = int(wi)
                seen.add(int(wi))
        if len(seen) < sc.min_landmarks:
            raise InfeasibleScenario(f"keyframe {fid} sees only {len(seen)} landmarks after zoom",
                                     reason="too_few_landmarks")
        out.append(Keyframe(fid, kf.pose, refs, tuple(meas)))

    logger.info("zoom x%.2f injected at keyframe %d", scale, n_star)
    return KeyframeStream(out, stream.width, stream.height), new_truth


def degenerate_motion(kind: Literal["pure_rotation", "stationary"], seed: int = 7,
                      **fields) -> Tuple[KeyframeStream, GroundTruth]:
    """Streams whose calibration segments must be rejected as unobservable."""
    if kind not in ("pure_rotation", "stationary"):
        raise ValueError(f"unknown degenerate motion {kind!r}")
    fields.setdefault("path_length", 30.0)
    return generate(Scenario(name=kind, motion=kind, seed=seed, **fields))


# ---------------- dump / load ----------------
def dump_stream(stream: KeyframeStream, path: Union[str, Path], scenario: Optional[Scenario] = None) -> None:
    """Line-delimited JSON: one header record, then one record per keyframe."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"type": "header", "width": stream.width, "height": stream.height,
                  "scenario": scenario.model_dump() if scenario else None}
        fh.write(json.dumps(header) + "\n")
        for kf in stream:
            q = Rotation.from_matrix(kf.pose.rotation).as_quat()
            rec = {
                "type": "keyframe", "frame": kf.frame_id,
                "q": [float(x) for x in q], "t": [float(x) for x in kf.pose.translation],
                "refs": [[int(t), float(p[0]), float(p[1])] for t, p in sorted(kf.references.items())],
                "meas": [[int(m.landmark_id), float(m.z[0]), float(m.z[1]), float(m.sigma)] for m in kf.measurements],
            }
            fh.write(json.dumps(rec) + "\n")


def load_stream(path: Union[str, Path]) -> KeyframeStream:
    keyframes: List[Keyframe] = []
    width = height = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type") == "header":
                width, height = int(rec["width"]), int(rec["height"])
                continue
            fid = int(rec["frame"])
            pose = PoseSE3(Rotation.from_quat(rec["q"]).as_matrix(), rec["t"])
            refs = {int(t): np.array([u, v]) for t, u, v in rec["refs"]}
            meas = tuple(Measurement(int(t), fid, (u, v), s) for t, u, v, s in rec["meas"])
            keyframes.append(Keyframe(fid, pose, refs, meas))
    return KeyframeStream(keyframes, width, height)
