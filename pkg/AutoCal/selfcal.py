# selfcal.py — candidate segments, fixed-size priority queue, joint estimate, batch initialization, timeline
from __future__ import annotations

import bisect
import logging
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .camera import CameraIntrinsics
from .changedetect import (
    ChangeEvent, ChangeGate, TestResult, behrens_fisher_test, gate_update, on_change_event,
)
from .errors import SolveFailed, SolverError, StatsError
from .factors import Measurement
from .solver import (
    PosteriorEstimate, Problem, SolveResult, SolverOptions,
    check_wellconditioned, fisher_covariance, score, solve,
)
from .store import MapStore

logger = logging.getLogger(__name__)

__all__ = [
    "Segment", "Discarded", "PriorityQueue", "CalibrationTimeline", "InitResult", "SelfCalibrator",
    "local_problem", "evaluate_candidate", "try_swap", "joint_pq_estimate", "run_initialization",
]


# ---------------- value types ----------------
@dataclass(frozen=True)
class Segment:
    frames: Tuple[int, ...]
    measurements: Tuple[Measurement, ...]
    posterior: PosteriorEstimate
    score: float
    solution: Problem           # solved segment-local problem, reused to warm-start joint solves

    @property
    def n(self) -> int:
        return len(self.measurements)


@dataclass(frozen=True)
class Discarded:
    frames: Tuple[int, ...]
    reason: str
    n: int = 0


class CalibrationTimeline:
    """Piecewise-constant intrinsics over keyframe ids; the first entry starts at frame 0."""

    def __init__(self, initial: CameraIntrinsics):
        self._starts: List[int] = [0]
        self._values: List[CameraIntrinsics] = [initial]

    def __len__(self) -> int:
        return len(self._starts)

    @property
    def entries(self) -> List[Tuple[int, CameraIntrinsics]]:
        return list(zip(self._starts, self._values))

    @property
    def change_indices(self) -> List[int]:
        return list(self._starts[1:])

    def set(self, start: int, intrinsics: CameraIntrinsics) -> None:
        """Assign `intrinsics` to frames from `start` on. `start` must be the last start or later."""
        if start == self._starts[-1]:
            self._values[-1] = intrinsics
        elif start > self._starts[-1]:
            self._starts.append(start)
            self._values.append(intrinsics)
        else:
            raise ValueError(f"timeline start {start} precedes last change index {self._starts[-1]}")

    def lookup(self, frame_id: int) -> CameraIntrinsics:
        i = bisect.bisect_right(self._starts, frame_id) - 1
        return self._values[max(i, 0)]

    def segment_start(self, frame_id: int) -> int:
        i = bisect.bisect_right(self._starts, frame_id) - 1
        return self._starts[max(i, 0)]


JointEstimator = Callable[[Sequence[Segment]], PosteriorEstimate]


class PriorityQueue:
    """The k lowest-score segments seen since the last reset, with their joint posterior."""

    def __init__(self, capacity: int, joint_estimator: JointEstimator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.joint_estimator = joint_estimator
        self.segments: List[Segment] = []
        self.joint: Optional[PosteriorEstimate] = None
        self.joint_score: float = float("nan")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def worst(self) -> Optional[Segment]:
        return max(self.segments, key=lambda s: s.score) if self.segments else None

    @property
    def scores(self) -> List[float]:
        return sorted(s.score for s in self.segments)

    @property
    def n_measurements(self) -> int:
        return sum(s.n for s in self.segments)

    def clear(self) -> None:
        self.segments = []
        self.joint = None
        self.joint_score = float("nan")


# ---------------- problem construction ----------------
def _gauge_landmark(measurements: Sequence[Measurement]) -> Optional[int]:
    counts = Counter(m.landmark_id for m in measurements)
    if not counts:
        return None
    return min(counts, key=lambda l: (-counts[l], l))


def local_problem(store: MapStore, frames: Sequence[int], intrinsics: CameraIntrinsics,
                  min_observations: int = 1) -> Problem:
    """
    Problem over `frames` alone: landmarks referenced in these frames and measured
    at least `min_observations` times inside them. The first frame is fixed and
    the most observed landmark keeps its inverse depth.
    """
    frames = sorted(frames)
    inside = set(frames)
    lids = set(store.landmarks_with_ref_in(frames))
    meas = [m for m in store.measurements_in(frames) if m.landmark_id in lids]
    counts = Counter(m.landmark_id for m in meas)
    meas = [m for m in meas if counts[m.landmark_id] >= min_observations and m.frame_id in inside]
    used = sorted({m.landmark_id for m in meas})
    gauge = _gauge_landmark(meas)
    return Problem(
        poses={f: store.poses[f] for f in frames},
        landmarks={l: store.landmarks[l] for l in used},
        measurements=meas,
        intrinsics=intrinsics,
        active_poses=frames[1:],
        active_landmarks=[l for l in used if l != gauge],
        intrinsics_active=True,
    )


def _posterior_of(result: SolveResult, kappa_max: float) -> Tuple[PosteriorEstimate, float]:
    post = fisher_covariance(result.problem)
    if not check_wellconditioned(post.SigmaPrime, kappa_max):
        raise SolverError("normalized covariance is ill-conditioned", reason="ill_conditioned")
    return post, score(post.SigmaPrime)


# ---------------- operations ----------------
def evaluate_candidate(store: MapStore, frames: Sequence[int], intrinsics: CameraIntrinsics, *,
                       min_measurements: int = 20, min_observations: int = 2,
                       kappa_max: float = 1e8,
                       options: Optional[SolverOptions] = None) -> Union[Segment, Discarded]:
    frames = tuple(sorted(frames))
    problem = local_problem(store, frames, intrinsics, min_observations=min_observations)
    n = len(problem.measurements)
    if n < min_measurements:
        logger.info("candidate %d-%d discarded: %d measurements", frames[0], frames[-1], n)
        return Discarded(frames, "insufficient_data", n)
    try:
        result = solve(problem, options=options)
        post, sc = _posterior_of(result, kappa_max)
    except SolverError as e:
        reason = "ill_conditioned" if e.reason in ("singular_information", "ill_conditioned") else e.reason
        logger.info("candidate %d-%d discarded: %s", frames[0], frames[-1], reason)
        return Discarded(frames, reason, n)
    return Segment(frames, tuple(result.problem.measurements), post, sc, result.problem)


def joint_pq_estimate(segments: Sequence[Segment], init: Optional[CameraIntrinsics] = None,
                      options: Optional[SolverOptions] = None) -> Tuple[PosteriorEstimate, SolveResult]:
    """
    One problem over every segment's poses and landmarks sharing a single
    intrinsics vector. Segments keep their own gauge and cached inliers.
    """
    if not segments:
        raise ValueError("joint estimate needs at least one segment")
    poses, landmarks, meas, act_p, act_l = {}, {}, [], [], []
    for s in segments:
        sol = s.solution
        poses.update(sol.poses)
        landmarks.update(sol.landmarks)
        meas.extend(s.measurements)
        act_p.extend(sol.active_poses)
        act_l.extend(sol.active_landmarks)
    if init is None:
        init = min(segments, key=lambda s: s.score).posterior.intrinsics
    problem = Problem(poses=poses, landmarks=landmarks, measurements=meas, intrinsics=init,
                      active_poses=act_p, active_landmarks=act_l, intrinsics_active=True)
    opts = options or SolverOptions()
    try:
        result = solve(problem, options=replace(opts, reject_outliers=False))
        post = fisher_covariance(result.problem)
    except SolverError as e:
        raise SolveFailed(f"joint priority-queue solve failed: {e}") from e
    return post, result


def try_swap(pq: PriorityQueue, candidate: Segment) -> Tuple[PriorityQueue, bool]:
    """Insert if there is room, else replace the worst member when the candidate scores strictly lower."""
    previous = list(pq.segments)
    if len(pq.segments) < pq.capacity:
        pq.segments.append(candidate)
    else:
        worst = pq.worst
        if not candidate.score < worst.score:
            return pq, False
        pq.segments = [s for s in pq.segments if s is not worst] + [candidate]
    pq.segments.sort(key=lambda s: (s.score, s.frames))
    try:
        joint = pq.joint_estimator(pq.segments)
        joint_score = score(joint.SigmaPrime)
    except SolverError as e:
        pq.segments = previous
        raise SolveFailed(str(e)) from e
    pq.joint, pq.joint_score = joint, joint_score
    logger.info("priority queue swap: segment %d-%d (score %.3f), occupancy %d",
                candidate.frames[0], candidate.frames[-1], candidate.score, len(pq))
    return pq, True


@dataclass
class InitResult:
    intrinsics: CameraIntrinsics
    score: float
    complete: bool
    result: Optional[SolveResult] = None
    posterior: Optional[PosteriorEstimate] = None
    n_measurements: int = 0


def run_initialization(store: MapStore, frames: Sequence[int], intrinsics: CameraIntrinsics,
                       threshold: float, *, kappa_max: float = 1e8,
                       options: Optional[SolverOptions] = None) -> InitResult:
    """
    Batch solve over `frames` (all keyframes since the last change). Completes
    when the batch posterior scores below `threshold`. An unobservable or
    failed batch leaves `intrinsics` untouched.
    """
    problem = local_problem(store, frames, intrinsics, min_observations=1)
    n = len(problem.measurements)
    if len(frames) < 2 or n == 0:
        return InitResult(intrinsics, np.inf, False, n_measurements=n)
    try:
        result = solve(problem, options=options)
        post, sc = _posterior_of(result, kappa_max)
    except SolverError as e:
        logger.debug("initialization batch over %d frames not yet usable: %s", len(frames), e.reason)
        return InitResult(intrinsics, np.inf, False, n_measurements=n)
    return InitResult(result.problem.intrinsics, sc, bool(sc < threshold), result, post, n)


# ---------------- orchestration ----------------
@dataclass
class CalibrationTrace:
    frame_id: int
    phase: str
    intrinsics: CameraIntrinsics
    score: float = float("nan")
    pq_size: int = 0
    candidate: Optional[Tuple[int, int]] = None
    candidate_status: str = ""
    test: Optional[TestResult] = None
    gate_counter: int = 0
    event: Optional[ChangeEvent] = None
    timings: Dict[str, float] = field(default_factory=dict)
    op_counts: Dict[str, int] = field(default_factory=dict)


class SelfCalibrator:
    """Single owner of the priority queue, change gate and calibration timeline."""

    def __init__(self, store: MapStore, initial: CameraIntrinsics, settings,
                 options: Optional[SolverOptions] = None):
        self.store = store
        self.settings = settings
        self.options = options or SolverOptions.from_settings(settings)
        self.timeline = CalibrationTimeline(initial)
        self.gate = ChangeGate(alpha=settings.alpha, n_test=settings.n_test)
        self.pq = PriorityQueue(settings.pq_size, self._joint)
        self.in_init = True
        self.init_start = 0
        self.next_candidate = None
        self.events: List[ChangeEvent] = []
        self.accepted_segments = 0

    def _joint(self, segments: Sequence[Segment]) -> PosteriorEstimate:
        init = None
        if len(segments) > 1 and self.pq.joint is not None:
            init = self.pq.joint.intrinsics
        post, _ = joint_pq_estimate(segments, init=init, options=self.options)
        return post

    def enter_initialization(self, n_change: int) -> None:
        current = self.timeline.lookup(self.store.last_frame)
        self.timeline.set(n_change, current)
        self.in_init = True
        self.init_start = n_change
        self.next_candidate = None
        self.gate.reset()

    def intrinsics_for(self, frame_id: int) -> CameraIntrinsics:
        return self.timeline.lookup(frame_id)

    def process_keyframe(self, frame_id: int) -> CalibrationTrace:
        if self.in_init:
            return self._initialization_step(frame_id)
        return self._candidate_step(frame_id)

    def _initialization_step(self, frame_id: int) -> CalibrationTrace:
        s = self.settings
        t0 = time.perf_counter()
        start = max(self.init_start, frame_id - s.init_max_keyframes + 1)
        frames = self.store.frames_between(start, frame_id)
        res = run_initialization(self.store, frames, self.timeline.lookup(frame_id),
                                 s.init_score_threshold, kappa_max=s.kappa_max, options=self.options)
        if res.result is not None:
            sol = res.result.problem
            self.store.merge(poses={p: sol.poses[p] for p in sol.active_poses},
                             landmarks={l: sol.landmarks[l] for l in sol.active_landmarks})
            self.timeline.set(self.init_start, res.intrinsics)
        if res.complete:
            self.in_init = False
            self.next_candidate = frame_id + 1
            logger.info("initialization complete at frame %d (score %.3f)", frame_id, res.score)
        return CalibrationTrace(
            frame_id=frame_id, phase="init", intrinsics=self.timeline.lookup(frame_id),
            score=res.score, pq_size=len(self.pq), gate_counter=self.gate.counter,
            timings={"batch": time.perf_counter() - t0}, op_counts={"batch": res.n_measurements},
        )

    def _candidate_step(self, frame_id: int) -> CalibrationTrace:
        s = self.settings
        trace = CalibrationTrace(frame_id=frame_id, phase="pq", intrinsics=self.timeline.lookup(frame_id),
                                 score=self.pq.joint_score,
                                 pq_size=len(self.pq), gate_counter=self.gate.counter)
        frames = self.store.frames_between(self.next_candidate)[:s.segment_size]
        if len(frames) < s.segment_size:
            return trace
        self.next_candidate = frames[-1] + 1
        trace.candidate = (frames[0], frames[-1])

        t0 = time.perf_counter()
        cand = evaluate_candidate(
            self.store, frames, self.timeline.lookup(frame_id),
            min_measurements=s.min_segment_measurements, kappa_max=s.kappa_max, options=self.options,
        )
        trace.timings["candidate"] = time.perf_counter() - t0
        trace.op_counts["candidate"] = cand.n

        result: Optional[TestResult] = None
        if isinstance(cand, Discarded):
            trace.candidate_status = f"discarded:{cand.reason}"
        else:
            trace.candidate_status = "evaluated"
            self.accepted_segments += 1
            if s.change_detection and self.pq.joint is not None:
                try:
                    result = behrens_fisher_test(self.pq.joint, cand.posterior)
                except StatsError as e:
                    logger.info("change test skipped for %d-%d: %s", frames[0], frames[-1], e.reason)
        trace.test = result

        if s.change_detection and (self.pq.joint is not None or isinstance(cand, Discarded)):
            _, event = gate_update(self.gate, result, frame_id, segment_start=frames[0],
                                   mode=s.change_index_mode)
            trace.gate_counter = self.gate.counter
            if event is not None:
                self.events.append(event)
                on_change_event(self.pq, self, event)
                trace.event = event
                trace.pq_size = 0
                return trace

        rejecting = result is not None and result.p_value <= s.alpha
        if isinstance(cand, Segment) and not rejecting:
            t0 = time.perf_counter()
            try:
                _, swapped = try_swap(self.pq, cand)
            except SolveFailed as e:
                logger.warning("priority queue left unchanged: %s", e)
                swapped = False
            trace.timings["pq"] = time.perf_counter() - t0
            if swapped:
                trace.op_counts["pq"] = self.pq.n_measurements
                self.timeline.set(self.init_start, self.pq.joint.intrinsics)
                trace.candidate_status = "swapped"
        trace.intrinsics = self.timeline.lookup(frame_id)
        trace.pq_size = len(self.pq)
        trace.score = self.pq.joint_score
        return trace
