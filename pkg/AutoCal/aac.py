# aac.py — windowed bundle adjustment conditioned on the inactive trajectory, adaptive window expansion
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import SolveFailed, SolverError
from .solver import Problem, SolveResult, SolverOptions, solve, whitened_norms
from .store import MapStore

logger = logging.getLogger(__name__)

__all__ = ["SlamWindow", "WindowSolution", "AdaptResult", "make_window", "windowed_solve", "adapt_window"]


@dataclass(frozen=True)
class SlamWindow:
    active_poses: Tuple[int, ...]
    conditioning_poses: Tuple[int, ...]
    active_landmarks: Tuple[int, ...]
    fixed_poses: Tuple[int, ...] = ()           # anchor when no conditioning pose exists
    frozen_landmark: Optional[int] = None       # scale anchor when fewer than two fixed poses are observed

    @property
    def start(self) -> int:
        return min(self.active_poses + self.fixed_poses)

    @property
    def end(self) -> int:
        return max(self.active_poses + self.fixed_poses)

    def __len__(self) -> int:
        return len(self.active_poses)


@dataclass
class WindowSolution:
    window: SlamWindow
    result: SolveResult
    conditioning_error: float

    def apply(self, store: MapStore) -> None:
        """Merge the re-estimated active poses and landmarks into the shared map."""
        sol = self.result.problem
        store.merge(poses={p: sol.poses[p] for p in sol.active_poses},
                    landmarks={l: sol.landmarks[l] for l in sol.active_landmarks})


@dataclass
class AdaptResult:
    window: SlamWindow
    solution: WindowSolution
    expansions: int = 0
    errors: List[float] = field(default_factory=list)


def make_window(store: MapStore, end: int, size: int, start: Optional[int] = None) -> SlamWindow:
    """Window over the `size` keyframes ending at `end` (or from `start` when given)."""
    active = store.frames_up_to(end, size) if start is None else store.frames_between(start, end)
    inside = set(active)
    landmarks = sorted(store.landmarks_seen_in(active))
    cond = set()
    counts: Counter = Counter()
    for l in landmarks:
        ref = store.landmarks[l].ref_frame_id
        obs = store.observations_of(l)
        counts[l] = len(obs)
        cond.add(ref)
        cond.update(m.frame_id for m in obs)
    cond -= inside

    fixed: Tuple[int, ...] = ()
    act = list(active)
    if not cond:
        fixed = (act[0],)
        act = act[1:]
    frozen = None
    if len(cond) + len(fixed) < 2 and counts:
        frozen = min(counts, key=lambda l: (-counts[l], l))
    return SlamWindow(tuple(act), tuple(sorted(cond)), tuple(landmarks), fixed, frozen)


def _window_problem(store: MapStore, window: SlamWindow, timeline) -> Problem:
    meas = []
    for l in window.active_landmarks:
        meas.extend(store.observations_of(l))
    frames = set(window.active_poses) | set(window.conditioning_poses) | set(window.fixed_poses)
    return Problem(
        poses={f: store.poses[f] for f in sorted(frames)},
        landmarks={l: store.landmarks[l] for l in window.active_landmarks},
        measurements=meas,
        intrinsics=timeline.lookup(window.end),
        active_poses=window.active_poses,
        active_landmarks=[l for l in window.active_landmarks if l != window.frozen_landmark],
        conditioning_poses=window.conditioning_poses,
        frame_intrinsics=timeline.lookup,
    )


def _conditioning_error(result: SolveResult, window: SlamWindow) -> float:
    sol = result.problem
    cond = set(window.conditioning_poses)
    edge = [m for m in sol.measurements
            if m.frame_id in cond or sol.landmarks[m.landmark_id].ref_frame_id in cond]
    if not edge:
        return 0.0
    return float(np.mean(whitened_norms(sol, edge)))


def windowed_solve(store: MapStore, window: SlamWindow, timeline,
                   options: Optional[SolverOptions] = None) -> WindowSolution:
    """Solve the window with conditioning poses fixed; the store is not modified."""
    problem = _window_problem(store, window, timeline)
    try:
        result = solve(problem, options=options)
    except SolverError as e:
        raise SolveFailed(f"window {window.start}-{window.end}: {e}") from e
    return WindowSolution(window, result, _conditioning_error(result, window))


def adapt_window(store: MapStore, solution: WindowSolution, timeline, error_threshold: float,
                 growth: int, barrier: int = 0, options: Optional[SolverOptions] = None) -> AdaptResult:
    """
    Grow the window backwards by `growth` keyframes while the conditioning error
    exceeds `error_threshold` and the window starts after `barrier`. A larger
    window is kept only when it lowers the error.
    """
    best = solution
    out = AdaptResult(window=solution.window, solution=solution, errors=[solution.conditioning_error])
    while best.conditioning_error > error_threshold and best.window.start > barrier:
        start = max(barrier, best.window.start - growth)
        if best.window.fixed_poses:
            break
        window = make_window(store, best.window.end, 0, start=start)
        try:
            cand = windowed_solve(store, window, timeline, options=options)
        except SolveFailed as e:
            logger.warning("window expansion aborted: %s", e)
            break
        out.errors.append(cand.conditioning_error)
        if not cand.conditioning_error < best.conditioning_error:
            break
        logger.info("window expanded to %d-%d (conditioning error %.3f -> %.3f)",
                    window.start, window.end, best.conditioning_error, cand.conditioning_error)
        best = cand
        out.expansions += 1
    out.window, out.solution = best.window, best
    return out
