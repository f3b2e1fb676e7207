# pipeline.py — keyframe-by-keyframe orchestration: front-end hand-off, windowed SLAM, self-calibration
from __future__ import annotations

import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Dict, List, Optional

import numpy as np

from .aac import AdaptResult, adapt_window, make_window, windowed_solve
from .camera import CameraIntrinsics, unproject_batch
from .errors import SolveFailed
from .factors import Landmark, Measurement
from .liegroups import PoseSE3, se3_local_difference, se3_local_update
from .report import RunReport, TraceRow, summarize
from .selfcal import CalibrationTrace, SelfCalibrator
from .settings import Settings
from .sim import GroundTruth, Keyframe, KeyframeStream, Scenario
from .solver import SolverOptions
from .store import MapStore

logger = logging.getLogger(__name__)

__all__ = ["Pipeline", "run_pipeline", "initial_intrinsics"]

DEFAULT_DEPTH = 5.0


def initial_intrinsics(settings: Settings, width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(width, height, settings.field_of_view_deg, settings.w_init)


class Pipeline:
    """Owns the shared map and every estimator; feed keyframes in order with `step`."""

    def __init__(self, settings: Settings, width: int, height: int,
                 initial: Optional[CameraIntrinsics] = None):
        self.settings = settings
        self.options = SolverOptions.from_settings(settings)
        self.store = MapStore()
        self.calibrator = SelfCalibrator(self.store, initial or initial_intrinsics(settings, width, height),
                                         settings, self.options)
        self.rows: List[TraceRow] = []
        self.window_failures = 0
        self._executor: Optional[ThreadPoolExecutor] = None
        self._pending: Optional[Future] = None
        if settings.background_adapt:
            self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="adapt")

    @property
    def timeline(self):
        return self.calibrator.timeline

    # ---------------- front-end hand-off ----------------
    def _predict_pose(self, first: Optional[PoseSE3]) -> PoseSE3:
        ids = self.store.frames_up_to(self.store.last_frame, 2)
        if not ids:
            return first or PoseSE3.identity()
        if len(ids) == 1:
            return self.store.poses[ids[-1]]
        a, b = self.store.poses[ids[-2]], self.store.poses[ids[-1]]
        return se3_local_update(b, se3_local_difference(a, b))

    def _initial_rho(self, pose: PoseSE3, measurements: List[Measurement]) -> float:
        """1 / median depth (in the new camera) of already-mapped landmarks it observes."""
        depths = []
        for m in measurements:
            lm = self.store.landmarks.get(m.landmark_id)
            if lm is None or lm.rho <= 0.0:
                continue
            T_r = self.store.poses[lm.ref_frame_id]
            intr = self.timeline.lookup(lm.ref_frame_id)
            X = T_r.apply(unproject_batch(intr, lm.p_r[None])[0] / lm.rho)
            pc = pose.rotation.T @ (X - pose.translation)
            if pc[2] > 0.0:
                depths.append(np.linalg.norm(pc))
        return 1.0 / (float(np.median(depths)) if depths else DEFAULT_DEPTH)

    def _insert(self, kf: Keyframe, first_pose: Optional[PoseSE3]) -> None:
        pose = self._predict_pose(first_pose)
        meas = [m for m in kf.measurements if m.landmark_id in self.store.landmarks]
        rho = self._initial_rho(pose, meas)
        new = {tid: Landmark(kf.frame_id, p, rho) for tid, p in kf.references.items()}
        self.store.add_keyframe(kf.frame_id, pose, new, meas)

    # ---------------- back-end ----------------
    def _collect_background(self) -> Optional[AdaptResult]:
        if self._pending is None:
            return None
        try:
            res = self._pending.result()
        except SolveFailed as e:
            logger.warning("background adaptation failed: %s", e)
            res = None
        self._pending = None
        if res is not None and res.expansions:
            res.solution.apply(self.store)
        return res

    def _window_step(self, frame_id: int) -> Dict[str, float]:
        s = self.settings
        info = {"conditioning_error": float("nan"), "window_start": float(frame_id),
                "window_size": 0.0, "expansions": 0.0, "window_time": 0.0, "window_ops": 0.0}
        if len(self.store.poses) < 2:
            return info
        t0 = time.perf_counter()
        window = make_window(self.store, frame_id, s.window_size)
        try:
            sol = windowed_solve(self.store, window, self.timeline, options=self.options)
        except SolveFailed as e:
            self.window_failures += 1
            logger.warning("windowed solve failed at keyframe %d: %s", frame_id, e)
            return info
        sol.apply(self.store)
        info.update(conditioning_error=sol.conditioning_error, window_start=float(window.start),
                    window_size=float(window.end - window.start + 1),
                    window_ops=float(sol.result.n_measurements))

        if sol.conditioning_error > s.conditioning_threshold:
            barrier = self.timeline.segment_start(frame_id)
            if self._executor is not None:
                if self._pending is None:
                    snap = self.store.snapshot()
                    self._pending = self._executor.submit(
                        adapt_window, snap, sol, self.timeline, s.conditioning_threshold,
                        s.window_growth, barrier, self.options)
            else:
                res = adapt_window(self.store, sol, self.timeline, s.conditioning_threshold,
                                   s.window_growth, barrier, options=self.options)
                if res.expansions:
                    res.solution.apply(self.store)
                    info.update(conditioning_error=res.solution.conditioning_error,
                                window_start=float(res.window.start),
                                window_size=float(res.window.end - res.window.start + 1),
                                expansions=float(res.expansions))
        info["window_time"] = time.perf_counter() - t0
        return info

    def step(self, kf: Keyframe, first_pose: Optional[PoseSE3] = None) -> TraceRow:
        bg = self._collect_background()
        self._insert(kf, first_pose)
        win = self._window_step(kf.frame_id)
        if bg is not None and bg.expansions:
            win["expansions"] = float(bg.expansions)
        cal: CalibrationTrace = self.calibrator.process_keyframe(kf.frame_id)
        row = TraceRow.from_step(kf.frame_id, cal, win, self.store.poses[kf.frame_id])
        self.rows.append(row)
        return row

    def close(self) -> None:
        self._collect_background()
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def run_pipeline(stream: KeyframeStream, truth: Optional[GroundTruth], settings: Settings,
                 scenario: Optional[Scenario] = None) -> RunReport:
    """Run every keyframe of `stream` through the pipeline and summarize against `truth`."""
    t0 = time.perf_counter()
    pipe = Pipeline(settings, stream.width, stream.height)
    first = stream[0].pose if len(stream) else None
    try:
        for kf in stream:
            pipe.step(kf, first_pose=first)
    finally:
        pipe.close()
    runtime = time.perf_counter() - t0
    summary = summarize(pipe.rows, pipe.calibrator, pipe.store, truth, runtime)
    logger.info("run finished: %d keyframes, %d change events, %.1f s",
                len(pipe.rows), summary.n_events, runtime)
    return RunReport(rows=pipe.rows, summary=summary,
                     scenario=scenario or (truth.scenario if truth is not None else None))
