# store.py — shared map: keyframe poses, inverse-depth landmarks, measurements (thread-safe merge)
from __future__ import annotations

import bisect
import threading
from collections import defaultdict
from typing import Dict, Iterable, List, Optional, Set

import numpy as np

from .factors import Landmark, Measurement
from .liegroups import PoseSE3

__all__ = ["MapStore"]


class MapStore:
    """
    The structure shared by the tracker, the windowed estimators and self-calibration.
    Only transfer measurements (frame != reference frame) are stored; the first
    observation of a landmark lives in Landmark.p_r.
    """

    def __init__(self):
        self.poses: Dict[int, PoseSE3] = {}
        self.landmarks: Dict[int, Landmark] = {}
        self._by_frame: Dict[int, List[Measurement]] = defaultdict(list)
        self._by_landmark: Dict[int, List[Measurement]] = defaultdict(list)
        self._refs_by_frame: Dict[int, List[int]] = defaultdict(list)
        self._frame_order: List[int] = []
        self._lock = threading.RLock()

    # ---------------- writes ----------------
    def add_keyframe(self, frame_id: int, pose: PoseSE3,
                     new_landmarks: Dict[int, Landmark], measurements: Iterable[Measurement]) -> None:
        with self._lock:
            if frame_id not in self.poses:
                bisect.insort(self._frame_order, frame_id)
            self.poses[frame_id] = pose
            for lid, lm in new_landmarks.items():
                self.landmarks[lid] = lm
                self._refs_by_frame[lm.ref_frame_id].append(lid)
            for m in measurements:
                self._by_frame[m.frame_id].append(m)
                self._by_landmark[m.landmark_id].append(m)

    def merge(self, poses: Optional[Dict[int, PoseSE3]] = None,
              landmarks: Optional[Dict[int, Landmark]] = None) -> None:
        """Apply solver output atomically (between keyframes)."""
        with self._lock:
            if poses:
                self.poses.update(poses)
            if landmarks:
                self.landmarks.update(landmarks)

    # ---------------- queries ----------------
    @property
    def frame_ids(self) -> List[int]:
        return list(self._frame_order)

    @property
    def last_frame(self) -> int:
        return self._frame_order[-1] if self._frame_order else -1

    def frames_between(self, first: int, last: Optional[int] = None) -> List[int]:
        """Keyframe ids in [first, last] (to the newest when `last` is None), ascending."""
        order = self._frame_order
        i = bisect.bisect_left(order, first)
        j = len(order) if last is None else bisect.bisect_right(order, last)
        return order[i:j]

    def frames_up_to(self, last: int, count: int) -> List[int]:
        """The `count` newest keyframe ids not after `last`."""
        order = self._frame_order
        j = bisect.bisect_right(order, last)
        return order[max(0, j - count):j]

    def measurements_in(self, frames: Iterable[int]) -> List[Measurement]:
        out: List[Measurement] = []
        for f in sorted(set(frames)):
            out.extend(self._by_frame.get(f, ()))
        return out

    def observations_of(self, landmark_id: int) -> List[Measurement]:
        return list(self._by_landmark.get(landmark_id, ()))

    def landmarks_with_ref_in(self, frames: Iterable[int]) -> List[int]:
        out: List[int] = []
        for f in sorted(set(frames)):
            out.extend(self._refs_by_frame.get(f, ()))
        return out

    def landmarks_seen_in(self, frames: Iterable[int]) -> Set[int]:
        seen: Set[int] = set()
        for f in set(frames):
            seen.update(m.landmark_id for m in self._by_frame.get(f, ()))
            seen.update(self._refs_by_frame.get(f, ()))
        return seen

    def n_measurements(self, frame_id: int) -> int:
        return len(self._by_frame.get(frame_id, ()))

    def median_depth(self, frame_id: int) -> Optional[float]:
        """Median inverse-range depth of landmarks referenced in `frame_id`."""
        rhos = [self.landmarks[l].rho for l in self._refs_by_frame.get(frame_id, ()) if l in self.landmarks]
        rhos = [r for r in rhos if r > 0.0]
        return float(np.median(1.0 / np.asarray(rhos))) if rhos else None

    def snapshot(self) -> "MapStore":
        """Copy for background solves. Index lists are copied, measurements are immutable and shared."""
        with self._lock:
            other = MapStore()
            other.poses = dict(self.poses)
            other.landmarks = dict(self.landmarks)
            other._by_frame = defaultdict(list, {k: list(v) for k, v in self._by_frame.items()})
            other._by_landmark = defaultdict(list, {k: list(v) for k, v in self._by_landmark.items()})
            other._refs_by_frame = defaultdict(list, {k: list(v) for k, v in self._refs_by_frame.items()})
            other._frame_order = list(self._frame_order)
            return other
