# report.py — run report records, CSV writers (pandas) and report comparison
from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.spatial.transform import Rotation

from .errors import MismatchedScenarios, ReportError
from .liegroups import PoseSE3
from .sim import GroundTruth, Scenario

if TYPE_CHECKING:
    from .selfcal import CalibrationTrace, SelfCalibrator
    from .store import MapStore

__all__ = ["TraceRow", "TimingRow", "RunSummary", "RunReport", "Comparison",
           "summarize", "compare", "load_report", "align_similarity"]

NAN = float("nan")
TRACE_FILE = "trace.csv"
TIMING_FILE = "timing.csv"
SUMMARY_FILE = "summary.csv"
SCENARIO_FILE = "scenario.json"


class TraceRow(BaseModel):
    """One row per keyframe. Column order is the CSV column order."""
    frame_id: int
    phase: str
    fx: float
    fy: float
    cx: float
    cy: float
    w: float
    pq_score: float = NAN
    pq_size: int = 0
    candidate_start: int = -1
    candidate_end: int = -1
    candidate_status: str = ""
    T2: float = NAN
    v: float = NAN
    f_stat: float = NAN
    p_value: float = NAN
    gate_counter: int = 0
    change_event: int = 0
    n_change: int = -1
    conditioning_error: float = NAN
    window_start: int = -1
    window_size: int = 0
    expansions: int = 0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    qx: float = 0.0
    qy: float = 0.0
    qz: float = 0.0
    qw: float = 1.0
    ops_batch: int = 0
    ops_candidate: int = 0
    ops_pq: int = 0
    ops_window: int = 0
    # wall-clock timings live in timing.csv so trace.csv stays reproducible
    timings: Dict[str, float] = Field(default_factory=dict, exclude=True)

    @classmethod
    def from_step(cls, frame_id: int, cal: "CalibrationTrace", win: Dict[str, float], pose: PoseSE3) -> "TraceRow":
        q = Rotation.from_matrix(pose.rotation).as_quat()
        x = cal.intrinsics
        t = cal.test
        return cls(
            frame_id=frame_id, phase=cal.phase,
            fx=x.fx, fy=x.fy, cx=x.cx, cy=x.cy, w=x.w,
            pq_score=cal.score, pq_size=cal.pq_size,
            candidate_start=cal.candidate[0] if cal.candidate else -1,
            candidate_end=cal.candidate[1] if cal.candidate else -1,
            candidate_status=cal.candidate_status,
            T2=t.T2 if t else NAN, v=t.v if t else NAN, f_stat=t.f_stat if t else NAN,
            p_value=t.p_value if t else NAN,
            gate_counter=cal.gate_counter,
            change_event=int(cal.event is not None),
            n_change=cal.event.n_change if cal.event else -1,
            conditioning_error=win["conditioning_error"],
            window_start=int(win["window_start"]), window_size=int(win["window_size"]),
            expansions=int(win["expansions"]),
            tx=pose.translation[0], ty=pose.translation[1], tz=pose.translation[2],
            qx=q[0], qy=q[1], qz=q[2], qw=q[3],
            ops_batch=cal.op_counts.get("batch", 0), ops_candidate=cal.op_counts.get("candidate", 0),
            ops_pq=cal.op_counts.get("pq", 0), ops_window=int(win.get("window_ops", 0)),
            timings={**cal.timings, "window": win.get("window_time", 0.0)},
        )


class TimingRow(BaseModel):
    frame_id: int
    batch_ms: float = 0.0
    candidate_ms: float = 0.0
    pq_ms: float = 0.0
    window_ms: float = 0.0


class RunSummary(BaseModel):
    scenario: str = ""
    seed: int = 0
    n_keyframes: int = 0
    n_events: int = 0
    change_frames: str = ""
    detected_at: str = ""
    zoom_frame: Optional[int] = None
    detection_latency: Optional[int] = None
    n_change_error: Optional[int] = None
    accepted_segments: int = 0
    pq_size_final: int = 0
    final_translation_error_pct: float = NAN
    intrinsics_rel_error_pre: float = NAN
    w_abs_error_pre: float = NAN
    intrinsics_rel_error_post: float = NAN
    w_abs_error_post: float = NAN
    runtime_s: float = 0.0


class RunReport(BaseModel):
    rows: List[TraceRow]
    summary: RunSummary
    scenario: Optional[Scenario] = None

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows], columns=list(TraceRow.model_fields)[:-1])

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.trace_frame().to_csv(out / TRACE_FILE, index=False, float_format="%.12g")
        timing = [TimingRow(frame_id=r.frame_id, batch_ms=1e3 * r.timings.get("batch", 0.0),
                            candidate_ms=1e3 * r.timings.get("candidate", 0.0),
                            pq_ms=1e3 * r.timings.get("pq", 0.0),
                            window_ms=1e3 * r.timings.get("window", 0.0)).model_dump() for r in self.rows]
        pd.DataFrame(timing, columns=list(TimingRow.model_fields)).to_csv(out / TIMING_FILE, index=False)
        pd.DataFrame([self.summary.model_dump()]).to_csv(out / SUMMARY_FILE, index=False)
        if self.scenario is not None:
            (out / SCENARIO_FILE).write_text(self.scenario.model_dump_json(indent=2), encoding="utf-8")
        return out


# ---------------- summary ----------------
def align_similarity(src: np.ndarray, dst: np.ndarray):
    """Least-squares s, R, t with dst ~ s R src + t (Umeyama)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = float(np.sum(a * a)) / src.shape[0]
    s = float(np.trace(np.diag(D) @ S)) / var if var > 0.0 else 1.0
    return s, R, mu_d - s * R @ mu_s


def _max_rel(est, truth) -> float:
    return float(np.max(est.relative_error(truth)[:4]))


def summarize(rows: List[TraceRow], calibrator: "SelfCalibrator", store: "MapStore",
              truth: Optional[GroundTruth], runtime: float) -> RunSummary:
    events = calibrator.events
    out = RunSummary(
        n_keyframes=len(rows), n_events=len(events),
        change_frames=";".join(str(e.n_change) for e in events),
        detected_at=";".join(str(e.detected_at) for e in events),
        accepted_segments=calibrator.accepted_segments, pq_size_final=len(calibrator.pq),
        runtime_s=runtime,
    )
    if truth is None or not rows:
        return out
    sc = truth.scenario
    out.scenario, out.seed = sc.name, sc.seed
    last = rows[-1].frame_id
    tl = calibrator.timeline

    zoom = truth.timeline[1][0] if len(truth.timeline) > 1 else None
    out.zoom_frame = zoom
    if zoom is not None:
        pre_frame = zoom - 1
        after = [e for e in events if e.detected_at >= zoom]
        if after:
            out.detection_latency = after[0].detected_at - zoom
            out.n_change_error = abs(after[0].n_change - zoom)
        post = tl.lookup(last)
        gt_post = truth.intrinsics_at(last)
        out.intrinsics_rel_error_post = _max_rel(post, gt_post)
        out.w_abs_error_post = abs(post.w - gt_post.w)
    else:
        pre_frame = last
    pre = tl.lookup(pre_frame)
    gt_pre = truth.intrinsics_at(pre_frame)
    out.intrinsics_rel_error_pre = _max_rel(pre, gt_pre)
    out.w_abs_error_pre = abs(pre.w - gt_pre.w)

    ids = [f for f in sorted(store.poses) if f in truth.poses]
    if len(ids) >= 3 and truth.path_length > 0.0:
        est = np.array([store.poses[f].translation for f in ids])
        gt = np.array([truth.poses[f].translation for f in ids])
        s, R, t = align_similarity(est, gt)
        err = np.linalg.norm(s * R @ est[-1] + t - gt[-1])
        out.final_translation_error_pct = 100.0 * float(err) / truth.path_length
    return out


# ---------------- compare ----------------
class Comparison(BaseModel):
    rows_a: int
    rows_b: int
    deviations: Dict[str, float]

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values(), default=0.0)


def _scenario_key(sc: Optional[Union[Scenario, dict]]) -> Optional[dict]:
    if sc is None:
        return None
    d = sc.model_dump() if isinstance(sc, Scenario) else dict(sc)
    d.pop("seed", None)
    return d


def compare(a: RunReport, b: RunReport) -> Comparison:
    """Per-column maximum absolute deviation over the common rows (string columns: mismatch count)."""
    ka, kb = _scenario_key(a.scenario), _scenario_key(b.scenario)
    if ka is not None and kb is not None and ka != kb:
        raise MismatchedScenarios("reports come from different scenarios")
    fa, fb = a.trace_frame(), b.trace_frame()
    n = min(len(fa), len(fb))
    fa, fb = fa.iloc[:n].reset_index(drop=True), fb.iloc[:n].reset_index(drop=True)
    dev: Dict[str, float] = {}
    for col in fa.columns:
        x, y = fa[col], fb[col]
        if pd.api.types.is_numeric_dtype(x) and pd.api.types.is_numeric_dtype(y):
            xv, yv = x.to_numpy(dtype=float), y.to_numpy(dtype=float)
            # equal values (inf included) and NaN pairs count as no deviation
            same = (xv == yv) | (np.isnan(xv) & np.isnan(yv))
            with np.errstate(invalid="ignore"):
                d = np.where(same, 0.0, np.abs(xv - yv))
            d = np.where(np.isnan(d), np.inf, d)
            dev[col] = float(d.max()) if n else 0.0
        else:
            dev[col] = float((x.astype(str) != y.astype(str)).sum())
    if len(fa) != len(fb) or a.summary.n_keyframes != b.summary.n_keyframes:
        dev["n_keyframes"] = float(abs(a.summary.n_keyframes - b.summary.n_keyframes))
    return Comparison(rows_a=len(a.rows), rows_b=len(b.rows), deviations=dev)


def load_report(out_dir: Union[str, Path]) -> RunReport:
    """Read a report directory written by RunReport.write."""
    d = Path(out_dir)
    trace = d / TRACE_FILE
    if not trace.is_file():
        raise ReportError(f"no {TRACE_FILE} in {d}", reason="missing_trace")
    df = pd.read_csv(trace, keep_default_na=False, na_values=["", "nan", "NaN"])
    df["candidate_status"] = df["candidate_status"].astype(str).replace("nan", "")
    rows = [TraceRow.model_validate(rec) for rec in df.to_dict(orient="records")]
    summary = RunSummary()
    if (d / SUMMARY_FILE).is_file():
        rec = pd.read_csv(d / SUMMARY_FILE, dtype=str, keep_default_na=False).to_dict(orient="records")[0]
        clean = {k: (None if v == "" else v) for k, v in rec.items()}
        summary = RunSummary.model_validate({k: v for k, v in clean.items() if v is not None})
    scenario = None
    if (d / SCENARIO_FILE).is_file():
        scenario = Scenario.model_validate(json.loads((d / SCENARIO_FILE).read_text(encoding="utf-8")))
    return RunReport(rows=rows, summary=summary, scenario=scenario)
