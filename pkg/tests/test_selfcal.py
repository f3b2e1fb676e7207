import numpy as np
import pytest

from AutoCal.camera import CameraIntrinsics
from AutoCal.errors import SolveFailed, SolverError
from AutoCal.liegroups import PoseSE3
from AutoCal.pipeline import initial_intrinsics
from AutoCal.selfcal import (
    CalibrationTimeline, Discarded, PriorityQueue, Segment, SelfCalibrator,
    evaluate_candidate, joint_pq_estimate, local_problem, run_initialization, try_swap,
)
from AutoCal.sim import Scenario, degenerate_motion, generate
from AutoCal.solver import PosteriorEstimate, Problem, SolverOptions
from AutoCal.store import MapStore

from .conftest import TRUE_INTRINSICS, add_truth_keyframe, make_synthetic, store_from_truth, synthetic_store

OFF = CameraIntrinsics(306.0, 294.0, 323.0, 238.0, 0.85)
LOOSE = 1e12


def _identity_posterior(segments):
    mu = TRUE_INTRINSICS.as_array()
    return PosteriorEstimate(mu=mu, Sigma=np.diag(mu ** 2), SigmaPrime=np.eye(5), n=sum(s.n for s in segments))


def _segment(score, start):
    empty = Problem(poses={start: PoseSE3.identity()}, landmarks={}, measurements=[], intrinsics=TRUE_INTRINSICS)
    post = _identity_posterior([])
    return Segment(frames=(start, start + 1), measurements=(), posterior=post, score=score, solution=empty)


# ---------------- timeline ----------------
def test_timeline():
    tl = CalibrationTimeline(TRUE_INTRINSICS)
    assert len(tl) == 1
    assert tl.lookup(1000) == TRUE_INTRINSICS
    tl.set(0, OFF)
    assert len(tl) == 1 and tl.lookup(5) == OFF
    tl.set(40, TRUE_INTRINSICS)
    assert tl.change_indices == [40]
    assert tl.lookup(39) == OFF and tl.lookup(40) == TRUE_INTRINSICS
    assert tl.segment_start(39) == 0 and tl.segment_start(77) == 40
    with pytest.raises(ValueError):
        tl.set(10, OFF)


# ---------------- priority queue ----------------
def test_queue_keeps_the_k_best():
    rng = np.random.default_rng(0)
    scores = rng.uniform(-40.0, -20.0, size=30)
    pq = PriorityQueue(5, _identity_posterior)
    for i, s in enumerate(scores):
        try_swap(pq, _segment(float(s), 10 * i))
    assert pq.scores == sorted(scores)[:5]
    assert pq.joint is not None
    assert pq.joint_score == pytest.approx(7.0947, abs=1e-4)


def test_queue_fills_before_comparing():
    pq = PriorityQueue(2, _identity_posterior)
    assert try_swap(pq, _segment(5.0, 0))[1]
    assert try_swap(pq, _segment(9.0, 10))[1]
    assert not try_swap(pq, _segment(9.0, 20))[1]
    assert try_swap(pq, _segment(1.0, 30))[1]
    assert pq.scores == [1.0, 5.0]


def test_failed_joint_estimate_reverts_the_queue():
    def failing(segments):
        if len(segments) > 1:
            raise SolverError("joint solve failed")
        return _identity_posterior(segments)

    pq = PriorityQueue(3, failing)
    try_swap(pq, _segment(1.0, 0))
    with pytest.raises(SolveFailed):
        try_swap(pq, _segment(0.5, 10))
    assert pq.scores == [1.0]


def test_queue_capacity_must_be_positive():
    with pytest.raises(ValueError):
        PriorityQueue(0, _identity_posterior)


# ---------------- segments ----------------
def test_local_problem_gauge():
    store = synthetic_store(make_synthetic(seed=6, n_poses=5))
    problem = local_problem(store, [0, 1, 2, 3, 4], OFF, min_observations=2)
    assert problem.fixed_poses == [0]
    assert len(problem.active_landmarks) == len(problem.landmarks) - 1
    assert problem.intrinsics_active


def test_candidate_recovers_intrinsics():
    store = synthetic_store(make_synthetic(seed=7, n_poses=6, n_landmarks=120))
    seg = evaluate_candidate(store, range(6), OFF, kappa_max=LOOSE)
    assert isinstance(seg, Segment)
    assert np.isfinite(seg.score)
    assert np.allclose(seg.posterior.mu, TRUE_INTRINSICS.as_array(), rtol=1e-6)
    again = evaluate_candidate(store, range(6), OFF, kappa_max=LOOSE)
    assert again.score == pytest.approx(seg.score, abs=1e-10)


def test_candidate_without_enough_data_is_discarded():
    store = synthetic_store(make_synthetic(seed=7, n_poses=4, n_landmarks=20))
    out = evaluate_candidate(store, range(4), OFF, min_measurements=10 ** 6)
    assert isinstance(out, Discarded)
    assert out.reason == "insufficient_data"


def test_pure_rotation_segment_is_discarded():
    stream, truth = degenerate_motion("pure_rotation", noise_sigma=0.0, outlier_fraction=0.0, max_keyframes=12)
    store = store_from_truth(stream, truth)
    out = evaluate_candidate(store, range(10), truth.scenario.intrinsics)
    assert isinstance(out, Discarded)


def test_joint_estimate(small_world):
    stream, truth = small_world
    store = store_from_truth(stream, truth)
    a = evaluate_candidate(store, range(0, 8), OFF, kappa_max=LOOSE)
    b = evaluate_candidate(store, range(8, 16), OFF, kappa_max=LOOSE)
    assert isinstance(a, Segment) and isinstance(b, Segment)
    post, result = joint_pq_estimate([a, b])
    assert result.n_measurements == a.n + b.n
    assert np.allclose(post.mu, truth.scenario.intrinsics.as_array(), rtol=1e-6)
    assert post.n == a.n + b.n


def test_initialization_needs_frames():
    store = synthetic_store(make_synthetic(seed=8))
    res = run_initialization(store, [0], OFF, threshold=0.0)
    assert not res.complete and res.intrinsics == OFF


def test_initialization_completes_below_threshold():
    store = synthetic_store(make_synthetic(seed=8, n_poses=6, n_landmarks=120))
    res = run_initialization(store, list(range(6)), OFF, threshold=1e9, kappa_max=LOOSE)
    assert res.complete
    assert np.allclose(res.intrinsics.as_array(), TRUE_INTRINSICS.as_array(), rtol=1e-6)
    strict = run_initialization(store, list(range(6)), OFF, threshold=-1e9, kappa_max=LOOSE)
    assert not strict.complete and np.isfinite(strict.score)


# ---------------- orchestration ----------------
def test_calibrator_runs_init_then_queue(small_world, settings):
    stream, truth = small_world
    s = settings.model_copy(update={"init_score_threshold": 1e9, "segment_size": 5, "pq_size": 3,
                                    "kappa_max": LOOSE})
    store = MapStore()
    cal = SelfCalibrator(store, OFF, s, SolverOptions.from_settings(s))
    phases = []
    for kf in stream.keyframes[:30]:
        add_truth_keyframe(store, kf, truth)
        phases.append(cal.process_keyframe(kf.frame_id).phase)
    assert phases[0] == "init" and phases[-1] == "pq"
    assert phases.index("pq") < 15
    assert cal.events == []
    assert len(cal.timeline) == 1
    assert 1 <= len(cal.pq) <= 3
    assert np.allclose(cal.intrinsics_for(29).as_array(), truth.scenario.intrinsics.as_array(), rtol=1e-4)

    cal.enter_initialization(25)
    assert cal.in_init
    assert cal.timeline.change_indices == [25]
    add_truth_keyframe(store, stream.keyframes[30], truth)
    assert cal.process_keyframe(30).phase == "init"


def test_queue_matches_brute_force_top_k():
    rng = np.random.default_rng(12)
    for trial in range(200):
        k = int(rng.integers(1, 8))
        scores = rng.normal(-30.0, 5.0, size=int(rng.integers(1, 40))).tolist()
        pq = PriorityQueue(k, _identity_posterior)
        for i, s in enumerate(scores):
            try_swap(pq, _segment(s, 10 * i))
        assert pq.scores == sorted(scores)[:k], f"trial {trial}"


def test_initialization_from_the_default_guess_completes(settings):
    stream, truth = generate(Scenario(max_keyframes=settings.init_max_keyframes))
    store = store_from_truth(stream, truth)
    guess = initial_intrinsics(settings, stream.width, stream.height)
    res = run_initialization(store, store.frame_ids, guess, settings.init_score_threshold,
                             kappa_max=settings.kappa_max, options=SolverOptions.from_settings(settings))
    assert res.result is not None and res.result.converged
    assert len(res.result.problem.measurements) >= 0.9 * res.n_measurements
    assert res.complete, res.score
    assert np.all(res.intrinsics.relative_error(truth.scenario.intrinsics)[:4] < 0.02)
    assert abs(res.intrinsics.w - truth.scenario.w) < 0.05


def test_every_pure_rotation_segment_is_discarded(settings):
    stream, truth = degenerate_motion("pure_rotation", noise_sigma=0.0, outlier_fraction=0.0, max_keyframes=40)
    assert len(stream) == 40
    store = store_from_truth(stream, truth)
    m = settings.segment_size
    for start in range(0, len(stream) - m + 1, m):
        out = evaluate_candidate(store, range(start, start + m), truth.scenario.intrinsics,
                                 min_measurements=settings.min_segment_measurements,
                                 kappa_max=settings.kappa_max)
        assert isinstance(out, Discarded), start


@pytest.mark.slow
def test_candidate_work_does_not_grow_with_the_trajectory(settings):
    stream, truth = generate(Scenario(path_length=300.0, max_keyframes=1000))
    assert len(stream) == 1000
    store = store_from_truth(stream, truth)
    m = settings.segment_size
    work = {}
    for end in (100, 1000):
        seg = evaluate_candidate(store, range(end - m, end), truth.scenario.intrinsics,
                                 min_measurements=settings.min_segment_measurements,
                                 kappa_max=settings.kappa_max)
        assert isinstance(seg, Segment)
        work[end] = seg.n
    assert max(work.values()) / min(work.values()) < 1.5
