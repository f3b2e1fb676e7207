import numpy as np
import pytest

from AutoCal.cli import resolve_scenario
from AutoCal.pipeline import Pipeline, initial_intrinsics, run_pipeline
from AutoCal.report import compare
from AutoCal.sim import Scenario, generate, load_scenario

TINY = Scenario(name="tiny", seed=2, path="line", path_length=3.0, noise_sigma=0.0, outlier_fraction=0.0)


@pytest.fixture(scope="module")
def tiny_world():
    return generate(TINY)


def test_initial_guess(settings):
    c = initial_intrinsics(settings, 640, 480)
    assert c.fx == pytest.approx(320.0) and c.w == settings.w_init


def test_run_produces_one_row_per_keyframe(tiny_world, settings):
    stream, truth = tiny_world
    rep = run_pipeline(stream, truth, settings, TINY)
    assert [r.frame_id for r in rep.rows] == list(range(len(stream)))
    assert rep.rows[0].phase == "init"
    assert rep.rows[0].window_size == 0
    assert all(r.window_size >= 2 for r in rep.rows[1:])
    assert rep.summary.n_keyframes == len(stream)
    assert rep.summary.scenario == "tiny"
    assert rep.summary.zoom_frame is None
    assert np.isfinite(rep.summary.final_translation_error_pct)


def test_runs_are_reproducible(tiny_world, settings):
    stream, truth = tiny_world
    a = run_pipeline(stream, truth, settings, TINY)
    b = run_pipeline(stream, truth, settings, TINY)
    assert compare(a, b).max_deviation == 0.0


def test_background_adaptation(tiny_world, settings):
    stream, truth = tiny_world
    pipe = Pipeline(settings.model_copy(update={"background_adapt": True}), stream.width, stream.height)
    try:
        for kf in stream:
            pipe.step(kf, first_pose=stream[0].pose)
    finally:
        pipe.close()
    assert len(pipe.rows) == len(stream)
    assert pipe._executor is None


# ---------------- full-length scenarios ----------------
def _run(settings, scenario):
    stream, truth = generate(scenario)
    return stream, truth, run_pipeline(stream, truth, settings, scenario)


def _zoom(seed=7):
    return load_scenario(resolve_scenario("zoom"), seed=seed)


@pytest.mark.slow
def test_no_change_run_recovers_the_intrinsics(settings):
    stream, truth, rep = _run(settings, Scenario(path_length=120.0, max_keyframes=320))
    s = rep.summary
    assert len(stream) >= 300
    assert s.n_events == 0
    assert s.accepted_segments >= settings.pq_size
    assert s.pq_size_final == settings.pq_size
    assert rep.rows[-1].phase == "pq"
    assert s.intrinsics_rel_error_pre < 0.01
    assert s.w_abs_error_pre < 0.05 * truth.scenario.w
    assert s.final_translation_error_pct < 5.0


@pytest.mark.slow
def test_false_alarms_are_rare(settings):
    quiet = 0
    for seed in range(100):
        stream, _, rep = _run(settings, Scenario(seed=seed, path_length=150.0, max_keyframes=500))
        assert len(stream) == 500
        assert rep.summary.accepted_segments > 0
        quiet += rep.summary.n_events == 0
    assert quiet >= 95


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(20))
def test_zoom_is_detected_once(settings, seed):
    _, truth, rep = _run(settings, _zoom(seed))
    s = rep.summary
    assert s.zoom_frame == truth.timeline[1][0]
    assert s.n_events == 1
    assert s.n_change_error is not None
    assert s.n_change_error <= settings.segment_size * (settings.n_test + 2)
    assert s.intrinsics_rel_error_post < 0.02


@pytest.mark.slow
def test_zoom_run_keeps_its_trajectory(settings):
    _, _, rep = _run(settings, _zoom())
    _, _, plain = _run(settings, _zoom().model_copy(update={"zoom_fraction": None}))
    assert plain.summary.zoom_frame is None
    assert rep.summary.final_translation_error_pct < 2.0
    assert rep.summary.final_translation_error_pct < 10.0 * plain.summary.final_translation_error_pct


@pytest.mark.slow
def test_ignoring_the_zoom_ruins_the_intrinsics(settings):
    _, _, rep = _run(settings, _zoom())
    _, _, blind = _run(settings.model_copy(update={"change_detection": False}), _zoom())
    assert blind.summary.n_events == 0
    assert blind.summary.intrinsics_rel_error_post >= 10.0 * rep.summary.intrinsics_rel_error_post


@pytest.mark.slow
def test_pure_rotation_accepts_no_segment(settings):
    _, _, spin = _run(settings, load_scenario(resolve_scenario("pure_rotation"), max_keyframes=120))
    assert spin.summary.accepted_segments == 0
    _, _, walk = _run(settings, Scenario(max_keyframes=120))
    assert walk.summary.accepted_segments >= 1
