import numpy as np
import pytest

from AutoCal.cli import resolve_scenario
from AutoCal.errors import ScenarioParseError
from AutoCal.factors import predict
from AutoCal.sim import (
    Scenario, degenerate_motion, dump_stream, generate, inject_zoom, load_scenario, load_stream, pose_at,
)


def _residuals(stream, truth):
    out = []
    for kf in stream:
        intr_m = truth.intrinsics_at(kf.frame_id)
        for m in kf.measurements:
            lm = truth.landmarks[m.landmark_id]
            intr_r = truth.intrinsics_at(lm.ref_frame_id)
            h = predict(intr_r, truth.poses[lm.ref_frame_id], truth.poses[m.frame_id], lm, intr_m)
            out.append(np.asarray(m.z) - np.asarray(h))
    return np.array(out)


def test_generation_is_deterministic(small_scenario, small_world):
    stream, _ = small_world
    again, _ = generate(small_scenario)
    assert len(again) == len(stream)
    for a, b in zip(stream, again):
        assert np.array_equal(a.pose.translation, b.pose.translation)
        assert sorted(a.references) == sorted(b.references)
        assert np.array_equal([m.z for m in a.measurements], [m.z for m in b.measurements])


def test_seed_changes_the_world(small_scenario, small_world):
    other, _ = generate(small_scenario.model_copy(update={"seed": 4}))
    assert not np.array_equal(other[1].measurements[0].z, small_world[0][1].measurements[0].z)


def test_noiseless_stream_has_zero_residuals(small_world):
    stream, truth = small_world
    assert len(stream) >= 35
    assert np.abs(_residuals(stream, truth)).max() < 1e-8


def test_stream_invariants(small_world):
    stream, truth = small_world
    seen = set()
    for kf in stream:
        assert seen.isdisjoint(kf.references)
        assert all(m.landmark_id in seen for m in kf.measurements)
        assert all(m.frame_id == kf.frame_id for m in kf.measurements)
        seen.update(kf.references)
        assert kf.n_tracks <= truth.scenario.target_tracks
    assert [kf.frame_id for kf in stream] == list(range(len(stream)))


def test_noise_and_outliers_are_recorded():
    sc = Scenario(name="noisy", seed=5, path="line", path_length=3.0, noise_sigma=0.5, outlier_fraction=0.05)
    stream, truth = generate(sc)
    clean = Scenario(**{**sc.model_dump(), "noise_sigma": 0.0, "outlier_fraction": 0.0})
    res = _residuals(stream, truth)
    assert truth.outliers
    noise = np.array([truth.noise[(m.landmark_id, kf.frame_id)] for kf in stream for m in kf.measurements])
    mask = np.array([(m.landmark_id, kf.frame_id) not in truth.outliers for kf in stream for m in kf.measurements])
    assert np.allclose(res[mask], noise[mask], atol=1e-8)
    assert 0.3 < np.std(noise[mask]) < 0.7
    assert all(m.sigma == 0.5 for kf in stream for m in kf.measurements)
    assert clean.sigma == clean.pixel_sigma_floor


def test_zoom_cuts_tracks_and_changes_intrinsics(small_scenario):
    stream, truth = generate(small_scenario.model_copy(update={"zoom_frame": 15}))
    assert len(truth.timeline) == 2
    (_, before), (n_star, after) = truth.timeline
    assert n_star == 15
    assert after.fx == pytest.approx(2.0 * before.fx) and after.w < before.w
    for kf in stream.keyframes[15:]:
        assert all(truth.landmarks[m.landmark_id].ref_frame_id >= 15 for m in kf.measurements)
    assert np.abs(_residuals(stream, truth)).max() < 1e-8


def test_zoom_fraction(small_scenario, small_world):
    stream, truth = generate(small_scenario.model_copy(update={"zoom_fraction": 0.5}))
    assert truth.timeline[1][0] == round(0.5 * len(small_world[0]))


def test_zoom_outside_the_stream_is_ignored(small_scenario):
    _, truth = generate(small_scenario.model_copy(update={"zoom_frame": 10_000}))
    assert len(truth.timeline) == 1


def test_inject_zoom_validates_its_frame(small_world):
    stream, truth = small_world
    with pytest.raises(ValueError):
        inject_zoom(stream, truth, 0, 2.0)


def test_stationary_camera_makes_one_keyframe():
    stream, _ = degenerate_motion("stationary")
    assert len(stream) <= 1


def test_pure_rotation_keeps_the_camera_centre():
    stream, truth = degenerate_motion("pure_rotation", max_keyframes=10)
    centres = np.array([kf.pose.translation for kf in stream])
    assert len(stream) == 10
    assert np.allclose(centres, centres[0])


def test_poses_are_rotations(small_scenario):
    for s in np.linspace(0.0, small_scenario.path_length, 17):
        assert pose_at(s, small_scenario).orthonormality_error() < 1e-12


def test_load_scenario(tmp_path):
    p = tmp_path / "walk.env"
    p.write_text("# comment\nseed=11\npath=line\npath_length=12.5\nnoise_sigma=0.25\n", encoding="utf-8")
    sc = load_scenario(p)
    assert (sc.name, sc.seed, sc.path, sc.path_length, sc.noise_sigma) == ("walk", 11, "line", 12.5, 0.25)
    assert load_scenario(p, seed=3, name=None).seed == 3


@pytest.mark.parametrize("body", ["path=spiral\n", "unknown_key=1\n", "noise_sigma=-1\n",
                                  "tube_inner_radius=5\ntube_outer_radius=4\n"])
def test_bad_scenarios(tmp_path, body):
    p = tmp_path / "bad.env"
    p.write_text(body, encoding="utf-8")
    with pytest.raises(ScenarioParseError):
        load_scenario(p)


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ScenarioParseError):
        load_scenario(tmp_path / "nope.env")


def test_dump_and_load_stream(tmp_path, small_scenario, small_world):
    stream, _ = small_world
    path = tmp_path / "stream.jsonl"
    dump_stream(stream, path, small_scenario)
    back = load_stream(path)
    assert (back.width, back.height, len(back)) == (stream.width, stream.height, len(stream))
    kf, kb = stream[7], back[7]
    assert np.allclose(kf.pose.rotation, kb.pose.rotation, atol=1e-12)
    assert np.allclose(kf.pose.translation, kb.pose.translation)
    assert sorted(kf.references) == sorted(kb.references)
    assert np.allclose([m.z for m in kf.measurements], [m.z for m in kb.measurements])


def test_whitened_noise_is_standard_normal():
    stream, truth = generate(Scenario(max_keyframes=60))
    mask = np.array([(m.landmark_id, kf.frame_id) not in truth.outliers for kf in stream for m in kf.measurements])
    white = _residuals(stream, truth)[mask] / truth.scenario.sigma
    assert white.shape[0] > 2000
    assert np.all(np.abs(white.mean(axis=0)) < 0.1)
    assert np.all(np.abs(white.var(axis=0) - 1.0) < 0.1)


@pytest.mark.slow
def test_line_keeps_enough_measurements_per_keyframe():
    stream, _ = generate(load_scenario(resolve_scenario("line")))
    assert len(stream) > 1
    assert min(len(kf.measurements) for kf in stream.keyframes[1:]) >= 60
