import numpy as np
import pytest
from dataclasses import replace

from ctfusion.errors import DegenerateGeometry, InvalidArgument
from ctfusion.geometry import Pose, so3_log
from ctfusion.sim import (
    Calibration,
    Camera,
    WorldConfig,
    expand_track_landmarks,
    generate_truth,
    place_anchors,
    simulate,
    simulate_features,
    simulate_imu,
    simulate_priors,
    simulate_ranges,
    world_to_camera,
    Anchor,
)

QUIET = WorldConfig(duration=10.0).noiseless()


def test_circle_speed_constant():
    truth = generate_truth(replace(QUIET, trajectory="circle", radius=2.0, period=10.0))
    t = np.linspace(0, 10, 101)
    np.testing.assert_allclose(np.linalg.norm(truth.velocity(t), axis=1), 2 * np.pi * 2 / 10, rtol=1e-12)


def test_polyline_single_segment_constant_velocity():
    cfg = replace(QUIET, trajectory="polyline", waypoints=((0, 0, 1), (4, 0, 1)), speed=1.0, duration=4.0)
    truth = generate_truth(cfg)
    t = np.linspace(0.1, 3.9, 20)
    np.testing.assert_allclose(truth.velocity(t), np.tile([1.0, 0, 0], (20, 1)))
    np.testing.assert_array_equal(truth.acceleration(t), 0.0)


@pytest.mark.parametrize("kind", ["lissajous", "circle"])
def test_analytic_derivatives_match_finite_differences(kind):
    truth = generate_truth(replace(QUIET, trajectory=kind))
    t = np.linspace(0.5, 9.5, 37)
    e = 1e-5
    fd_v = (truth.position(t + e) - truth.position(t - e)) / (2 * e)
    fd_a = (truth.velocity(t + e) - truth.velocity(t - e)) / (2 * e)
    np.testing.assert_allclose(fd_v, truth.velocity(t), atol=1e-6)
    np.testing.assert_allclose(fd_a, truth.acceleration(t), atol=1e-6)
    R0, R1, R2 = truth.rotation(t - e), truth.rotation(t), truth.rotation(t + e)
    fd_w = np.array([(so3_log(a.T @ c)) / (2 * e) for a, c in zip(R0, R2)])
    np.testing.assert_allclose(fd_w, truth.angular_velocity(t), atol=1e-6)


def test_unknown_trajectory_kind():
    with pytest.raises(InvalidArgument):
        WorldConfig(trajectory="spiral")


@pytest.mark.parametrize("bad", [dict(imu_rate=0.0), dict(outlier_prob=1.5), dict(sigma_range=0.0)])
def test_config_invariants(bad):
    with pytest.raises(InvalidArgument):
        WorldConfig(**bad)


def _unit_square():
    sq = ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1), (0, 0, 1))
    return generate_truth(replace(QUIET, trajectory="polyline", waypoints=sq, speed=1.0, duration=4.0))


def test_anchor_corners():
    a = place_anchors(_unit_square(), 4, 2.0)
    np.testing.assert_allclose(np.array([a[i].position for i in range(4)]),
                               [[0, 0, 2], [1, 0, 2], [1, 1, 2], [0, 1, 2]], atol=1e-12)
    assert all(x.kind == "physical" for x in a.values())
    a3 = place_anchors(_unit_square(), 3, 2.0)
    assert sorted(a3) == [0, 1, 2]
    np.testing.assert_array_equal(a3[2].position, a[2].position)
    assert sorted(place_anchors(_unit_square(), 2, 2.0)) == [0, 1]


def test_anchor_errors():
    line = generate_truth(replace(QUIET, trajectory="polyline", waypoints=((0, 0, 1), (3, 0, 1)), duration=3.0))
    with pytest.raises(DegenerateGeometry):
        place_anchors(line, 4, 2.0)
    with pytest.raises(InvalidArgument):
        place_anchors(_unit_square(), 5, 2.0)


def test_static_hover_specific_force():
    cfg = replace(QUIET, trajectory="polyline", waypoints=((0, 0, 1), (1e-9, 0, 1)), speed=1e-12, duration=1.0)
    imu = simulate_imu(generate_truth(cfg), cfg)
    np.testing.assert_allclose(imu.accel, np.tile([0, 0, 9.81], (len(imu.t), 1)), atol=1e-12)
    np.testing.assert_array_equal(imu.gyro, 0.0)


def test_circle_imu_matches_closed_form():
    cfg = replace(QUIET, trajectory="circle", radius=2.0, period=10.0)
    imu = simulate_imu(generate_truth(cfg), cfg)
    w = 2 * np.pi / 10
    # yaw tracks the heading, so in the body frame the centripetal term points along -y
    np.testing.assert_allclose(imu.accel, np.tile([0, 2 * w * w, 9.81], (len(imu.t), 1)), atol=1e-12)
    np.testing.assert_allclose(imu.gyro, np.tile([0, 0, w], (len(imu.t), 1)), atol=1e-12)


def test_gyro_noise_mean():
    cfg = replace(QUIET, sigma_gyro=0.01, trajectory="circle", imu_rate=1e4, duration=10.0)
    truth = generate_truth(cfg)
    imu = simulate_imu(truth, cfg, np.random.default_rng(3))
    n = imu.gyro - truth.angular_velocity(imu.t)
    assert len(n) >= 1e5
    assert np.all(np.abs(n.mean(axis=0)) < 4 * 0.01 / np.sqrt(len(n)))


def test_feature_on_axis_hits_principal_point():
    cfg = replace(QUIET, duration=0.05)
    calib = Calibration(T_IC=Pose(Calibration().T_IC.rotation, np.zeros(3)))
    truth = generate_truth(replace(cfg, trajectory="circle"))
    p, R = truth.position(0.0), truth.rotation(0.0)
    on_axis = p + R @ np.array([5.0, 0, 0])
    behind = p - R @ np.array([5.0, 0, 0])
    fs = simulate_features(truth, {0: on_axis, 1: behind}, cfg, calib)
    first = fs.t == 0.0
    assert list(fs.landmark_id[first]) == [0]
    np.testing.assert_allclose(fs.uv[first][0], [320.0, 240.0], atol=1e-9)


def test_feature_projection_long_hand():
    cfg = replace(QUIET, duration=2.0)
    truth = generate_truth(cfg)
    calib = Calibration()
    rng = np.random.default_rng(0)
    lm = {i: truth.position(1.0) + truth.rotation(1.0) @ np.array([4.0, *rng.uniform(-1, 1, 2)]) for i in range(10)}
    fs = simulate_features(truth, lm, cfg, calib)
    assert fs.landmark_id.max() >= len(lm)  # tracks expire, so ids beyond the base table appear
    by_track = expand_track_landmarks(lm, fs.landmark_id)
    T_IC = calib.T_IC.matrix()
    for t, i, uv in zip(fs.t[::10], fs.landmark_id[::10], fs.uv[::10]):
        T_WI = truth.pose(t).matrix()
        Xc = (np.linalg.inv(T_IC) @ np.linalg.inv(T_WI) @ np.append(by_track[i], 1))[:3]
        cam = calib.camera
        np.testing.assert_allclose(uv, [cam.fx * Xc[0] / Xc[2] + cam.cx, cam.fy * Xc[1] / Xc[2] + cam.cy], atol=1e-10)


class _Fixed:
    def position(self, t):
        return np.zeros(np.shape(t) + (3,))


def test_range_345_and_outlier_flags():
    cfg = replace(QUIET, duration=1.0)
    anchors = {0: Anchor(0, [3, 4, 0])}
    rs = simulate_ranges(_Fixed(), anchors, cfg)
    np.testing.assert_allclose(rs.range, 5.0, atol=1e-9)
    rs = simulate_ranges(_Fixed(), anchors, replace(cfg, outlier_prob=1.0))
    assert rs.is_outlier_truth.all()
    assert np.all(rs.range - 5.0 >= 0.5 - 1e-9) and np.all(rs.range - 5.0 <= 3.0 + 1e-9)


def test_outlier_fraction():
    cfg = replace(QUIET, duration=1000.0, range_rate=10.0, outlier_prob=0.1)
    rs = simulate_ranges(_Fixed(), {0: Anchor(0, [3, 4, 0])}, cfg, np.random.default_rng(8))
    assert len(rs.t) >= 1e4
    assert abs(rs.is_outlier_truth.mean() - 0.1) < 0.02


def test_ranges_are_time_multiplexed():
    cfg = replace(QUIET, duration=1.0, range_rate=10.0)
    anchors = {i: Anchor(i, [i, 1.0, 3.0]) for i in range(4)}
    rs = simulate_ranges(_Fixed(), anchors, cfg)
    assert np.all(np.diff(rs.t) > 0)
    np.testing.assert_allclose(np.diff(rs.t), 0.025, atol=1e-12)
    assert list(rs.anchor_id[:8]) == [0, 1, 2, 3, 0, 1, 2, 3]


def test_priors_zero_drift_equal_truth():
    truth = generate_truth(QUIET)
    pr = simulate_priors(truth, QUIET)
    np.testing.assert_allclose(pr.position, truth.position(pr.t), atol=1e-15)
    np.testing.assert_allclose(pr.rotation, truth.rotation(pr.t), atol=1e-15)
    np.testing.assert_allclose(np.diff(pr.t), 1 / QUIET.feature_rate, atol=1e-12)


def test_prior_drift_magnitude():
    cfg = replace(QUIET, prior_drift_rate=0.01, prior_random_walk=0.002)
    truth = generate_truth(cfg)
    errs = []
    for seed in range(20):
        pr = simulate_priors(truth, cfg, np.random.default_rng(seed))
        errs.append(np.linalg.norm(pr.position[-1] - truth.position(pr.t[-1])))
    assert 0.05 < np.median(errs) < 0.2


def test_dataset_determinism_and_sorting():
    cfg = WorldConfig(duration=3.0, seed=42)
    a, b = simulate(cfg), simulate(cfg)
    for s in ("imu", "features", "ranges", "priors", "ground_truth"):
        for k, v in vars(getattr(a, s)).items():
            np.testing.assert_array_equal(v, vars(getattr(b, s))[k])
        assert np.all(np.diff(getattr(a, s).t) >= 0)
    assert set(a.features.landmark_id) <= set(a.landmarks)
    assert set(a.ranges.anchor_id) <= set(a.anchors)
    c = simulate(replace(cfg, seed=43))
    assert not np.array_equal(a.imu.gyro, c.imu.gyro)


def test_spline_truth_is_exact_spline():
    cfg = replace(QUIET, truth_knot_spacing=0.1, duration=4.0)
    truth = generate_truth(cfg)
    assert truth.grid.h == 0.1
    lis = generate_truth(replace(cfg, truth_knot_spacing=0.0))
    t = np.linspace(0, 4, 50)
    assert np.abs(truth.position(t) - lis.position(t)).max() < 1e-3


def test_world_to_camera_batch():
    calib = Calibration()
    truth = generate_truth(QUIET)
    t = np.array([0.3, 1.7])
    R, p = world_to_camera(truth.rotation(t), truth.position(t), calib.T_IC)
    for k in range(2):
        M = np.linalg.inv(calib.T_IC.matrix()) @ np.linalg.inv(truth.pose(t[k]).matrix())
        np.testing.assert_allclose(R[k], M[:3, :3], atol=1e-12)
        np.testing.assert_allclose(p[k], M[:3, 3], atol=1e-12)
