import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctfusion.errors import InvalidArgument, OutOfRange, UnderConstrained
from ctfusion.geometry import Pose, is_rotation, so3_exp, so3_exp_batch, so3_log
from ctfusion.spline import (
    KnotGrid,
    SplineTrajectory,
    basis,
    body_angular_velocity,
    eval_acceleration,
    eval_position,
    eval_rotation,
    eval_velocity,
    fit_translation,
    init_from_prior,
    make_grid,
)


def cox_de_boor(i, k, x, knots):
    if k == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = (x - knots[i]) / (knots[i + k] - knots[i]) * cox_de_boor(i, k - 1, x, knots)
    right = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1]) * cox_de_boor(i + 1, k - 1, x, knots)
    return left + right


def oracle_basis(u):
    # cubic B-splines on integer knots; segment [3, 4) sees functions 0..3
    knots = np.arange(8.0)
    return np.array([cox_de_boor(j, 3, 3.0 + u, knots) for j in range(4)])


def random_spline(seed=0, M=30, h=0.05):
    rng = np.random.default_rng(seed)
    grid = KnotGrid(0.0, h, M)
    P = np.cumsum(rng.normal(0, 0.05, (grid.n_control, 3)), axis=0)
    Rc = so3_exp_batch(np.cumsum(rng.normal(0, 0.08, (grid.n_control, 3)), axis=0))
    return SplineTrajectory(grid, P, Rc)


def test_basis_at_zero_matches_cox_de_boor():
    b, _, _ = basis(0.0)
    np.testing.assert_allclose(b, [1 / 6, 2 / 3, 1 / 6, 0.0], atol=1e-15)
    np.testing.assert_allclose(b, oracle_basis(0.0), atol=1e-15)


@pytest.mark.parametrize("u", [0.0, 0.13, 0.37, 0.5, 0.999])
def test_basis_matches_cox_de_boor(u):
    np.testing.assert_allclose(basis(u)[0], oracle_basis(u), atol=1e-14)


def test_partition_of_unity():
    u = np.linspace(0, 1, 1001, endpoint=False)
    b, db, ddb = basis(u)
    assert np.max(np.abs(b.sum(-1) - 1.0)) < 1e-12
    assert abs(basis(0.37)[0].sum() - 1.0) < 1e-14
    assert np.max(np.abs(db.sum(-1))) < 1e-12
    assert np.max(np.abs(ddb.sum(-1))) < 1e-12


def test_basis_derivatives_match_finite_differences():
    d = 1e-6
    for u in np.linspace(0.01, 0.98, 25):
        b, db, ddb = basis(u)
        np.testing.assert_allclose(db, (basis(u + d)[0] - basis(u - d)[0]) / (2 * d), atol=1e-6)
        np.testing.assert_allclose(ddb, (basis(u + d)[1] - basis(u - d)[1]) / (2 * d), atol=1e-6)


def test_cumulative_basis_is_suffix_sum():
    b = basis(0.42)[0]
    c = basis(0.42, cumulative=True)[0]
    np.testing.assert_allclose(c, [b.sum(), b[1:].sum(), b[2:].sum(), b[3]], atol=1e-15)


@pytest.mark.parametrize("u", [-0.1, 1.0, np.nan])
def test_basis_rejects_out_of_range(u):
    with pytest.raises(InvalidArgument):
        basis(u)


def test_make_grid_counts():
    assert make_grid(0, 1.0, 0.05).M == 20
    assert len(make_grid(0, 1.0, 0.05).knots) == 21
    assert make_grid(0, 1.01, 0.05).M == 21
    g = make_grid(0, 0.049, 0.05)
    assert g.M == 1 and g.t_max >= 0.049
    with pytest.raises(InvalidArgument):
        make_grid(0, 1, 0)
    with pytest.raises(InvalidArgument):
        make_grid(0, 1, -0.1)


@settings(max_examples=100)
@given(st.floats(0.01, 20.0), st.floats(0.01, 0.2))
def test_make_grid_covers_span(duration, h):
    g = make_grid(0.0, duration, h)
    assert g.t_max >= duration - 1e-9
    assert g.t0 + (g.M - 1) * g.h < duration


def test_constant_control_points():
    grid = KnotGrid(0.0, 0.05, 10)
    c = np.array([1.0, -2.0, 0.5])
    traj = SplineTrajectory.constant(grid, Pose(so3_exp([0.1, 0.2, 0.3]), c))
    t = np.linspace(0, grid.t_max, 57)
    np.testing.assert_allclose(traj.position(t), np.tile(c, (57, 1)), atol=1e-14)
    np.testing.assert_allclose(traj.velocity(t), 0, atol=1e-12)
    np.testing.assert_allclose(traj.rotation(t), np.tile(so3_exp([0.1, 0.2, 0.3]), (57, 1, 1)), atol=1e-14)
    np.testing.assert_allclose(traj.angular_velocity(t), 0, atol=1e-12)


def test_cubic_polynomial_reproduced_after_fit():
    grid = make_grid(0.0, 2.0, 0.1)
    coeff = np.array([[0.3, -1.0, 0.5, 2.0], [1.0, 0.0, -0.2, 0.1], [-0.4, 0.7, 0.0, -0.3]])

    def f(t):
        return np.stack([np.polyval(c[::-1], t) for c in coeff], axis=-1)

    ts = np.linspace(0, grid.t_max, 200)
    P = fit_translation(grid, ts, f(ts))
    traj = SplineTrajectory.constant(grid).replace(translation_cps=P)
    tq = np.random.default_rng(0).uniform(0, grid.t_max, 100)
    np.testing.assert_allclose(traj.position(tq), f(tq), atol=1e-10)


def test_linear_control_points_give_constant_velocity():
    grid = KnotGrid(0.0, 0.05, 12)
    v = np.array([0.4, -1.0, 0.25])
    P = np.arange(grid.n_control)[:, None] * (v * grid.h)
    traj = SplineTrajectory.constant(grid).replace(translation_cps=P)
    t = np.linspace(0, grid.t_max, 31)
    np.testing.assert_allclose(traj.velocity(t), np.tile(v, (31, 1)), atol=1e-12)
    np.testing.assert_allclose(traj.acceleration(t), 0, atol=1e-10)


def _rel(a, b):
    return np.linalg.norm(a - b, axis=-1) / np.maximum(np.linalg.norm(b, axis=-1), 1e-3)


def test_derivatives_match_central_differences():
    traj = random_spline(1)
    rng = np.random.default_rng(2)
    t = rng.uniform(0.01, traj.grid.t_max - 0.01, 120)
    d = 1e-6
    v_fd = (traj.position(t + d) - traj.position(t - d)) / (2 * d)
    a_fd = (traj.velocity(t + d) - traj.velocity(t - d)) / (2 * d)
    assert np.max(_rel(traj.velocity(t), v_fd)) < 1e-5
    assert np.max(_rel(traj.acceleration(t), a_fd)) < 1e-5
    R = traj.rotation(t)
    dR = (traj.rotation(t + d) - traj.rotation(t - d)) / (2 * d)
    Om = np.swapaxes(R, -1, -2) @ dR
    w_fd = np.stack([Om[:, 2, 1], Om[:, 0, 2], Om[:, 1, 0]], axis=-1)
    assert np.max(_rel(traj.angular_velocity(t), w_fd)) < 1e-5


def test_c2_continuity_at_knots():
    traj = random_spline(3)
    knots = traj.grid.knots[1:-1]
    e = 1e-12
    for order in range(3):
        left = traj.translation_terms(knots - e, order)
        right = traj.translation_terms(knots + e, order)
        assert np.max(np.abs(left - right)) < 1e-8
    np.testing.assert_allclose(traj.rotation(knots - e), traj.rotation(knots + e), atol=1e-9)
    np.testing.assert_allclose(traj.angular_velocity(knots - e), traj.angular_velocity(knots + e), atol=1e-8)


def test_rotation_is_valid_everywhere():
    traj = random_spline(4)
    for R in traj.rotation(np.linspace(0, traj.grid.t_max, 300)):
        assert is_rotation(R)


def test_zero_increments_give_base_rotation():
    grid = KnotGrid(0.0, 0.05, 8)
    base = so3_exp([0.3, -0.1, 0.7])
    traj = SplineTrajectory.constant(grid, Pose(base, np.zeros(3)))
    np.testing.assert_allclose(traj.rotation_increments, 0, atol=1e-15)
    np.testing.assert_allclose(traj.rotation(0.123), base, atol=1e-14)


def test_single_axis_constant_increments_spin_at_constant_rate():
    grid = KnotGrid(0.0, 0.05, 20)
    rate = 1.0
    step = rate * grid.h
    Rc = so3_exp_batch(np.outer(np.arange(grid.n_control) * step, [0, 0, 1.0]))
    traj = SplineTrajectory.constant(grid).replace(rotation_cps=Rc)
    t = np.linspace(0, grid.t_max, 77)
    np.testing.assert_allclose(traj.angular_velocity(t), np.tile([0, 0, rate], (77, 1)), atol=1e-8)
    # closed form: R(t) = Exp((t/h + 1) * step * z)
    for ti, R in zip(t, traj.rotation(t)):
        np.testing.assert_allclose(R, so3_exp([0, 0, (ti / grid.h + 1.0) * step]), atol=1e-12)
    np.testing.assert_allclose(traj.rotation_increments, np.tile([0, 0, step], (grid.n_control - 1, 1)), atol=1e-14)


def test_locality_of_control_points():
    traj = random_spline(5)
    i = 12
    P = traj.translation_cps.copy()
    P[i] += [0.5, 0, 0]
    Rc = traj.rotation_cps.copy()
    Rc[i] = Rc[i] @ so3_exp([0.2, 0, 0])
    pert = traj.replace(translation_cps=P, rotation_cps=Rc)
    t = np.linspace(0, traj.grid.t_max, 2000, endpoint=False)
    seg, _ = traj.grid.segment(t)
    touching = (seg <= i) & (seg >= i - 3)
    dp = np.linalg.norm(pert.position(t) - traj.position(t), axis=1)
    dR = np.abs(pert.rotation(t) - traj.rotation(t)).max(axis=(1, 2))
    assert np.all(dp[~touching] == 0) and np.all(dR[~touching] == 0)
    # weight of control i vanishes only at the left end of segment i-3
    assert np.count_nonzero(dp[touching]) >= touching.sum() - 1


def test_out_of_span_raises():
    traj = random_spline(6)
    with pytest.raises(OutOfRange):
        eval_position(traj, -0.01)
    with pytest.raises(OutOfRange):
        eval_rotation(traj, traj.grid.t_max + 0.01)
    with pytest.raises(OutOfRange):
        eval_velocity(traj, np.nan)
    with pytest.raises(OutOfRange):
        body_angular_velocity(traj, 99.0)
    eval_acceleration(traj, traj.grid.t_max)  # closed end is allowed


def test_init_from_prior_self_consistency():
    src = random_spline(7, M=40)
    ts = np.linspace(0, src.grid.t_max, 161)
    priors = [(t, src.pose(t)) for t in ts]
    fit = init_from_prior(priors, src.grid)
    np.testing.assert_allclose(fit.position(ts), src.position(ts), atol=1e-8)
    ang = [np.linalg.norm(so3_log(a.T @ b)) for a, b in zip(fit.rotation(ts), src.rotation(ts))]
    assert max(ang) < 1e-6
    np.testing.assert_array_equal(fit.gyro_bias, 0)
    np.testing.assert_array_equal(fit.accel_bias, 0)


def test_init_from_static_priors_is_constant():
    grid = make_grid(0.0, 1.0, 0.05)
    pose = Pose(so3_exp([0.1, 0.0, -0.2]), np.array([1.0, 2.0, 3.0]))
    priors = [(t, pose) for t in np.linspace(0, 1, 21)]
    traj = init_from_prior(priors, grid)
    t = np.linspace(0, 1, 50)
    np.testing.assert_allclose(traj.position(t), np.tile(pose.translation, (50, 1)), atol=1e-9)
    np.testing.assert_allclose(traj.rotation(t), np.tile(pose.rotation, (50, 1, 1)), atol=1e-9)


def test_init_from_prior_needs_four_poses():
    grid = make_grid(0.0, 1.0, 0.05)
    with pytest.raises(UnderConstrained):
        init_from_prior([(t, Pose()) for t in (0.0, 0.5, 1.0)], grid)
