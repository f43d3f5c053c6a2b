import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photoba.autodiff import Dual, evaluate_with_derivatives, finite_difference_check
from photoba.camera import (
    CameraModelError,
    _distort_xy,
    _kappa_xy,
    Intrinsics,
    InvalidIntrinsics,
    OutOfModelRange,
    PointBehindCamera,
    Pose,
    distort,
    invert_distortion,
    kappa,
    kappa_inv,
    monotone_radius,
    pi,
    project,
    rodrigues,
    undistort,
)
from photoba.scene import _cross

from oracles import newton_oracle

finite = st.floats(-10, 10, allow_nan=False)


def quat_rotate(axis_angle, v):
    """Rotate ``v`` with the unit quaternion for ``axis_angle`` (q v q*)."""
    th = np.linalg.norm(axis_angle)
    a = axis_angle / th
    w, q = np.cos(th / 2), np.sin(th / 2) * a
    t = 2 * np.cross(q, v)
    return v + w * t + np.cross(q, t)


# -- pi ------------------------------------------------------------------------------


def test_pi_hand_values():
    np.testing.assert_allclose(pi([2, 4, 2]), [1, 2])
    np.testing.assert_array_equal(pi([0, 0, 1]), [0, 0])


def test_pi_rejects_camera_plane():
    with pytest.raises(PointBehindCamera):
        pi([1, 1, 0])
    with pytest.raises(PointBehindCamera):
        pi([1, 1, 1e-12], eps_z=1e-9)


# -- kappa ------------------------------------------------------------------------------


def test_kappa_hand_value():
    np.testing.assert_allclose(kappa([2, 3, 10, 20], [1, 1]), [12, 23])


def test_kappa_identity_calibration():
    x = np.array([0.3, -1.7])
    np.testing.assert_array_equal(kappa([1, 1, 0, 0], x), x)


def test_kappa_zero_focal_rejected():
    with pytest.raises(InvalidIntrinsics):
        kappa([0, 1, 0, 0], [1, 1])
    with pytest.raises(InvalidIntrinsics):
        kappa_inv([1, 0, 0, 0], [1, 1])


@given(st.tuples(st.floats(1, 2000), st.floats(1, 2000), finite, finite), finite, finite)
def test_kappa_roundtrip(s, x, y):
    back = kappa_inv(s, kappa(s, [x, y]))
    np.testing.assert_allclose(back, [x, y], atol=1e-12 * max(1, abs(s[2]), abs(s[3])), rtol=1e-13)


# -- distortion ------------------------------------------------------------------------------


def test_distort_zero_coefficients():
    x = np.array([0.7, -0.2])
    np.testing.assert_array_equal(distort([0, 0], x), x)


def test_distort_uses_squared_radius():
    np.testing.assert_allclose(distort([0.1, 0], [1, 0]), [1.1, 0])
    # r = |x|^2 = 4 here, so the factor is 1 + 0.1*4 + 0.01*16
    np.testing.assert_allclose(distort([0.1, 0.01], [2, 0]), [2 * 1.56, 0])


def test_distort_origin_fixed():
    np.testing.assert_array_equal(distort([0.1, 0.01], [0, 0]), [0, 0])


def test_invert_identity_lens():
    inv = invert_distortion([0, 0])
    np.testing.assert_allclose(inv.b, np.zeros(6), atol=1e-14)
    assert not inv.reduced


def test_invert_first_coefficient():
    # first-order series inversion gives b1 = -l1; the least-squares fit of all
    # six terms shifts it slightly
    inv = invert_distortion([0.1, 0])
    assert inv.b[0] == pytest.approx(-0.1, abs=1e-4)


def test_invert_matches_newton_oracle_at_point():
    l = np.array([0.05, -0.01])
    x = np.array([0.4, 0.3])
    xd = distort(l, x)
    est = undistort(invert_distortion(l), xd)
    assert np.linalg.norm(est - newton_oracle(l, xd)) < 1e-5
    assert np.linalg.norm(est - x) < 1e-5


def test_undistort_identity_and_origin():
    inv = invert_distortion([0, 0])
    np.testing.assert_allclose(undistort(inv, [0.7, 0.2]), [0.7, 0.2], atol=1e-14)
    np.testing.assert_array_equal(undistort(invert_distortion([0.1, 0.01]), [0, 0]), [0, 0])


def test_undistort_out_of_range():
    inv = invert_distortion([0.05, 0.0])
    with pytest.raises(OutOfModelRange):
        undistort(inv, [1.5, 0.0])


def test_non_monotone_distortion_reduces_radius():
    l = [-0.5, 0.0]  # derivative 1 - 1.5 r vanishes at r = 2/3
    assert monotone_radius(l) == pytest.approx(2 / 3)
    with pytest.warns(RuntimeWarning):
        inv = invert_distortion(l)
    assert inv.reduced and inv.r_max == pytest.approx(2 / 3)


def test_newton_refinement_matches_oracle():
    l = np.array([-0.2, -0.05])
    x = np.array([0.6, 0.5])
    xd = distort(l, x)
    polished = undistort(invert_distortion(l), xd, newton_l=l)
    np.testing.assert_allclose(polished, newton_oracle(l, xd), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.1, 0.1), st.floats(-0.02, 0.02), st.floats(0, 0.8), st.floats(0, 2 * np.pi))
def test_roundtrip_moderate_distortion(l1, l2, r2, ang):
    l = np.array([l1, l2])
    x = np.sqrt(r2) * np.array([np.cos(ang), np.sin(ang)])
    xd = distort(l, x)
    est = undistort(invert_distortion(l), xd)
    assert np.linalg.norm(est - x) < 1e-4
    assert np.linalg.norm(est - newton_oracle(l, xd)) < 1e-4


def test_tighter_fit_radius_is_more_accurate():
    l = np.array([-0.2, -0.05])
    x = np.array([np.sqrt(0.8), 0.0])
    xd = distort(l, x)
    e_wide = np.linalg.norm(undistort(invert_distortion(l, 1.0), xd) - x)
    e_tight = np.linalg.norm(undistort(invert_distortion(l, 0.8), xd) - x)
    assert e_tight < e_wide


# -- rodrigues --------------------------------------------------------------------------------


def test_rodrigues_zero_is_identity():
    np.testing.assert_array_equal(rodrigues([0, 0, 0]), np.eye(3))


def test_rodrigues_quarter_turn():
    R = rodrigues([0, 0, np.pi / 2])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@given(st.tuples(*[st.floats(-4, 4)] * 3).filter(lambda r: np.linalg.norm(r) > 1e-3),
       st.tuples(*[st.floats(-5, 5)] * 3))
def test_rodrigues_matches_quaternion(r, v):
    r, v = np.array(r), np.array(v)
    R = rodrigues(r)
    np.testing.assert_allclose(R @ v, quat_rotate(r, v), atol=1e-12 * (1 + np.linalg.norm(v)))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-13)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-13)


def test_rodrigues_smooth_near_zero():
    r0 = np.array([1e-7, -0.6e-7, 0.3e-7])
    h = 1e-9
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (rodrigues(r0 + e) - rodrigues(r0 - e)) / (2 * h)
        # d/dr_i of I + [r]x + [r]x^2/2 at small r
        E = np.zeros((3, 3))
        E[[2, 0, 1][i], [1, 2, 0][i]] = 1.0
        E[[1, 2, 0][i], [2, 0, 1][i]] = -1.0
        Kr = rodrigues(r0) - np.eye(3)
        np.testing.assert_allclose(fd, E, atol=1e-6)
        assert np.abs(Kr).max() < 1e-6


def test_rodrigues_batched():
    r = np.random.default_rng(0).normal(size=(5, 3))
    R = rodrigues(r)
    for k in range(5):
        np.testing.assert_allclose(R[k], rodrigues(r[k]))


# -- project ----------------------------------------------------------------------------------


def test_project_reduces_to_pi():
    pose = Pose(np.eye(3), np.zeros(3))
    intr = Intrinsics([1, 1, 0, 0], [0, 0])
    np.testing.assert_allclose(project([2, 4, 2], pose, intr), [1, 2])


def test_project_principal_point():
    pose = Pose(np.eye(3), np.zeros(3))
    intr = Intrinsics([100, 100, 320, 240], [0, 0])
    np.testing.assert_allclose(project([0, 0, 5], pose, intr), [320, 240])


def test_project_behind_camera():
    pose = Pose(np.eye(3), np.zeros(3))
    intr = Intrinsics([100, 100, 320, 240], [0, 0])
    with pytest.raises(PointBehindCamera):
        project([0, 0, -1], pose, intr)


def test_project_derivative_matches_fd(rng):
    X = np.array([1.2, -0.8, 4.0])
    Rb = rodrigues(rng.normal(scale=0.1, size=3))
    p0 = np.r_[0, 0, 0, 0.1, -0.1, 0.2, 500, 510, 320, 240, 0.05, -0.01]

    def f(p):
        return project(X, Pose(Rb @ rodrigues(p[:3]), p[3:6]), Intrinsics(p[6:10], p[10:12]))

    def f_dual(p):
        # Omega(dr) X = X + dr x X to first order, which is exact for the derivative at 0
        c = _cross(p[:3], list(X))
        Y = [X[i] + c[i] for i in range(3)]
        pc = [sum(Rb[i, m] * Y[m] for m in range(3)) + p[3 + i] for i in range(3)]
        xd, yd = _distort_xy(p[10], p[11], pc[0] / pc[2], pc[1] / pc[2])
        u, v = _kappa_xy(p[6:10], xd, yd)
        return Dual(np.stack([u.val, v.val]), np.stack([u.der, v.der]))

    J = evaluate_with_derivatives(f_dual, p0).jacobian
    rep = finite_difference_check(f, p0, step=1e-6 * np.maximum(1, np.abs(p0)), jacobian=J)
    assert rep.max_rel_error < 1e-6


def test_pose_validation():
    with pytest.raises(CameraModelError):
        Pose(np.diag([1, 1, -1.0]), np.zeros(3))
    with pytest.raises(InvalidIntrinsics):
        Intrinsics([0, 1, 0, 0], [0, 0])
    with pytest.raises(InvalidIntrinsics):
        Intrinsics([1, 1, 0, 0], [np.nan, 0])


def test_pose_center():
    R = rodrigues([0.1, 0.2, 0.3])
    c = np.array([1.0, -2.0, 0.5])
    assert np.allclose(Pose(R, -R @ c).center, c)


def test_invert_rejects_non_finite():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(InvalidIntrinsics):
            invert_distortion([np.inf, 0])
