import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photoba.camera import Intrinsics, Pose, project, rodrigues
from photoba.photocost import CostConfig, PhotometricModel
from photoba.scene import (
    FULL_WIDTH,
    DegenerateLandmark,
    Landmark,
    ParameterDelta,
    ProblemState,
    SceneError,
    WarpDegenerate,
    apply_update,
    landmark_world_point,
    linearize_warp,
    patch_grid,
    plane_from_point_normal,
    plane_normal_world,
    warp_patch,
    warp_points,
    world_points,
)
from photoba.validate import check_jacobians, per_image_cameras


def two_view_state(s=(1.0, 1.0, 0.0, 0.0), l=(0.0, 0.0), baseline=0.0):
    R = np.stack([np.eye(3), np.eye(3)])
    t = np.array([[0.0, 0, 0], [baseline, 0, 0]])
    return ProblemState(R, t, [s], [l], [0, 0], [[640, 480], [640, 480]])


def random_state(rng, P=3, dist=(0.0, 0.0)):
    R = rodrigues(rng.normal(scale=0.1, size=(P, 3)))
    t = rng.normal(scale=0.3, size=(P, 3))
    s = [[500.0 + rng.uniform(-20, 20), 500.0 + rng.uniform(-20, 20), 320.0, 240.0]]
    return ProblemState(R, t, s, [dist], np.zeros(P, dtype=int), np.tile([640, 480], (P, 1)))


# -- landmark geometry ---------------------------------------------------------------


def test_patch_grid_offsets():
    g = patch_grid([10.0, 20.0])
    assert g.shape == (16, 2)
    assert set(np.unique(g[:, 0] - 10.0)) == {-1.5, -0.5, 0.5, 1.5}
    np.testing.assert_allclose(g.mean(0), [10, 20])
    lm = Landmark(np.array([10.0, 20.0]), 0, np.array([0, 0, 1.0]), (1,))
    assert lm.patch.shape == (2, 16)


def test_world_point_unit_depth():
    st_ = two_view_state()
    lm = Landmark(np.zeros(2), 0, np.array([0, 0, 1.0]), (1,))
    np.testing.assert_allclose(landmark_world_point(lm, st_), [0, 0, 1])


def test_world_point_depth_is_inverse_plane():
    st_ = two_view_state()
    lm = Landmark(np.zeros(2), 0, np.array([0, 0, 0.5]), (1,))
    np.testing.assert_allclose(landmark_world_point(lm, st_), [0, 0, 2])


def test_world_point_degenerate_plane():
    st_ = two_view_state()
    with pytest.raises(DegenerateLandmark):
        landmark_world_point(Landmark(np.zeros(2), 0, np.zeros(3), (1,)), st_)
    bad = st_.with_landmarks([[0, 0]], [0], [[0, 0, 0]], [[1]])
    assert np.isnan(world_points(bad)).all()


def test_plane_from_point_normal_inverse_relation():
    R, t = np.eye(3), np.zeros(3)
    n = plane_from_point_normal(R, t, np.array([0, 0, 2.0]), np.array([0, 0, -1.0]))
    np.testing.assert_allclose(n, [0, 0, 0.5])
    # a normal facing away gives the same plane (flipped toward the camera)
    n2 = plane_from_point_normal(R, t, np.array([0, 0, 2.0]), np.array([0, 0, 1.0]))
    np.testing.assert_allclose(n2, [0, 0, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_backproject_project_roundtrip(seed, distorted):
    rng = np.random.default_rng(seed)
    dist = (0.05, -0.01) if distorted else (0.0, 0.0)
    state = random_state(rng, dist=dist)
    anchor = rng.uniform([100, 80], [540, 400])
    # plane through a point 4-6 units in front of camera 0, random tilt
    depth = rng.uniform(4, 6)
    xc = np.array([(anchor[0] - 320) / 500, (anchor[1] - 240) / 500, 1.0]) * depth
    Xw = state.R[0].T @ (xc - state.t[0])
    normal = state.R[0].T @ (np.array([0, 0, -1.0]) + rng.normal(scale=0.3, size=3))
    n = plane_from_point_normal(state.R[0], state.t[0], Xw, normal)
    lm = Landmark(anchor, 0, n, (1, 2))
    X = landmark_world_point(lm, state)
    uv = project(X, state.pose(0), state.intrinsics_of_image(0))
    tol = 1e-4 if distorted else 1e-8
    assert np.linalg.norm(uv - anchor) < tol


def test_plane_normal_world_faces_camera():
    st_ = two_view_state().with_landmarks([[0, 0]], [0], [[0, 0, 0.5]], [[1]])
    np.testing.assert_allclose(plane_normal_world(st_)[0], [0, 0, -1])


# -- warping ----------------------------------------------------------------------------


def test_self_warp_identity():
    s = (500.0, 500.0, 320.0, 240.0)
    st_ = ProblemState(np.stack([np.eye(3)] * 2), np.zeros((2, 3)), [s], [(0.05, -0.01)], [0, 0],
                       [[640, 480]] * 2)
    lm = Landmark(np.array([400.0, 300.0]), 0, np.array([0.05, 0.02, 0.2]), (1,))
    w = warp_patch(lm, 1, st_)
    np.testing.assert_allclose(w, lm.patch, atol=1e-4)


@pytest.mark.parametrize("f", [1.0, 500.0])
def test_stereo_disparity(f):
    b, d = 0.3, 4.0
    st_ = two_view_state(s=(f, f, 0.0, 0.0), baseline=b)
    lm = Landmark(np.array([2.0, -3.0]), 0, np.array([0, 0, 1 / d]), (1,))
    w = warp_patch(lm, 1, st_)
    shift = w - lm.patch
    np.testing.assert_allclose(shift[0], b * f / d, rtol=1e-12)
    np.testing.assert_allclose(shift[1], 0.0, atol=1e-12)


def test_edge_on_plane_is_degenerate():
    st_ = two_view_state(baseline=0.2)
    lm = Landmark(np.zeros(2), 0, np.array([1.0, 0, 0]), (1,))
    with pytest.raises(WarpDegenerate):
        warp_patch(lm, 1, st_)


def test_warp_engines_agree(small_scene):
    state = per_image_cameras(small_scene.truth)
    lm, tgt = state.block_arrays()
    lm, tgt = lm[:40], tgt[:40]
    grid = patch_grid(state.anchors[lm])
    u, v, ok = warp_points(state, lm, tgt, grid, seeds="full")
    lin = linearize_warp(state, lm, tgt, grid)
    np.testing.assert_allclose(lin.u, u.val, rtol=0, atol=1e-9)
    np.testing.assert_allclose(lin.v, v.val, rtol=0, atol=1e-9)
    assert np.array_equal(lin.ok, ok)
    # pullback with unit gradients reproduces the dual derivative columns
    Ju = lin.pullback(np.ones_like(lin.u), np.zeros_like(lin.u))
    Jv = lin.pullback(np.zeros_like(lin.u), np.ones_like(lin.u))
    scale = np.abs(u.der).max()
    np.testing.assert_allclose(Ju, u.der, atol=1e-9 * scale)
    np.testing.assert_allclose(Jv, v.der, atol=1e-9 * scale)
    assert Ju.shape[-1] == FULL_WIDTH


def test_warp_derivatives_match_fd(small_scene, small_atlas):
    scene = (per_image_cameras(small_scene.truth), small_atlas)
    rep = check_jacobians(10, seed=2, engine="staged", scene=scene)
    assert rep.max_rel_error < 1e-4
    for name in ("src_rot", "src_t", "tgt_rot", "tgt_t", "src_s", "tgt_s", "plane"):
        assert rep.per_group[name] < 1e-4


# -- updates ---------------------------------------------------------------------------------


def test_zero_update_is_bitwise_identity(rng):
    state = random_state(rng).with_landmarks([[300, 200]], [0], [[0, 0, 0.2]], [[1, 2]])
    out = apply_update(state, ParameterDelta(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((1, 4)),
                                             np.zeros((1, 2)), np.zeros((1, 3))))
    for a in ("R", "t", "s", "l", "planes"):
        assert np.array_equal(getattr(out, a), getattr(state, a))


def test_update_does_not_touch_original(rng):
    state = random_state(rng)
    R0 = state.R.copy()
    apply_update(state, ParameterDelta(dr=np.full((3, 3), 0.1)))
    assert np.array_equal(state.R, R0)


def test_rotation_update_composes(rng):
    state = random_state(rng)
    a, b = rng.normal(scale=0.2, size=(2, 3, 3))
    twice = apply_update(apply_update(state, ParameterDelta(dr=a)), ParameterDelta(dr=b))
    expect = state.R @ rodrigues(a) @ rodrigues(b)
    np.testing.assert_allclose(twice.R, expect, atol=1e-14)


def test_plane_update_additive():
    state = two_view_state().with_landmarks([[0, 0]], [0], [[0, 0, 1.0]], [[1]])
    out = apply_update(state, ParameterDelta(dn=np.array([[0.1, 0, 0]])))
    np.testing.assert_allclose(out.planes[0], [0.1, 0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rotation_update_stays_orthonormal(seed):
    rng = np.random.default_rng(seed)
    state = random_state(rng)
    for _ in range(20):
        state = apply_update(state, ParameterDelta(dr=rng.normal(scale=0.5, size=(3, 3))))
    for R in state.R:
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)


def test_camera_vector_roundtrip(rng):
    state = random_state(rng)
    vec = rng.normal(size=state.n_camera_params)
    d = ParameterDelta.from_camera_vector(vec, state.n_images, state.n_cameras)
    np.testing.assert_array_equal(d.camera_vector(state), vec)


# -- state bookkeeping ------------------------------------------------------------------------


def test_validate_rejects_source_in_visibility():
    state = two_view_state().with_landmarks([[0, 0]], [0], [[0, 0, 1.0]], [[0, 1]])
    with pytest.raises(SceneError):
        state.validate()


def test_validate_rejects_bad_indices():
    state = two_view_state().with_landmarks([[0, 0]], [0], [[0, 0, 1.0]], [[5]])
    with pytest.raises(SceneError):
        state.validate()


def test_block_arrays_and_subset():
    state = two_view_state().with_landmarks([[0, 0], [1, 1], [2, 2]], [0, 1, 0],
                                            np.tile([0, 0, 1.0], (3, 1)), [[1], [0], [1]])
    lm, tgt = state.block_arrays()
    np.testing.assert_array_equal(lm, [0, 1, 2])
    np.testing.assert_array_equal(tgt, [1, 0, 1])
    sub = state.subset_landmarks(np.array([True, False, True]))
    assert sub.n_landmarks == 2 and sub.n_blocks == 2
    np.testing.assert_array_equal(sub.anchors, [[0, 0], [2, 2]])


def test_residual_engines_agree(small_scene, small_atlas):
    state = per_image_cameras(small_scene.truth)
    model = PhotometricModel(small_atlas, CostConfig()).prepare(state, 0)
    lm, tgt = state.block_arrays()
    Es, oks, _ = model.residuals(state, lm, tgt, seeds="full", engine="staged")
    Ed, okd, _ = model.residuals(state, lm, tgt, seeds="full", engine="dual")
    assert np.array_equal(oks, okd)
    np.testing.assert_allclose(Es.val[oks], Ed.val[okd], atol=1e-12)
    np.testing.assert_allclose(Es.der[oks], Ed.der[okd], atol=1e-8 * np.abs(Ed.der[okd]).max())


def test_pose_and_intrinsics_views(rng):
    state = random_state(rng)
    assert isinstance(state.pose(1), Pose)
    assert isinstance(state.intrinsics_of_image(1), Intrinsics)
