import dataclasses
import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photoba.colmap_io import read_colmap_model, read_visibility_json
from photoba.photocost import CostConfig, PhotometricModel
from photoba.scene import project_world, world_points
from photoba.synthetic import (
    SceneSpec,
    default_surfaces,
    generate_synthetic_scene,
    load_surfaces,
    raycast,
    truth_landmark_points,
    value_noise,
    write_synthetic_scene,
)

from conftest import atlas_of, initial_state
from oracles import TINY

STILL = SceneSpec(n_images=4, n_landmarks=150, arc_degrees=20.0, rotation_deg=0.0,
                  translation_frac=0.0, focal_frac=0.0, depth_frac=0.0, relight=False)


@pytest.fixture(scope="module")
def still_scenes():
    """Zero geometric perturbation, without and with per-view gain and bias."""
    return (generate_synthetic_scene(5, STILL),
            generate_synthetic_scene(5, dataclasses.replace(STILL, relight=True)))


def per_block(scene, mode):
    state = initial_state(scene)
    model = PhotometricModel(atlas_of(scene.images), CostConfig(mode=mode, center_shift=0.5))
    c = model.prepare(state).cost(state)
    assert c.n_valid == state.n_blocks > 300
    return c.total / state.n_blocks


def test_zero_perturbation_cost(still_scenes):
    plain, _ = still_scenes
    np.testing.assert_allclose(initial_state(plain).planes, plain.truth.planes, atol=1e-12)
    assert per_block(plain, "ncc") < 1e-4


def test_relit_scene_ncc_vs_ssd(still_scenes):
    plain, lit = still_scenes
    assert not np.allclose(lit.gains, 1)
    np.testing.assert_array_equal(lit.truth.planes, plain.truth.planes)
    assert per_block(lit, "ncc") < 1e-4
    assert per_block(lit, "ssd") > 100 * per_block(plain, "ssd")
    assert per_block(lit, "ssd") > 1e3


def test_same_seed_bit_identical(tmp_path):
    a, b = generate_synthetic_scene(2, TINY), generate_synthetic_scene(2, TINY)
    for x, y in zip(a.images, b.images):
        assert np.array_equal(x, y)
    for f in ("R", "t", "s", "l", "planes", "anchors"):
        assert np.array_equal(getattr(a.truth, f), getattr(b.truth, f))
        assert np.array_equal(getattr(a.initial, f), getattr(b.initial, f))
    assert np.array_equal(a.initial_points, b.initial_points)
    da, db = write_synthetic_scene(a, tmp_path / "a"), write_synthetic_scene(b, tmp_path / "b")
    files = [p.relative_to(da) for p in da.rglob("*") if p.is_file()]
    assert len(files) > 8
    match, mismatch, errors = filecmp.cmpfiles(da, db, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors


def test_different_seeds_differ():
    a, b = generate_synthetic_scene(0, TINY), generate_synthetic_scene(1, TINY)
    assert not np.array_equal(a.images[0], b.images[0])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_lighting_ranges(seed):
    sc = generate_synthetic_scene(seed, TINY)
    assert np.all((sc.gains >= 0.1) & (sc.gains <= 10))
    assert np.all((sc.biases >= -50) & (sc.biases <= 50))


def test_render_consistent_with_camera_model(default_scene):
    # every truth landmark projects into its source view exactly at its anchor
    truth = default_scene.truth
    X = default_scene.truth_points
    for k in range(0, truth.n_landmarks, 97):
        i = truth.sources[k]
        uv, _ = project_world(truth, np.array([i]), X[k][None])
        np.testing.assert_allclose(uv[0], truth.anchors[k], atol=1e-8)
    np.testing.assert_allclose(world_points(truth), X, atol=1e-9)
    # and the depth map agrees with the camera-frame depth of the point
    for k in range(0, truth.n_landmarks, 97):
        i = truth.sources[k]
        z = (truth.R[i] @ X[k] + truth.t[i])[2]
        u, v = np.rint(truth.anchors[k]).astype(int)
        # anchors are integer pixel centers, so the map is sampled exactly there
        assert default_scene.depths[i][v, u] == pytest.approx(z, rel=1e-12)


def test_default_scene_shape(default_scene):
    sc = default_scene
    assert sc.truth.n_images == 10 and sc.truth.n_landmarks == 2000
    assert sc.images[0].shape == (480, 640)
    assert len(sc.surfaces) == 3
    # three non-coplanar planes all carry landmarks
    d = np.array([[abs(s.normal @ n) for s in sc.surfaces] for n in sc.normals])
    hits = np.bincount(d.argmax(1), minlength=3)
    assert np.all(hits > 50)
    assert all(v.size >= 3 for v in sc.visibility)


def test_perturbation_magnitudes(default_scene):
    sc = default_scene
    from photoba.evaluate import rotation_angle_deg

    ang = rotation_angle_deg(sc.initial.R, sc.truth.R)
    np.testing.assert_allclose(ang, 0.5, atol=1e-9)
    np.testing.assert_allclose(np.abs(sc.initial.s[:, :2] / sc.truth.s[:, :2] - 1), 0.02, rtol=1e-12)
    c0 = -np.einsum("nji,nj->ni", sc.truth.R, sc.truth.t)
    c1 = -np.einsum("nji,nj->ni", sc.initial.R, sc.initial.t)
    shift = np.linalg.norm(c1 - c0, axis=1)
    np.testing.assert_allclose(shift, shift[0], rtol=1e-9)
    src = sc.truth.sources
    ratio = np.linalg.norm(sc.initial_points - c0[src], axis=1) / np.linalg.norm(
        sc.truth_points - c0[src], axis=1)
    assert np.all(np.abs(ratio - 1) <= 0.02 + 1e-12)


def test_written_scene_loads(tmp_path):
    sc = generate_synthetic_scene(4, TINY)
    d = write_synthetic_scene(sc, tmp_path / "s")
    truth = read_colmap_model(d / "truth")
    init = read_colmap_model(d / "initial")
    np.testing.assert_allclose(truth.to_state().R, sc.truth.R, atol=1e-12)
    np.testing.assert_allclose(init.to_state().s, sc.initial.s, rtol=1e-12)
    pts = np.array([truth.points[p].xyz for p in sc.point_ids])
    np.testing.assert_allclose(pts, sc.truth_points, atol=1e-12)
    vis = read_visibility_json(d / "visibility.json")
    assert sorted(vis) == sc.point_ids.tolist()
    T = truth_landmark_points(load_surfaces(d / "scene.json"), sc.truth, sc.truth.anchors,
                              sc.truth.sources)
    np.testing.assert_allclose(T, sc.truth_points, atol=1e-9)
    assert len(list((d / "images").glob("*.npy"))) == TINY.n_images


def test_raycast_hits_nearest_plane():
    surfaces = default_surfaces(0)
    o = np.zeros((3, 3))
    d = np.array([[0, 0, 1.0], [0, 1.0, 0], [-1.0, 0, 0]])
    t, s, _, _ = raycast(surfaces, o, d)
    # the slanted wall meets the x axis at x = -2.5 - 1.5
    np.testing.assert_allclose(t, [1.5, 1.5, 4.0], rtol=1e-12)
    np.testing.assert_array_equal(s[:2], [0, 1])
    X = o[2] + t[2] * d[2]
    n = surfaces[2].normal
    assert n @ (X - surfaces[2].origin) == pytest.approx(0, abs=1e-12)
    assert s[2] == 2


def test_value_noise_band_limited():
    u = np.linspace(0, 10, 2001)
    a = value_noise(u, np.zeros_like(u), 3, 0.8, 1)
    assert np.all(np.abs(a) <= 1)
    assert a.std() > 0.1
    # smooth: second differences far below the signal scale
    assert np.abs(np.diff(a, 2)).max() < 1e-3
