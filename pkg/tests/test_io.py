import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from photoba.colmap_io import (
    ModelFormatError,
    init_landmarks_from_points,
    quat_to_rotation,
    read_colmap_model,
    read_depth_map,
    read_landmarks_json,
    read_ply,
    read_visibility_json,
    rotation_to_quat,
    write_colmap_model,
    write_depth_map,
    write_outputs,
    write_visibility_json,
)
from photoba.scene import world_points

# second image: rotated 0.1 rad about y, shifted along x
Q2 = " ".join(f"{v:.17g}" for v in Rotation.from_rotvec([0, 0.1, 0]).as_quat()[[3, 0, 1, 2]])

CAMERAS = """# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]
1 PINHOLE 640 480 500 510 320.5 240.5
"""
IMAGES = f"""# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME
1 1 0 0 0 0 0 0 1 a.png
320.5 240.5 7
2 {Q2} -0.25 0 0 1 b.png
300.0 240.5 7
"""
POINTS = """# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]
7 0 0 2 10 20 30 0.5 1 0 2 0
"""


def write_model(d, cameras=CAMERAS, images=IMAGES, points=POINTS, normals=None):
    d.mkdir(exist_ok=True)
    (d / "cameras.txt").write_text(cameras)
    (d / "images.txt").write_text(images)
    (d / "points3D.txt").write_text(points)
    if normals is not None:
        (d / "point_normals.txt").write_text(normals)
    return d


def test_minimal_model_parsed_verbatim(tmp_path):
    rec = read_colmap_model(write_model(tmp_path / "m"))
    cam = rec.cameras[1]
    assert cam.model == "PINHOLE" and (cam.width, cam.height) == (640, 480)
    # the file stores pixel-corner coordinates: 320.5 is the center of pixel 320
    np.testing.assert_array_equal(cam.s, [500, 510, 320, 240])
    np.testing.assert_array_equal(cam.l, [0, 0])
    np.testing.assert_array_equal(rec.images[1].R, np.eye(3))
    np.testing.assert_allclose(rec.images[2].R, Rotation.from_rotvec([0, 0.1, 0]).as_matrix(),
                               atol=1e-15)
    np.testing.assert_array_equal(rec.images[2].t, [-0.25, 0, 0])
    assert rec.images[2].name == "b.png"
    np.testing.assert_array_equal(rec.images[1].xys, [[320, 240]])
    np.testing.assert_array_equal(rec.images[2].xys, [[299.5, 240]])
    np.testing.assert_array_equal(rec.points[7].xyz, [0, 0, 2])
    assert rec.points[7].track == [(1, 0), (2, 0)]


def test_pixel_shift_applied_once(tmp_path):
    # the on-axis point projects to the principal point in both conventions
    rec = read_colmap_model(write_model(tmp_path / "m"))
    init = init_landmarks_from_points(rec, rec.to_state())
    np.testing.assert_allclose(init.state.anchors[0], [320, 240], atol=1e-12)
    np.testing.assert_allclose(init.state.anchors[0], rec.images[1].xys[0], atol=1e-12)
    out = tmp_path / "out"
    write_colmap_model(out, rec.to_state())
    again = read_colmap_model(out)
    np.testing.assert_array_equal(again.cameras[1].s, rec.cameras[1].s)
    assert "320.5" in (out / "cameras.txt").read_text()


def test_empty_cameras_file(tmp_path):
    d = write_model(tmp_path / "m", cameras="# nothing here\n")
    with pytest.raises(ModelFormatError, match="cameras.txt"):
        read_colmap_model(d)


@pytest.mark.parametrize("line", [
    "1 FULL_OPENCV 640 480 500 510 320 240 0 0 0 0 0 0 0 0",
    "1 OPENCV 640 480 500 510 320 240 0.1 0 0.01 0",
    "1 PINHOLE 640 480 500 510 320",
    "1 PINHOLE 0 480 500 510 320 240",
])
def test_rejected_cameras(tmp_path, line):
    d = write_model(tmp_path / "m", cameras=line + "\n")
    with pytest.raises(ModelFormatError):
        read_colmap_model(d)


def test_malformed_line_names_line_number(tmp_path):
    d = write_model(tmp_path / "m", cameras=CAMERAS + "2 PINHOLE 640 480 500 abc 320 240\n")
    with pytest.raises(ModelFormatError, match=":3"):
        read_colmap_model(d)


def test_radial_models(tmp_path):
    cams = ("1 SIMPLE_RADIAL 640 480 500 320.5 240.5 -0.1\n"
            "2 RADIAL 640 480 400 300.5 200.5 -0.2 0.05\n"
            "3 OPENCV 640 480 400 410 300.5 200.5 -0.2 0.05 0 0\n")
    rec = read_colmap_model(write_model(tmp_path / "m", cameras=cams))
    np.testing.assert_array_equal(rec.cameras[1].l, [-0.1, 0])
    np.testing.assert_array_equal(rec.cameras[2].s, [400, 400, 300, 200])
    np.testing.assert_array_equal(rec.cameras[3].l, [-0.2, 0.05])


@pytest.mark.parametrize("images, points", [
    (IMAGES.replace("0 0 1 a.png", "0 0 9 a.png"), POINTS),
    (IMAGES, POINTS.replace("2 0\n", "5 0\n")),
], ids=["camera", "image"])
def test_dangling_ids(tmp_path, images, points):
    d = write_model(tmp_path / "m", images=images, points=points)
    with pytest.raises(ModelFormatError, match="unknown"):
        read_colmap_model(d)


def test_unknown_normal_id(tmp_path):
    d = write_model(tmp_path / "m", normals="8 0 0 -1\n")
    with pytest.raises(ModelFormatError):
        read_colmap_model(d)


def test_missing_file(tmp_path):
    d = write_model(tmp_path / "m")
    (d / "images.txt").unlink()
    with pytest.raises(ModelFormatError, match="images.txt"):
        read_colmap_model(d)


# -- quaternions --------------------------------------------------------------------------


def test_identity_quaternion():
    np.testing.assert_array_equal(quat_to_rotation([1, 0, 0, 0]), np.eye(3))


def test_quaternion_roundtrip(rng):
    for _ in range(20):
        R = Rotation.random(random_state=rng).as_matrix()
        q = rotation_to_quat(R)
        assert q[0] >= 0 and np.linalg.norm(q) == pytest.approx(1.0)
        np.testing.assert_allclose(quat_to_rotation(q), R, atol=1e-14)
        np.testing.assert_allclose(quat_to_rotation(-q), R, atol=1e-14)


# -- landmark initialisation --------------------------------------------------------------------


@pytest.mark.parametrize("normal", ["0 0 -1", "0 0 1"])
def test_fronto_parallel_plane(tmp_path, normal):
    # the normal's sign is irrelevant: the plane is fixed by point and direction
    rec = read_colmap_model(write_model(tmp_path / "m", normals=f"7 {normal}\n"))
    init = init_landmarks_from_points(rec, rec.to_state())
    np.testing.assert_allclose(init.state.planes[0], [0, 0, 0.5], atol=1e-15)
    assert init.state.sources[0] == 0
    np.testing.assert_array_equal(init.state.visibility(0), [1])
    assert init.dropped == 0


def test_default_normal_faces_camera_and_roundtrip(tmp_path):
    points = POINTS + "8 0.3 -0.2 3.5 0 0 0 0 2 0 1 0\n"
    images = IMAGES.replace("300.0 240.5 7", "300.0 240.5 7 310 250 8").replace(
        "320.5 240.5 7", "320.5 240.5 7 330 230 8")
    rec = read_colmap_model(write_model(tmp_path / "m", images=images, points=points))
    init = init_landmarks_from_points(rec, rec.to_state())
    st = init.state
    np.testing.assert_array_equal(init.point_ids, [7, 8])
    # first track entry of point 8 is image 2
    assert st.sources[1] == 1
    np.testing.assert_allclose(world_points(st), [[0, 0, 2], [0.3, -0.2, 3.5]], atol=1e-9)
    # plane normal (in source coordinates) points along the viewing ray
    Xc = rec.images[2].R @ np.array([0.3, -0.2, 3.5]) + rec.images[2].t
    n = st.planes[1]
    np.testing.assert_allclose(np.cross(n, Xc), 0, atol=1e-12)
    assert n @ Xc == pytest.approx(1.0)


def test_point_behind_all_cameras_dropped(tmp_path):
    points = POINTS + "9 0 0 -3 0 0 0 0 1 0 2 0\n"
    rec = read_colmap_model(write_model(tmp_path / "m", points=points))
    init = init_landmarks_from_points(rec, rec.to_state())
    assert init.dropped == 1
    np.testing.assert_array_equal(init.point_ids, [7])


# -- writing ------------------------------------------------------------------------------------


def test_write_read_roundtrip(tmp_path, small_scene):
    truth = small_scene.truth
    write_colmap_model(tmp_path / "m", truth, names=[f"{i}.npy" for i in range(truth.n_images)],
                       points=small_scene.truth_points[:10],
                       tracks=[[int(truth.sources[k])] for k in range(10)])
    rec = read_colmap_model(tmp_path / "m")
    st = rec.to_state()
    np.testing.assert_allclose(st.R, truth.R, atol=1e-9)
    np.testing.assert_allclose(st.t, truth.t, atol=1e-9)
    np.testing.assert_allclose(st.s, truth.s, rtol=1e-12)
    np.testing.assert_allclose(st.l, truth.l, atol=1e-12)
    # second pass is a fixed point
    write_colmap_model(tmp_path / "m2", st)
    st2 = read_colmap_model(tmp_path / "m2").to_state()
    np.testing.assert_array_equal(st2.s, st.s)
    np.testing.assert_allclose(st2.R, st.R, atol=1e-15)
    np.testing.assert_array_equal(st2.t, st.t)


def test_write_outputs(tmp_path, small_scene):
    truth = small_scene.truth
    L = truth.n_landmarks
    cost = np.random.default_rng(0).uniform(0, 1, L)
    ids = np.arange(100, 100 + L)
    d = write_outputs(tmp_path / "out", truth, ids, list(range(1, truth.n_images + 1)),
                      landmark_cost=cost, summary={"rmse": np.float64(0.5)})
    ply = read_ply(d / "points.ply")
    assert ply.shape == (L, 7)
    assert np.all((ply[:, 6] >= 0) & (ply[:, 6] <= 1))
    np.testing.assert_allclose(ply[:, :3], world_points(truth), rtol=1e-7, atol=1e-7)
    np.testing.assert_allclose(np.linalg.norm(ply[:, 3:6], axis=1), 1, atol=1e-7)
    recs = read_landmarks_json(d / "landmarks.json")
    assert [r["id"] for r in recs] == ids.tolist()
    assert json.loads((d / "summary.json").read_text()) == {"rmse": 0.5}
    rec = read_colmap_model(d / "model")
    assert sorted(rec.points) == ids.tolist()
    np.testing.assert_allclose(rec.to_state().t, truth.t, atol=1e-9)


def test_write_outputs_unwritable(tmp_path, small_scene):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_outputs(blocker / "out", small_scene.truth, np.arange(small_scene.truth.n_landmarks),
                      [1, 2, 3, 4])


# -- depth maps and visibility -----------------------------------------------------------------


def test_depth_map_roundtrip(tmp_path, rng):
    D = rng.uniform(1, 10, (7, 11)).astype(np.float32)
    write_depth_map(tmp_path / "d.bin", D)
    np.testing.assert_array_equal(read_depth_map(tmp_path / "d.bin"), D)
    (tmp_path / "bad.bin").write_bytes((tmp_path / "d.bin").read_bytes()[:-4])
    with pytest.raises(ModelFormatError):
        read_depth_map(tmp_path / "bad.bin")


def test_visibility_json_roundtrip(tmp_path):
    vis = {3: [1, 2], 1: [4]}
    write_visibility_json(tmp_path / "v.json", vis)
    assert read_visibility_json(tmp_path / "v.json") == vis
    (tmp_path / "bad.json").write_text('[{"id": 1}]')
    with pytest.raises(ModelFormatError):
        read_visibility_json(tmp_path / "bad.json")
