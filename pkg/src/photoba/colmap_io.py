"""COLMAP text models, depth maps, visibility lists and run outputs.

COLMAP puts the center of the top-left pixel at (0.5, 0.5); internally we use
pixel-center coordinates, so 0.5 is subtracted from principal points and 2-D
observations when reading and added back when writing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .scene import (
    DegenerateLandmark,
    ProblemState,
    plane_from_point_normal,
    plane_normal_world,
    project_world,
    world_points,
)

logger = logging.getLogger(__name__)

PIXEL_SHIFT = 0.5
NORMALS_FILE = "point_normals.txt"


class ModelFormatError(ValueError):
    pass


@dataclass
class CameraEntry:
    camera_id: int
    model: str
    width: int
    height: int
    s: np.ndarray  # fx, fy, cx, cy (pixel-center convention)
    l: np.ndarray


@dataclass
class ImageEntry:
    image_id: int
    R: np.ndarray
    t: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


@dataclass
class PointEntry:
    point_id: int
    xyz: np.ndarray
    rgb: tuple = (128, 128, 128)
    error: float = 0.0
    track: list = field(default_factory=list)  # [(image_id, point2d_idx)]
    normal: np.ndarray | None = None


@dataclass
class InitialReconstruction:
    cameras: dict
    images: dict
    points: dict

    @property
    def image_ids(self) -> list:
        return sorted(self.images)

    @property
    def camera_ids(self) -> list:
        return sorted(self.cameras)

    def to_state(self, shared_intrinsics: bool = False) -> ProblemState:
        """Cameras and poses as a :class:`ProblemState` (no landmarks yet)."""
        img_ids = self.image_ids
        cam_ids = self.camera_ids
        cam_index = {c: i for i, c in enumerate(cam_ids)}
        R = np.stack([self.images[i].R for i in img_ids])
        t = np.stack([self.images[i].t for i in img_ids])
        cam_of = np.array([cam_index[self.images[i].camera_id] for i in img_ids])
        sizes = np.array([[self.cameras[self.images[i].camera_id].width,
                           self.cameras[self.images[i].camera_id].height] for i in img_ids])
        s = np.stack([self.cameras[c].s for c in cam_ids])
        l = np.stack([self.cameras[c].l for c in cam_ids])
        if shared_intrinsics:
            first = cam_of[0]
            s, l = s[first : first + 1], l[first : first + 1]
            cam_of = np.zeros_like(cam_of)
        return ProblemState(R, t, s, l, cam_of, sizes)


# -- parsing -----------------------------------------------------------------------


def _data_lines(path: Path):
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield no, line


def _floats(parts, path, no):
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ModelFormatError(f"{path}:{no}: malformed number ({exc})") from exc


def _camera_from_params(cid, model, w, h, p, path, no):
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = p
        s, l = [f, f, cx, cy], [0, 0]
    elif model == "PINHOLE":
        s, l = p, [0, 0]
    elif model == "SIMPLE_RADIAL":
        f, cx, cy, k = p
        s, l = [f, f, cx, cy], [k, 0]
    elif model == "RADIAL":
        f, cx, cy, k1, k2 = p
        s, l = [f, f, cx, cy], [k1, k2]
    elif model == "OPENCV":
        fx, fy, cx, cy, k1, k2, p1, p2 = p
        if p1 != 0 or p2 != 0:
            raise ModelFormatError(f"{path}:{no}: tangential distortion is not supported")
        s, l = [fx, fy, cx, cy], [k1, k2]
    else:
        raise ModelFormatError(f"{path}:{no}: unsupported camera model {model}")
    s = np.array(s, dtype=float)
    s[2:] -= PIXEL_SHIFT
    return CameraEntry(cid, model, w, h, s, np.array(l, dtype=float))


_N_PARAMS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4, "SIMPLE_RADIAL": 4, "RADIAL": 5, "OPENCV": 8}


def read_cameras(path) -> dict:
    path = Path(path)
    cams = {}
    for no, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 4:
            raise ModelFormatError(f"{path}:{no}: expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS")
        try:
            cid, w, h = int(parts[0]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            raise ModelFormatError(f"{path}:{no}: malformed camera line ({exc})") from exc
        model = parts[1]
        if model not in _N_PARAMS:
            raise ModelFormatError(f"{path}:{no}: unsupported camera model {model}")
        p = _floats(parts[4:], path, no)
        if len(p) != _N_PARAMS[model]:
            raise ModelFormatError(f"{path}:{no}: {model} takes {_N_PARAMS[model]} parameters")
        if w <= 0 or h <= 0:
            raise ModelFormatError(f"{path}:{no}: image size must be positive")
        cams[cid] = _camera_from_params(cid, model, w, h, p, path, no)
    if not cams:
        raise ModelFormatError(f"{path}: no cameras found")
    return cams


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a ``(w, x, y, z)`` quaternion (normalized first)."""
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def rotation_to_quat(R) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


def read_images(path) -> dict:
    """Parse ``images.txt``: two lines per image, the second (observations) possibly empty."""
    path = Path(path)
    images = {}
    with open(path) as fh:
        lines = [(no, ln.strip()) for no, ln in enumerate(fh, 1) if not ln.startswith("#")]
    i = 0
    while i < len(lines):
        no, line = lines[i]
        if not line:
            i += 1
            continue
        parts = line.split()
        if len(parts) < 10:
            raise ModelFormatError(f"{path}:{no}: expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        try:
            iid, cid = int(parts[0]), int(parts[8])
        except ValueError as exc:
            raise ModelFormatError(f"{path}:{no}: malformed image line ({exc})") from exc
        vals = _floats(parts[1:8], path, no)
        name = " ".join(parts[9:])
        xys = np.zeros((0, 2))
        ids = np.zeros(0, dtype=int)
        if i + 1 < len(lines) and lines[i + 1][1]:
            no2, obs = lines[i + 1]
            o = obs.split()
            if len(o) % 3:
                raise ModelFormatError(f"{path}:{no2}: POINTS2D entries must be triples")
            arr = np.array(_floats(o, path, no2)).reshape(-1, 3)
            xys = arr[:, :2] - PIXEL_SHIFT
            ids = arr[:, 2].astype(int)
        if iid in images:
            raise ModelFormatError(f"{path}:{no}: duplicate image id {iid}")
        images[iid] = ImageEntry(iid, quat_to_rotation(vals[:4]), np.array(vals[4:7]), cid, name,
                                 xys, ids)
        i += 2
    return images


def read_points(path) -> dict:
    path = Path(path)
    pts = {}
    for no, line in _data_lines(path):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2:
            raise ModelFormatError(f"{path}:{no}: expected POINT3D_ID X Y Z R G B ERROR TRACK[]")
        try:
            pid = int(parts[0])
            rgb = tuple(int(c) for c in parts[4:7])
            track = [(int(parts[j]), int(parts[j + 1])) for j in range(8, len(parts), 2)]
        except ValueError as exc:
            raise ModelFormatError(f"{path}:{no}: malformed point line ({exc})") from exc
        xyz = np.array(_floats(parts[1:4], path, no))
        pts[pid] = PointEntry(pid, xyz, rgb, _floats(parts[7:8], path, no)[0], track)
    return pts


def read_normals(path) -> dict:
    out = {}
    for no, line in _data_lines(Path(path)):
        parts = line.split()
        if len(parts) != 4:
            raise ModelFormatError(f"{path}:{no}: expected POINT3D_ID NX NY NZ")
        out[int(parts[0])] = np.array(_floats(parts[1:], path, no))
    return out


def read_colmap_model(directory) -> InitialReconstruction:
    """Parse ``cameras.txt``, ``images.txt`` and ``points3D.txt`` (plus optional normals)."""
    d = Path(directory)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (d / name).is_file():
            raise ModelFormatError(f"missing {d / name}")
    cams = read_cameras(d / "cameras.txt")
    images = read_images(d / "images.txt")
    if not images:
        raise ModelFormatError(f"{d / 'images.txt'}: no images found")
    points = read_points(d / "points3D.txt")
    for im in images.values():
        if im.camera_id not in cams:
            raise ModelFormatError(f"image {im.image_id} references unknown camera {im.camera_id}")
    for p in points.values():
        for iid, _ in p.track:
            if iid not in images:
                raise ModelFormatError(f"point {p.point_id} references unknown image {iid}")
    if (d / NORMALS_FILE).is_file():
        for pid, n in read_normals(d / NORMALS_FILE).items():
            if pid not in points:
                raise ModelFormatError(f"{NORMALS_FILE}: unknown point {pid}")
            points[pid].normal = n
    return InitialReconstruction(cams, images, points)


# -- landmarks -------------------------------------------------------------------------------


@dataclass
class LandmarkInit:
    state: ProblemState
    point_ids: np.ndarray
    dropped: int


def init_landmarks_from_points(recon: InitialReconstruction, state: ProblemState) -> LandmarkInit:
    """Turn 3-D points into ray-anchored planar landmarks.

    The anchor view is the first track image in front of which the point
    lies; the rest of the track becomes the visibility set. Without a stored
    normal the plane faces the anchor camera.
    """
    index = {iid: i for i, iid in enumerate(recon.image_ids)}
    anchors, sources, planes, vis, ids = [], [], [], [], []
    dropped = 0
    for pid in sorted(recon.points):
        p = recon.points[pid]
        track = []
        for iid, _ in p.track:
            if index[iid] not in track:
                track.append(index[iid])
        src = None
        for i in track:
            if (state.R[i] @ p.xyz + state.t[i])[2] > 0:
                src = i
                break
        if src is None:
            dropped += 1
            continue
        normal = p.normal
        if normal is None:
            c = -state.R[src].T @ state.t[src]
            normal = c - p.xyz
        try:
            n = plane_from_point_normal(state.R[src], state.t[src], p.xyz, normal)
        except DegenerateLandmark:
            dropped += 1
            continue
        uv, _ = project_world(state, np.array([src]), p.xyz[None])
        anchors.append(uv[0])
        sources.append(src)
        planes.append(n)
        vis.append([i for i in track if i != src])
        ids.append(pid)
    if dropped:
        logger.warning("dropped %d points behind all track cameras", dropped)
    new = state.with_landmarks(np.array(anchors).reshape(-1, 2), np.array(sources, dtype=int),
                               np.array(planes).reshape(-1, 3), vis)
    return LandmarkInit(new, np.array(ids, dtype=int), dropped)


# -- depth maps and visibility ----------------------------------------------------------------


def read_depth_map(path) -> np.ndarray:
    """Binary depth raster: int32 width, int32 height, then float32 row-major depths."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ModelFormatError(f"{path}: truncated depth map header")
    w, h = np.frombuffer(raw[:8], dtype="<i4")
    if w <= 0 or h <= 0 or len(raw) != 8 + 4 * int(w) * int(h):
        raise ModelFormatError(f"{path}: depth map size does not match header {w}x{h}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(int(h), int(w)).astype(float)


def write_depth_map(path, depth) -> None:
    depth = np.asarray(depth)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(depth.astype("<f4").tobytes())


def read_visibility_json(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    try:
        return {int(e["landmark_id"]): [int(i) for i in e["visible_image_ids"]] for e in data}
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: expected a list of {{landmark_id, visible_image_ids}}") from exc


def write_visibility_json(path, visibility: dict) -> None:
    data = [{"landmark_id": int(k), "visible_image_ids": [int(i) for i in v]}
            for k, v in sorted(visibility.items())]
    with open(path, "w") as fh:
        json.dump(data, fh)


# -- writing -------------------------------------------------------------------------------


def _camera_line(cid, s, l, w, h):
    cx, cy = s[2] + PIXEL_SHIFT, s[3] + PIXEL_SHIFT
    if l[0] == 0 and l[1] == 0:
        return f"{cid} PINHOLE {w} {h} {s[0]:.17g} {s[1]:.17g} {cx:.17g} {cy:.17g}"
    if s[0] == s[1]:
        return f"{cid} RADIAL {w} {h} {s[0]:.17g} {cx:.17g} {cy:.17g} {l[0]:.17g} {l[1]:.17g}"
    return (f"{cid} OPENCV {w} {h} {s[0]:.17g} {s[1]:.17g} {cx:.17g} {cy:.17g} "
            f"{l[0]:.17g} {l[1]:.17g} 0 0")


def write_colmap_model(directory, state: ProblemState, image_ids=None, camera_ids=None,
                       names=None, point_ids=None, points=None, normals=None,
                       tracks=None) -> None:
    """Write the text model triplet; ``points``/``tracks`` are optional world points."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    P, C = state.n_images, state.n_cameras
    image_ids = list(range(1, P + 1)) if image_ids is None else [int(i) for i in image_ids]
    camera_ids = list(range(1, C + 1)) if camera_ids is None else [int(c) for c in camera_ids]
    names = names or [f"image_{i:04d}.npy" for i in image_ids]
    sizes = state.camera_sizes()
    with open(d / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        fh.write(f"# Number of cameras: {C}\n")
        for c in range(C):
            fh.write(_camera_line(camera_ids[c], state.s[c], state.l[c], *sizes[c]) + "\n")
    obs = [[] for _ in range(P)]
    point_tracks = {}
    if points is not None:
        point_ids = np.arange(1, len(points) + 1) if point_ids is None else point_ids
        for k, pid in enumerate(point_ids):
            entries = []
            for i in tracks[k] if tracks is not None else []:
                uv, _ = project_world(state, np.array([i]), points[k][None])
                if np.all(np.isfinite(uv)):
                    entries.append((image_ids[i], len(obs[i])))
                    obs[i].append((uv[0] + PIXEL_SHIFT, int(pid)))
            point_tracks[int(pid)] = entries
    with open(d / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for i in range(P):
            q = rotation_to_quat(state.R[i])
            t = state.t[i]
            fh.write(f"{image_ids[i]} " + " ".join(f"{v:.17g}" for v in (*q, *t))
                     + f" {camera_ids[state.camera_of_image[i]]} {names[i]}\n")
            fh.write(" ".join(f"{uv[0]:.10g} {uv[1]:.10g} {pid}" for uv, pid in obs[i]) + "\n")
    with open(d / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        if points is not None:
            for k, pid in enumerate(point_ids):
                tr = " ".join(f"{a} {b}" for a, b in point_tracks[int(pid)])
                x, y, z = points[k]
                fh.write(f"{pid} {x:.17g} {y:.17g} {z:.17g} 128 128 128 0 {tr}".rstrip() + "\n")
    if normals is not None and points is not None:
        with open(d / NORMALS_FILE, "w") as fh:
            fh.write("# POINT3D_ID, NX, NY, NZ\n")
            for k, pid in enumerate(point_ids):
                fh.write(f"{pid} " + " ".join(f"{v:.17g}" for v in normals[k]) + "\n")


def write_ply(path, points, normals, cost) -> None:
    """ASCII PLY with position, normal and mean photometric cost per vertex."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        for p in ("x", "y", "z", "nx", "ny", "nz", "cost"):
            fh.write(f"property float {p}\n")
        fh.write("end_header\n")
        for X, n, c in zip(points, normals, cost):
            fh.write(" ".join(f"{v:.9g}" for v in (*X, *n, c)) + "\n")


def read_ply(path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    start = lines.index("end_header") + 1
    rows = [list(map(float, ln.split())) for ln in lines[start:] if ln.strip()]
    return np.array(rows).reshape(-1, 7)


def landmark_records(state: ProblemState, point_ids, image_ids, cost=None) -> list:
    """JSON-friendly per-landmark description (pixel-center anchors)."""
    X = world_points(state)
    normals = plane_normal_world(state)
    out = []
    for k in range(state.n_landmarks):
        out.append({
            "id": int(point_ids[k]),
            "anchor": [float(a) for a in state.anchors[k]],
            "source_image_id": int(image_ids[state.sources[k]]),
            "plane": [float(v) for v in state.planes[k]],
            "visible_image_ids": [int(image_ids[i]) for i in state.visibility(k)],
            "xyz": [float(v) for v in X[k]],
            "normal": [float(v) for v in normals[k]],
            "cost": None if cost is None else float(cost[k]),
        })
    return out


def write_outputs(directory, state: ProblemState, point_ids, image_ids, camera_ids=None,
                  names=None, landmark_cost=None, summary=None) -> Path:
    """Refined text model, PLY point cloud, ``landmarks.json`` and ``summary.json``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {d}: {exc}") from exc
    X = world_points(state)
    normals = plane_normal_world(state)
    cost = np.zeros(state.n_landmarks) if landmark_cost is None else np.asarray(landmark_cost)
    tracks = [[int(state.sources[k]), *state.visibility(k).tolist()] for k in range(state.n_landmarks)]
    write_colmap_model(d / "model", state, image_ids, camera_ids, names, point_ids, X, normals,
                       tracks)
    write_ply(d / "points.ply", X, normals, cost)
    with open(d / "landmarks.json", "w") as fh:
        json.dump(landmark_records(state, point_ids, image_ids, cost), fh)
    if summary is not None:
        with open(d / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, default=_json_default)
    return d


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def read_landmarks_json(path) -> list:
    with open(path) as fh:
        return json.load(fh)
