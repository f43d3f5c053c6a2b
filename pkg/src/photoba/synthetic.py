"""Synthetic ground-truth scenes: textured planes seen by a ring of cameras.

Images are rendered by ray casting every pixel center through the true
camera (exact undistortion by Newton's method) onto the nearest textured
plane, so they agree with the camera model used by the optimiser. The
initial model handed to the pipeline is the truth with pose, focal and
depth noise.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import camera
from .colmap_io import write_colmap_model, write_visibility_json
from .preprocess import patch_sigma
from .imaging import _bilinear
from .scene import ProblemState, patch_grid, plane_from_point_normal, project_world

logger = logging.getLogger(__name__)

INTENSITY_MEAN = 128.0
INTENSITY_SPAN = 120.0
PERSISTENCE = 0.3
FOOTPRINT = 6.0  # px, half-width of the region a landmark patch may touch


@dataclass
class SceneSpec:
    n_images: int = 10
    width: int = 640
    height: int = 480
    focal: float = 500.0
    distortion: tuple = (-0.02, 0.004)
    n_landmarks: int = 2000
    arc_degrees: float = 40.0
    radius: float = 6.0
    camera_height: float = -1.5  # y of the arc; the floor is at y = 1.5 (y points down)
    texture_scale: float = 0.8  # world units of the coarsest noise octave
    octaves: int = 1
    min_sigma: float = 10.0  # texture required of the true anchor patch
    rotation_deg: float = 0.5
    translation_frac: float = 0.01
    focal_frac: float = 0.02
    depth_frac: float = 0.02
    gain_range: tuple = (0.6, 1.6)
    bias_range: tuple = (-30.0, 30.0)
    relight: bool = True
    border: int = 12


@dataclass
class Surface:
    """A textured plane ``{x : normal . x = offset}``, optionally a bounded rectangle."""

    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    bounds: tuple | None = None  # (umin, umax, vmin, vmax)
    seed: int = 0

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u_axis, self.v_axis)
        return n / np.linalg.norm(n)

    def as_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "u_axis": self.u_axis.tolist(),
                "v_axis": self.v_axis.tolist(), "bounds": self.bounds, "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "Surface":
        b = d.get("bounds")
        return cls(np.array(d["origin"], dtype=float), np.array(d["u_axis"], dtype=float),
                   np.array(d["v_axis"], dtype=float), tuple(b) if b is not None else None,
                   int(d.get("seed", 0)))


def default_surfaces(seed: int) -> list:
    """Back wall (unbounded), floor and a left wall meeting the back wall at 135 degrees.

    The left wall is slanted towards the cameras so that no camera sits close
    to its plane; a wall seen edge-on gives landmarks with almost no parallax.
    """
    ex, ey, ez = np.eye(3)
    slant = np.array([-1.0, 0.0, -1.0]) / np.sqrt(2.0)
    return [
        Surface(np.array([0.0, 0.0, 1.5]), ex, ey, None, seed * 7 + 1),
        Surface(np.array([0.0, 1.5, 0.0]), ex, ez, (-8.0, 8.0, -8.0, 1.5), seed * 7 + 2),
        Surface(np.array([-2.5, 0.0, 1.5]), slant, ey, (0.0, 10.0, -8.0, 1.5), seed * 7 + 3),
    ]


# -- texture -------------------------------------------------------------------------


def _lattice(ix, iy, seed):
    # integer hash -> [0, 1)
    h = (ix.astype(np.int64) * 374761393 + iy.astype(np.int64) * 668265263
         + seed * 2147483647) & 0xFFFFFFFF
    h = ((h ^ (h >> 13)) * 1274126177) & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF) / float(1 << 24)


def value_noise(u, v, seed: int, scale: float, octaves: int) -> np.ndarray:
    """Band-limited multi-octave value noise in roughly ``[-1, 1]``."""
    total = np.zeros(np.shape(u))
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        f = (2.0**o) / scale
        x, y = np.asarray(u) * f, np.asarray(v) * f
        x0, y0 = np.floor(x), np.floor(y)
        fx, fy = x - x0, y - y0
        # quintic fade keeps the field C2
        sx = fx**3 * (fx * (fx * 6 - 15) + 10)
        sy = fy**3 * (fy * (fy * 6 - 15) + 10)
        s = seed * 31 + o
        a = _lattice(x0, y0, s)
        b = _lattice(x0 + 1, y0, s)
        c = _lattice(x0, y0 + 1, s)
        d = _lattice(x0 + 1, y0 + 1, s)
        val = a + sx * (b - a) + sy * (c - a) + sx * sy * (a - b - c + d)
        total += amp * (2.0 * val - 1.0)
        norm += amp
        amp *= PERSISTENCE
    return total / norm


# -- ray casting ---------------------------------------------------------------------


def raycast(surfaces, origins, dirs):
    """Nearest positive hit of rays on the surfaces; returns ``(t, surface index, u, v)``."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_s = np.full(n, -1)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    for k, s in enumerate(surfaces):
        nrm = s.normal
        den = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((s.origin - origins) @ nrm) / den
            hit = np.isfinite(t) & (t > 1e-9)
            P = origins + t[:, None] * dirs
            u = (P - s.origin) @ s.u_axis
            v = (P - s.origin) @ s.v_axis
        if s.bounds is not None:
            umin, umax, vmin, vmax = s.bounds
            hit &= (u >= umin) & (u <= umax) & (v >= vmin) & (v <= vmax)
        better = hit & (t < best_t)
        best_t[better] = t[better]
        best_s[better] = k
        best_u[better] = u[better]
        best_v[better] = v[better]
    return best_t, best_s, best_u, best_v


def pixel_rays(R, t, s, l, pixels):
    """World-space rays through pixel centers (exact undistortion)."""
    xn = camera.kappa_inv(s, pixels)
    xu = camera._newton_undistort(np.asarray(l, dtype=float), xn, xn, 1e-14)
    d_cam = np.concatenate([xu, np.ones(xu.shape[:-1] + (1,))], -1)
    d = d_cam @ R  # R^T d_cam per row
    c = -R.T @ t
    return np.broadcast_to(c, d.shape).copy(), d


def texture_at(surfaces, sidx, u, v, scale, octaves):
    out = np.full(u.shape, INTENSITY_MEAN)
    for k, s in enumerate(surfaces):
        m = sidx == k
        if np.any(m):
            out[m] = INTENSITY_MEAN + INTENSITY_SPAN * value_noise(u[m], v[m], s.seed, scale, octaves)
    return out


def render_view(surfaces, R, t, s, l, width, height, scale, octaves):
    """Point-sampled image and z-depth map of one camera."""
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    pix = np.stack([xs.ravel(), ys.ravel()], -1)
    o, d = pixel_rays(R, t, s, l, pix)
    tt, sidx, u, v = raycast(surfaces, o, d)
    img = texture_at(surfaces, sidx, u, v, scale, octaves)
    # z-depth: the camera-frame direction has unit z
    depth = np.where(np.isfinite(tt), tt, 0.0)
    return img.reshape(height, width), depth.reshape(height, width)


# -- scene generation ------------------------------------------------------------------


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    surfaces: list
    truth: ProblemState
    initial: ProblemState
    images: list
    depths: list
    gains: np.ndarray
    biases: np.ndarray
    point_ids: np.ndarray
    truth_points: np.ndarray
    initial_points: np.ndarray
    normals: np.ndarray
    visibility: list = field(default_factory=list)  # per landmark, includes the anchor view


def _look_at(center, target, up=np.array([0.0, 1.0, 0.0])):
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def truth_cameras(spec: SceneSpec, rng):
    P = spec.n_images
    ang = np.deg2rad(np.linspace(-spec.arc_degrees / 2, spec.arc_degrees / 2, P))
    Rs, ts = [], []
    for a in ang:
        c = np.array([spec.radius * np.sin(a), spec.camera_height + 0.1 * rng.standard_normal(),
                      -spec.radius * np.cos(a)])
        target = np.array([-0.3, 0.3, 1.0]) + 0.1 * rng.standard_normal(3)
        R, t = _look_at(c, target)
        Rs.append(R)
        ts.append(t)
    s = np.array([[spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2]])
    l = np.array([spec.distortion], dtype=float)
    sizes = np.tile([spec.width, spec.height], (P, 1))
    return ProblemState(np.stack(Rs), np.stack(ts), s, l, np.zeros(P, dtype=int), sizes)


def _random_rotation(rng, angle):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return camera.rodrigues(axis * angle)


def generate_synthetic_scene(seed: int = 0, spec: SceneSpec | None = None) -> SyntheticScene:
    """Render a deterministic scene and its perturbed initial model."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    surfaces = default_surfaces(seed)
    truth = truth_cameras(spec, rng)
    P = spec.n_images
    images, depths = [], []
    for i in range(P):
        img, dep = render_view(surfaces, truth.R[i], truth.t[i], truth.s[0], truth.l[0],
                               spec.width, spec.height, spec.texture_scale, spec.octaves)
        images.append(img)
        depths.append(dep)

    # landmarks: random pixels of random anchor views, ray cast onto the truth
    m = spec.border
    n_try = spec.n_landmarks * 6
    src = rng.integers(0, P, n_try)
    pix = np.stack([rng.integers(m, spec.width - m, n_try),
                    rng.integers(m, spec.height - m, n_try)], -1).astype(float)
    X = np.full((n_try, 3), np.nan)
    sidx = np.full(n_try, -1)
    for i in range(P):
        sel = src == i
        o, d = pixel_rays(truth.R[i], truth.t[i], truth.s[0], truth.l[0], pix[sel])
        tt, si, _, _ = raycast(surfaces, o, d)
        ok = np.isfinite(tt)
        Xi = o + tt[:, None] * d
        Xi[~ok] = np.nan
        X[sel] = Xi
        sidx[sel] = si
    normals = np.array([surfaces[k].normal if k >= 0 else [np.nan] * 3 for k in sidx])
    # patch footprint (incl. the coarse-level support) must stay on one surface
    foot = np.stack(np.meshgrid([-FOOTPRINT, 0, FOOTPRINT], [-FOOTPRINT, 0, FOOTPRINT]), -1).reshape(-1, 2)
    fX = np.full((n_try, len(foot), 3), np.nan)
    same = np.ones(n_try, dtype=bool)
    for i in range(P):
        sel = np.flatnonzero(src == i)
        fp = (pix[sel, None, :] + foot).reshape(-1, 2)
        o, d = pixel_rays(truth.R[i], truth.t[i], truth.s[0], truth.l[0], fp)
        tt, si, _, _ = raycast(surfaces, o, d)
        fX[sel] = (o + tt[:, None] * d).reshape(len(sel), len(foot), 3)
        same[sel] = np.all(si.reshape(len(sel), -1) == sidx[sel, None], axis=1)
    X[~same] = np.nan
    g = patch_grid(pix)
    vals = np.empty((n_try, 16))
    for i in range(P):
        sel = src == i
        vals[sel] = _bilinear(images[i], g[sel, :, 0], g[sel, :, 1])[0]
    X[patch_sigma(vals) < spec.min_sigma] = np.nan
    vis = _truth_visibility(truth, depths, fX, spec.border)
    good = np.isfinite(X).all(1) & (np.array([v.size for v in vis]) >= 3)
    for k in np.flatnonzero(good):
        vis[k] = np.union1d(vis[k], [src[k]])
    order = np.flatnonzero(good)[: spec.n_landmarks]
    X, normals, src, pix = X[order], normals[order], src[order], pix[order]
    vis = [vis[k] for k in order]

    # truth landmarks in the pipeline's own parameterisation
    planes = np.stack([plane_from_point_normal(truth.R[s], truth.t[s], x, nrm)
                       for s, x, nrm in zip(src, X, normals)])
    truth = truth.with_landmarks(pix, src, planes, [np.setdiff1d(v, [s]) for v, s in zip(vis, src)])

    initial = _perturb(truth, spec, rng, X)
    init_points = _perturb_depth(truth, X, src, spec.depth_frac, rng)
    if spec.relight:
        gains = rng.uniform(*spec.gain_range, P)
        biases = rng.uniform(*spec.bias_range, P)
    else:
        gains, biases = np.ones(P), np.zeros(P)
    lit = [g * im + b for g, b, im in zip(gains, biases, images)]
    return SyntheticScene(spec, seed, surfaces, truth, initial, lit, depths, gains, biases,
                          np.arange(1, len(order) + 1), X, init_points, normals, vis)


def _truth_visibility(state, depths, X, border):
    """Views where every footprint point ``X (L, F, 3)`` is the first surface hit."""
    L, F = X.shape[:2]
    out = [[] for _ in range(L)]
    finite = np.isfinite(X).all((1, 2))
    Xf = np.nan_to_num(X)
    for j in range(state.n_images):
        uv, d = project_world(state, np.full((L, F), j), Xf)
        D = depths[j]
        H, W = D.shape
        with np.errstate(invalid="ignore"):
            xi, yi = np.rint(uv[..., 0]), np.rint(uv[..., 1])
            inb = (xi >= border) & (xi <= W - 1 - border) & (yi >= border) & (yi <= H - 1 - border)
        inb &= finite[:, None] & (d > 0)
        xi = np.where(inb, xi, 0).astype(int)
        yi = np.where(inb, yi, 0).astype(int)
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = inb & (np.abs(D[yi, xi] - d) / np.where(inb, d, 1.0) < 0.005)
        for k in np.flatnonzero(ok.all(1)):
            out[k].append(j)
    return [np.array(v, dtype=int) for v in out]


def scene_diameter(state: ProblemState, points) -> float:
    centers = -np.einsum("nji,nj->ni", state.R, state.t)
    allp = np.concatenate([centers, points])
    return float(np.linalg.norm(allp.max(0) - allp.min(0)))


def _perturb(truth, spec, rng, points):
    P = truth.n_images
    R = truth.R.copy()
    t = truth.t.copy()
    diam = scene_diameter(truth, points)
    for i in range(P):
        c = -R[i].T @ t[i]
        dR = _random_rotation(rng, np.deg2rad(spec.rotation_deg))
        R[i] = dR @ R[i]
        dc = rng.standard_normal(3)
        c = c + spec.translation_frac * diam * dc / np.linalg.norm(dc)
        t[i] = -R[i] @ c
    s = truth.s.copy()
    sign = rng.choice([-1.0, 1.0])
    s[:, :2] *= 1.0 + sign * spec.focal_frac
    return ProblemState(R, t, s, truth.l.copy(), truth.camera_of_image.copy(),
                        truth.image_size.copy())


def _perturb_depth(truth, X, src, frac, rng):
    centers = -np.einsum("nji,nj->ni", truth.R, truth.t)
    c = centers[src]
    scale = 1.0 + rng.uniform(-frac, frac, len(X))
    return c + (X - c) * scale[:, None]


# -- disk layout ----------------------------------------------------------------------------


def write_synthetic_scene(scene: SyntheticScene, directory) -> Path:
    """Write images, truth and initial models, visibility and scene description.

    Layout: ``images/*.npy`` (float intensities), ``truth/`` and ``initial/``
    text models (with ``point_normals.txt``), ``visibility.json`` and
    ``scene.json``.
    """
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    names = [f"image_{i + 1:04d}.npy" for i in range(scene.truth.n_images)]
    for name, img in zip(names, scene.images):
        np.save(d / "images" / name, img)
    image_ids = np.arange(1, scene.truth.n_images + 1)
    tracks = [[int(s), *np.setdiff1d(v, [s]).tolist()] for s, v in
              zip(scene.truth.sources, scene.visibility)]
    write_colmap_model(d / "truth", scene.truth, image_ids, None, names, scene.point_ids,
                       scene.truth_points, scene.normals, tracks)
    write_colmap_model(d / "initial", scene.initial, image_ids, None, names, scene.point_ids,
                       scene.initial_points, scene.normals, tracks)
    write_visibility_json(d / "visibility.json",
                          {int(p): [int(image_ids[i]) for i in v]
                           for p, v in zip(scene.point_ids, scene.visibility)})
    meta = {
        "seed": scene.seed,
        "spec": asdict(scene.spec),
        "surfaces": [s.as_dict() for s in scene.surfaces],
        "gains": scene.gains.tolist(),
        "biases": scene.biases.tolist(),
    }
    with open(d / "scene.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return d


def load_surfaces(path) -> list:
    with open(path) as fh:
        meta = json.load(fh)
    return [Surface.from_dict(s) for s in meta["surfaces"]]


def truth_landmark_points(surfaces, truth: ProblemState, anchors, sources) -> np.ndarray:
    """Ray-cast anchor pixels through the true source cameras onto the true surfaces."""
    anchors = np.asarray(anchors, dtype=float)
    sources = np.asarray(sources, dtype=int)
    out = np.full((len(anchors), 3), np.nan)
    for i in np.unique(sources):
        m = sources == i
        c = truth.camera_of_image[i]
        o, d = pixel_rays(truth.R[i], truth.t[i], truth.s[c], truth.l[c], anchors[m])
        tt, _, _, _ = raycast(surfaces, o, d)
        out[m] = o + tt[:, None] * d
    return out
