"""Problem state: poses, intrinsics and ray-anchored planar landmarks.

A landmark is pinned to a pixel of its source image; its plane ``n`` (in the
source camera frame) gives the depth of every point of the patch through
``X_cam = x_bar / (n . x_bar)``. Camera parameters are addressed through a flat
layout of ``6 P + 6 C`` entries: per image ``(dr, dt)`` and per camera
``(ds, dl)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import camera
from .autodiff import Dual
from .camera import Intrinsics, Pose, _distort_xy, _kappa_inv_xy, _kappa_xy, _undistort_xy

EPS_PLANE = 1e-9
PATCH_OFFSETS = np.array([-1.5, -0.5, 0.5, 1.5])
# 4x4 grid, row-major (y outer, x inner), shape (16, 2)
PATCH_GRID = np.stack(np.meshgrid(PATCH_OFFSETS, PATCH_OFFSETS, indexing="xy"), -1).reshape(16, 2)

# column layout of a full residual-block Jacobian
SRC_ROT, SRC_T, TGT_ROT, TGT_T = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12)
SRC_S, SRC_L, TGT_S, TGT_L, PLANE = (
    slice(12, 16), slice(16, 18), slice(18, 22), slice(22, 24), slice(24, 27)
)
FULL_WIDTH = 27
CAMERA_WIDTH = 24


class SceneError(ValueError):
    pass


class DegenerateLandmark(SceneError):
    pass


class WarpDegenerate(SceneError):
    pass


@dataclass(frozen=True)
class Landmark:
    anchor: np.ndarray
    source: int
    plane: np.ndarray
    visibility: tuple

    @property
    def patch(self) -> np.ndarray:
        """4x4 pixel grid around the anchor, shape ``(2, 16)``."""
        return patch_grid(self.anchor).T


def patch_grid(anchor, spacing: float = 1.0) -> np.ndarray:
    """Grid points ``(..., 16, 2)`` around level-0 anchor(s)."""
    anchor = np.asarray(anchor, dtype=float)
    return anchor[..., None, :] + spacing * PATCH_GRID


@dataclass
class ProblemState:
    """All optimisation variables plus the fixed landmark bookkeeping.

    Treated as immutable: :func:`apply_update` returns a new state.
    """

    R: np.ndarray  # (P, 3, 3)
    t: np.ndarray  # (P, 3)
    s: np.ndarray  # (C, 4)
    l: np.ndarray  # (C, 2)
    camera_of_image: np.ndarray  # (P,)
    image_size: np.ndarray  # (P, 2) width, height
    anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    planes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    vis_ptr: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=int))
    vis_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    validity_radius: float = camera.DEFAULT_VALIDITY_RADIUS

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1, 3)
        self.s = np.asarray(self.s, dtype=float).reshape(-1, 4)
        self.l = np.asarray(self.l, dtype=float).reshape(-1, 2)
        self.camera_of_image = np.asarray(self.camera_of_image, dtype=int).reshape(-1)
        self.image_size = np.asarray(self.image_size, dtype=int).reshape(-1, 2)
        self.anchors = np.asarray(self.anchors, dtype=float).reshape(-1, 2)
        self.sources = np.asarray(self.sources, dtype=int).reshape(-1)
        self.planes = np.asarray(self.planes, dtype=float).reshape(-1, 3)
        self.vis_ptr = np.asarray(self.vis_ptr, dtype=int).reshape(-1)
        self.vis_idx = np.asarray(self.vis_idx, dtype=int).reshape(-1)

    # sizes --------------------------------------------------------------
    @property
    def n_images(self) -> int:
        return self.R.shape[0]

    @property
    def n_cameras(self) -> int:
        return self.s.shape[0]

    @property
    def n_landmarks(self) -> int:
        return self.planes.shape[0]

    @property
    def n_camera_params(self) -> int:
        return 6 * self.n_images + 6 * self.n_cameras

    @property
    def n_blocks(self) -> int:
        return int(self.vis_idx.size)

    # views ----------------------------------------------------------------
    def pose(self, i: int) -> Pose:
        return Pose(self.R[i], self.t[i])

    def intrinsics_of_image(self, i: int) -> Intrinsics:
        c = self.camera_of_image[i]
        return Intrinsics(self.s[c], self.l[c])

    def visibility(self, k: int) -> np.ndarray:
        return self.vis_idx[self.vis_ptr[k] : self.vis_ptr[k + 1]]

    def landmark(self, k: int) -> Landmark:
        return Landmark(
            self.anchors[k].copy(), int(self.sources[k]), self.planes[k].copy(),
            tuple(int(j) for j in self.visibility(k)),
        )

    @property
    def landmarks(self) -> list:
        return [self.landmark(k) for k in range(self.n_landmarks)]

    def block_arrays(self):
        """``(landmark, target)`` index arrays of all residual blocks."""
        counts = np.diff(self.vis_ptr)
        return np.repeat(np.arange(self.n_landmarks), counts), self.vis_idx.copy()

    def camera_sizes(self) -> np.ndarray:
        """Image size of the first image using each camera, shape ``(C, 2)``."""
        out = np.zeros((self.n_cameras, 2), dtype=int)
        for i in range(self.n_images - 1, -1, -1):
            out[self.camera_of_image[i]] = self.image_size[i]
        return out

    def inverse_distortion_table(self):
        """Per-camera undistortion coefficients ``(C, 6)`` and ``d b / d l`` ``(C, 6, 2)``."""
        b = np.empty((self.n_cameras, camera.N_INVERSE_COEFFS))
        db = np.empty((self.n_cameras, camera.N_INVERSE_COEFFS, 2))
        for c in range(self.n_cameras):
            r = camera.monotone_radius(self.l[c], self.validity_radius)
            b[c], db[c] = camera.inverse_coefficients(self.l[c, 0], self.l[c, 1], r)
        return b, db

    # construction ----------------------------------------------------------
    def with_landmarks(self, anchors, sources, planes, visibility) -> "ProblemState":
        vis = [np.asarray(v, dtype=int) for v in visibility]
        ptr = np.zeros(len(vis) + 1, dtype=int)
        ptr[1:] = np.cumsum([v.size for v in vis])
        idx = np.concatenate(vis) if vis else np.zeros(0, dtype=int)
        return replace(
            self, anchors=np.asarray(anchors, dtype=float).reshape(-1, 2),
            sources=np.asarray(sources, dtype=int), planes=np.asarray(planes, dtype=float).reshape(-1, 3),
            vis_ptr=ptr, vis_idx=idx,
        )

    def subset_landmarks(self, keep) -> "ProblemState":
        keep = np.flatnonzero(np.asarray(keep)) if np.asarray(keep).dtype == bool else np.asarray(keep)
        return self.with_landmarks(
            self.anchors[keep], self.sources[keep], self.planes[keep],
            [self.visibility(k) for k in keep],
        )

    def copy(self) -> "ProblemState":
        return replace(
            self, R=self.R.copy(), t=self.t.copy(), s=self.s.copy(), l=self.l.copy(),
            planes=self.planes.copy(),
        )

    def validate(self) -> None:
        P, C = self.n_images, self.n_cameras
        if np.any(self.camera_of_image < 0) or np.any(self.camera_of_image >= C):
            raise SceneError("image mapped to a non-existent camera")
        if np.any(self.sources < 0) or np.any(self.sources >= P):
            raise SceneError("landmark source index out of range")
        if np.any(self.vis_idx < 0) or np.any(self.vis_idx >= P):
            raise SceneError("visibility index out of range")
        lm, tgt = self.block_arrays()
        if np.any(self.sources[lm] == tgt):
            raise SceneError("a landmark lists its own source frame as visible")


@dataclass
class ParameterDelta:
    """Update of every variable; ``None`` fields mean zero."""

    dr: np.ndarray | None = None
    dt: np.ndarray | None = None
    ds: np.ndarray | None = None
    dl: np.ndarray | None = None
    dn: np.ndarray | None = None

    @classmethod
    def from_camera_vector(cls, vec, n_images: int, n_cameras: int) -> "ParameterDelta":
        vec = np.asarray(vec, dtype=float)
        img = vec[: 6 * n_images].reshape(n_images, 6)
        cam = vec[6 * n_images :].reshape(n_cameras, 6)
        return cls(dr=img[:, :3], dt=img[:, 3:], ds=cam[:, :4], dl=cam[:, 4:])

    def camera_vector(self, state: ProblemState) -> np.ndarray:
        img = np.zeros((state.n_images, 6))
        cam = np.zeros((state.n_cameras, 6))
        if self.dr is not None:
            img[:, :3] = self.dr
        if self.dt is not None:
            img[:, 3:] = self.dt
        if self.ds is not None:
            cam[:, :4] = self.ds
        if self.dl is not None:
            cam[:, 4:] = self.dl
        return np.concatenate([img.ravel(), cam.ravel()])


def apply_update(state: ProblemState, delta: ParameterDelta) -> ProblemState:
    """``state (+) delta``: rotations right-multiplied, the rest added."""
    new = state.copy()
    if delta.dr is not None:
        dr = np.asarray(delta.dr, dtype=float).reshape(-1, 3)
        moving = np.any(dr != 0.0, axis=1)
        if np.any(moving):
            new.R[moving] = state.R[moving] @ camera.rodrigues(dr[moving])
    if delta.dt is not None:
        new.t = state.t + delta.dt
    if delta.ds is not None:
        new.s = state.s + delta.ds
    if delta.dl is not None:
        new.l = state.l + delta.dl
    if delta.dn is not None:
        new.planes = state.planes + delta.dn
    return new


# -- landmark geometry ------------------------------------------------------------


def _backproject_xy(s, b, x, y):
    xn, yn = _kappa_inv_xy(s, x, y)
    return _undistort_xy(b, xn, yn)


def landmark_world_point(lm, state: ProblemState, eps: float = EPS_PLANE) -> np.ndarray:
    """World position of a landmark (a :class:`Landmark` or its index)."""
    if not isinstance(lm, Landmark):
        lm = state.landmark(int(lm))
    return _world_points(state, lm.anchor[None], np.array([lm.source]), lm.plane[None], eps)[0]


def world_points(state: ProblemState, idx=None, eps: float = EPS_PLANE) -> np.ndarray:
    """World positions of many landmarks; degenerate ones come back as NaN."""
    idx = np.arange(state.n_landmarks) if idx is None else np.asarray(idx)
    return _world_points(state, state.anchors[idx], state.sources[idx], state.planes[idx], eps,
                         strict=False)


def _world_points(state, pixels, sources, planes, eps, strict=True):
    b, _ = state.inverse_distortion_table()
    cam = state.camera_of_image[sources]
    s = state.s[cam].T
    xu, yu = _backproject_xy(s, b[cam].T, pixels[:, 0], pixels[:, 1])
    xbar = np.stack([xu, yu, np.ones_like(xu)], -1)
    nd = (planes * xbar).sum(-1)
    bad = ~(nd > eps)
    if strict and np.any(bad):
        raise DegenerateLandmark("plane is at infinity or behind the source camera (n.x_bar <= eps)")
    with np.errstate(divide="ignore", invalid="ignore"):
        Xc = xbar / nd[:, None]
    X = np.einsum("nji,nj->ni", state.R[sources], Xc - state.t[sources])
    X[bad] = np.nan
    return X


def plane_from_point_normal(R, t, X, normal) -> np.ndarray:
    """Plane vector ``n`` (source frame) through world point ``X`` with world ``normal``.

    The normal is flipped to face the camera; ``n . X_cam = 1``.
    """
    Xc = R @ X + t
    nc = R @ np.asarray(normal, dtype=float)
    if nc @ Xc > 0:
        nc = -nc
    d = nc @ Xc
    if abs(d) < EPS_PLANE:
        raise DegenerateLandmark("plane passes through the camera center")
    return nc / d


def plane_normal_world(state: ProblemState, idx=None) -> np.ndarray:
    """Unit plane normals in world coordinates, facing the source camera."""
    idx = np.arange(state.n_landmarks) if idx is None else np.asarray(idx)
    n = state.planes[idx]
    nw = np.einsum("nji,nj->ni", state.R[state.sources[idx]], n)
    norm = np.linalg.norm(nw, axis=1, keepdims=True)
    # n points away from the camera (n . X_cam = 1 > 0); flip to face it
    return -nw / np.where(norm > 0, norm, 1.0)


# -- batched differentiable warp ------------------------------------------------------


def _seeded(vals: np.ndarray, start: int, width: int):
    """Per-block parameter components ``(B, 1)`` seeded at ``start..``."""
    B, k = vals.shape
    out = []
    for j in range(k):
        der = np.zeros((B, 1, width))
        der[:, 0, start + j] = 1.0
        out.append(Dual(vals[:, j : j + 1], der))
    return out


def _plain(vals: np.ndarray):
    return [vals[:, j : j + 1] for j in range(vals.shape[1])]


def _cross(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def warp_points(
    state: ProblemState,
    lm: np.ndarray,
    tgt: np.ndarray,
    grid: np.ndarray,
    seeds: str = "none",
    inv_table=None,
    eps: float = EPS_PLANE,
):
    """Map source-image grid points of landmarks ``lm`` into images ``tgt``.

    ``grid`` has shape ``(B, N, 2)`` in level-0 source pixels. ``seeds`` picks
    the derivative block: ``"none"`` (values only), ``"plane"`` (3 columns)
    or ``"full"`` (27 columns, see the ``SRC_*``/``TGT_*``/``PLANE`` slices).
    Returns ``(u, v, ok)`` where ``ok`` flags blocks with every point in front
    of both cameras.
    """
    lm = np.asarray(lm)
    tgt = np.asarray(tgt)
    src = state.sources[lm]
    cs = state.camera_of_image[src]
    ct = state.camera_of_image[tgt]
    b_tab, db_tab = inv_table if inv_table is not None else state.inverse_distortion_table()
    planes = state.planes[lm]

    if seeds == "full":
        K = FULL_WIDTH
        s_src = _seeded(state.s[cs], SRC_S.start, K)
        t_src = _seeded(state.t[src], SRC_T.start, K)
        t_tgt = _seeded(state.t[tgt], TGT_T.start, K)
        s_tgt = _seeded(state.s[ct], TGT_S.start, K)
        l_tgt = _seeded(state.l[ct], TGT_L.start, K)
        n = _seeded(planes, PLANE.start, K)
        zero = np.zeros((lm.size, 3))
        dr_src = _seeded(zero, SRC_ROT.start, K)
        dr_tgt = _seeded(zero, TGT_ROT.start, K)
        b_src = []
        for j in range(camera.N_INVERSE_COEFFS):
            der = np.zeros((lm.size, 1, K))
            der[:, 0, SRC_L] = db_tab[cs, j, :]
            b_src.append(Dual(b_tab[cs, j : j + 1], der))
    else:
        s_src, t_src, t_tgt = _plain(state.s[cs]), _plain(state.t[src]), _plain(state.t[tgt])
        s_tgt, l_tgt = _plain(state.s[ct]), _plain(state.l[ct])
        b_src = _plain(b_tab[cs])
        dr_src = dr_tgt = None
        n = _seeded(planes, 0, 3) if seeds == "plane" else _plain(planes)

    xu, yu = _backproject_xy(s_src, b_src, grid[..., 0], grid[..., 1])
    nd = n[0] * xu + n[1] * yu + n[2]
    ok = np.all(_val(nd) > eps, axis=-1)
    inv = 1.0 / _safe(nd, eps)
    c = (xu * inv - t_src[0], yu * inv - t_src[1], inv - t_src[2])
    Rs = state.R[src]
    X = [sum(c[m] * Rs[:, m, i, None] for m in range(3)) for i in range(3)]
    if dr_src is not None:
        # Omega(dr)^T w ~ w - dr x w at dr = 0
        cr = _cross(dr_src, X)
        X = [X[i] - cr[i] for i in range(3)]
    if dr_tgt is not None:
        cr = _cross(dr_tgt, X)
        X = [X[i] + cr[i] for i in range(3)]
    Rt = state.R[tgt]
    pc = [sum(X[m] * Rt[:, i, m, None] for m in range(3)) + t_tgt[i] for i in range(3)]
    ok &= np.all(_val(pc[2]) > camera.EPS_Z, axis=-1)
    z = _safe(pc[2], camera.EPS_Z)
    xd, yd = _distort_xy(l_tgt[0], l_tgt[1], pc[0] / z, pc[1] / z)
    u, v = _kappa_xy(s_tgt, xd, yd)
    return u, v, ok


def _val(x):
    return x.val if isinstance(x, Dual) else np.asarray(x)


def _safe(x, eps):
    # keep degenerate entries finite; their blocks are masked out by ``ok``
    if isinstance(x, Dual):
        bad = ~(x.val > eps)
        if np.any(bad):
            return Dual(np.where(bad, 1.0, x.val), np.where(bad[..., None], 0.0, x.der))
        return x
    x = np.asarray(x)
    return np.where(x > eps, x, 1.0)


def warp_patch(lm, target: int, state: ProblemState, spacing: float = 1.0) -> np.ndarray:
    """Warp a landmark's 4x4 patch into ``target``; returns ``(2, 16)`` pixels."""
    if not isinstance(lm, Landmark):
        k = int(lm)
        lm = state.landmark(k)
    tmp = state.with_landmarks(lm.anchor[None], [lm.source], lm.plane[None], [[]])
    grid = patch_grid(lm.anchor, spacing)[None]
    u, v, ok = warp_points(tmp, np.array([0]), np.array([target]), grid)
    if not ok[0]:
        raise WarpDegenerate("patch warp is degenerate (plane edge-on or behind a camera)")
    return np.stack([u[0], v[0]])


def project_world(state: ProblemState, images, X):
    """Project world points ``X (..., 3)`` into ``images`` (broadcast); returns ``(uv, depth)``.

    Points at or behind the camera get NaN pixels.
    """
    images = np.asarray(images)
    X = np.asarray(X, dtype=float)
    R = state.R[images]
    pc = np.einsum("...ij,...j->...i", R, X) + state.t[images]
    z = pc[..., 2]
    front = z > camera.EPS_Z
    zs = np.where(front, z, 1.0)
    cam = state.camera_of_image[images]
    l = state.l[cam]
    s = state.s[cam]
    xd, yd = _distort_xy(l[..., 0], l[..., 1], pc[..., 0] / zs, pc[..., 1] / zs)
    u, v = _kappa_xy(np.moveaxis(s, -1, 0), xd, yd)
    uv = np.stack([u, v], -1)
    uv[~front] = np.nan
    return uv, z


@dataclass
class WarpLinearization:
    """Warped points plus the stage-wise pieces needed to pull gradients back.

    Rather than carrying 27 derivative columns through every operation,
    the warp keeps the intermediate values; :meth:`pullback` turns image
    gradients at the warped points into the 27 block columns with a few
    small products (chain rule, stage by stage).
    """

    u: np.ndarray
    v: np.ndarray
    ok: np.ndarray
    xbar: np.ndarray  # (B, N, 3) undistorted source ray
    nd: np.ndarray  # (B, N)  n . x_bar
    Xc: np.ndarray  # (B, N, 3) source-camera point
    X: np.ndarray  # (B, N, 3) world point
    xn: np.ndarray  # (B, N, 2) target normalized (undistorted) coords
    xd: np.ndarray  # (B, N, 2) target distorted coords
    z: np.ndarray  # (B, N) target depth
    Rs: np.ndarray
    Rt: np.ndarray
    s_t: np.ndarray  # (B, 4)
    l_t: np.ndarray  # (B, 2)
    planes: np.ndarray
    src_jac: np.ndarray  # (B, N, 2, 6) d(xu, yu) / d(s_src, l_src)

    def pullback(self, gx, gy, columns: str = "full") -> np.ndarray:
        """Derivatives ``(B, N, K)`` of a function with pixel gradient ``(gx, gy)``.

        ``columns`` is ``"full"`` (27, block layout) or ``"plane"`` (3).
        """
        s, l = self.s_t, self.l_t
        xn, yn = self.xn[..., 0], self.xn[..., 1]
        r = xn * xn + yn * yn
        f = 1.0 + l[:, 0, None] * r + l[:, 1, None] * r * r
        fp = l[:, 0, None] + 2.0 * l[:, 1, None] * r
        ga0 = gx * s[:, 0, None]
        ga1 = gy * s[:, 1, None]
        gn0 = ga0 * (f + 2 * xn * xn * fp) + ga1 * (2 * xn * yn * fp)
        gn1 = ga0 * (2 * xn * yn * fp) + ga1 * (f + 2 * yn * yn * fp)
        z = self.z
        a = np.stack([gn0 / z, gn1 / z, -(gn0 * xn + gn1 * yn) / z], -1)  # d/d pc
        bX = np.einsum("bni,bim->bnm", a, self.Rt)
        bXc = np.einsum("bni,bmi->bnm", bX, self.Rs)
        w = (bXc * self.Xc).sum(-1)
        d_plane = -(w / self.nd)[..., None] * self.xbar
        if columns == "plane":
            return d_plane
        B, N = gx.shape
        J = np.empty((B, N, FULL_WIDTH))
        J[..., SRC_ROT] = np.cross(bX, self.X)
        J[..., SRC_T] = -bXc
        J[..., TGT_ROT] = np.cross(self.X, bX)
        J[..., TGT_T] = a
        n = self.planes[:, None, :]
        d_xbar = (bXc[..., :2] - w[..., None] * n[..., :2]) / self.nd[..., None]
        J[..., SRC_S.start : SRC_L.stop] = np.einsum("bni,bnik->bnk", d_xbar, self.src_jac)
        xd, yd = self.xd[..., 0], self.xd[..., 1]
        J[..., TGT_S] = np.stack([gx * xd, gy * yd, gx, gy], -1)
        q = ga0 * xn + ga1 * yn
        J[..., TGT_L] = np.stack([q * r, q * r * r], -1)
        J[..., PLANE] = d_plane
        return J


def _source_jacobian(s, b, db, x, y):
    """``d(xu, yu) / d(s, l)`` of the back-projection, shape ``(B, N, 2, 6)``."""
    s = s[:, None, :]
    xn = (x - s[..., 2]) / s[..., 0]
    yn = (y - s[..., 3]) / s[..., 1]
    r = xn * xn + yn * yn
    pw = r[..., None] ** np.arange(1, camera.N_INVERSE_COEFFS + 1)  # r^j
    f = 1.0 + (pw * b[:, None, :]).sum(-1)
    fp = (np.arange(1, camera.N_INVERSE_COEFFS + 1) * pw / np.where(r > 0, r, 1.0)[..., None]
          * b[:, None, :]).sum(-1)
    dxx = f + 2 * xn * xn * fp
    dyy = f + 2 * yn * yn * fp
    dxy = 2 * xn * yn * fp
    B, N = x.shape
    J = np.zeros((B, N, 2, 6))
    # through xn = (x - s2) / s0 and yn = (y - s3) / s1
    J[..., 0, 0] = -dxx * xn / s[..., 0]
    J[..., 0, 1] = -dxy * yn / s[..., 1]
    J[..., 0, 2] = -dxx / s[..., 0]
    J[..., 0, 3] = -dxy / s[..., 1]
    J[..., 1, 0] = -dxy * xn / s[..., 0]
    J[..., 1, 1] = -dyy * yn / s[..., 1]
    J[..., 1, 2] = -dxy / s[..., 0]
    J[..., 1, 3] = -dyy / s[..., 1]
    # through the inverse coefficients b(l)
    dfdl = np.einsum("bnj,bjk->bnk", pw, db)
    J[..., 0, 4:] = xn[..., None] * dfdl
    J[..., 1, 4:] = yn[..., None] * dfdl
    return J


def linearize_warp(state: ProblemState, lm, tgt, grid, inv_table=None,
                   eps: float = EPS_PLANE) -> WarpLinearization:
    """Values of the warp with everything :meth:`WarpLinearization.pullback` needs."""
    lm = np.asarray(lm)
    tgt = np.asarray(tgt)
    src = state.sources[lm]
    cs = state.camera_of_image[src]
    ct = state.camera_of_image[tgt]
    b_tab, db_tab = inv_table if inv_table is not None else state.inverse_distortion_table()
    s_src = state.s[cs]
    planes = state.planes[lm]
    gx_, gy_ = grid[..., 0], grid[..., 1]
    xu, yu = _backproject_xy(s_src.T[:, :, None], b_tab[cs].T[:, :, None], gx_, gy_)
    xbar = np.stack([xu, yu, np.ones_like(xu)], -1)
    nd = (xbar * planes[:, None, :]).sum(-1)
    ok = np.all(nd > eps, axis=-1)
    nd_s = np.where(nd > eps, nd, 1.0)
    Xc = xbar / nd_s[..., None]
    Rs = state.R[src]
    X = np.einsum("bmi,bnm->bni", Rs, Xc - state.t[src][:, None, :])
    Rt = state.R[tgt]
    pc = np.einsum("bim,bnm->bni", Rt, X) + state.t[tgt][:, None, :]
    ok &= np.all(pc[..., 2] > camera.EPS_Z, axis=-1)
    z = np.where(pc[..., 2] > camera.EPS_Z, pc[..., 2], 1.0)
    xn = pc[..., :2] / z[..., None]
    l_t = state.l[ct]
    s_t = state.s[ct]
    xd, yd = _distort_xy(l_t[:, 0, None], l_t[:, 1, None], xn[..., 0], xn[..., 1])
    u, v = _kappa_xy(s_t.T[:, :, None], xd, yd)
    src_jac = _source_jacobian(s_src, b_tab[cs], db_tab[cs], gx_, gy_)
    return WarpLinearization(u, v, ok, xbar, nd_s, Xc, X, xn, np.stack([xd, yd], -1), z, Rs, Rt,
                             s_t, l_t, planes, src_jac)
