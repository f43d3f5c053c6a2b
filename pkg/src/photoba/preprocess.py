"""One-off landmark setup: visibility, source-frame choice and texture culling.

Everything here runs once before optimisation and is vectorised over
landmarks; per-landmark wrappers exist for the individual operations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .imaging import PyramidAtlas
from .photocost import TAU, _ncc, geman_mcclure
from .scene import (
    PATCH_GRID,
    ProblemState,
    patch_grid,
    plane_normal_world,
    project_world,
    world_points,
)

logger = logging.getLogger(__name__)

VISIBILITY_THRESHOLD = 0.01
CULL_SIGMA = 8.0  # 0.5 N for N = 16 samples on 256 gray levels
IRLS_MAX_ITER = 20
IRLS_TOL = 1e-6
SPACING_TOL = 1e-6
TIE_TOL = 1e-12


class PreprocessError(ValueError):
    pass


@dataclass
class WorldPatchGrid:
    X: np.ndarray  # (3, 16)
    spacing: float
    center: np.ndarray
    axes: np.ndarray  # (2, 3) in-plane unit vectors


# -- visibility ---------------------------------------------------------------------


def compute_visibility(state: ProblemState, depth_maps, threshold: float = VISIBILITY_THRESHOLD,
                       points=None) -> list:
    """Views where each landmark's depth agrees with the depth map to ``threshold``.

    A view counts if the point projects inside the image, lies in front of
    the camera at depth ``d`` and ``|d - D| / d < threshold`` where ``D`` is
    the depth-map value at the nearest pixel. The source view is not
    special-cased.
    """
    if depth_maps is None:
        raise PreprocessError("visibility needs depth maps or explicit visibility lists")
    X = world_points(state) if points is None else np.asarray(points, dtype=float)
    L = X.shape[0]
    vis = np.zeros((L, state.n_images), dtype=bool)
    for j in range(state.n_images):
        D = np.asarray(depth_maps[j], dtype=float)
        H, W = D.shape
        uv, d = project_world(state, np.full(L, j), X)
        with np.errstate(invalid="ignore"):
            xi = np.rint(uv[:, 0])
            yi = np.rint(uv[:, 1])
            inb = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1) & (d > 0)
        xi = np.where(inb, xi, 0).astype(int)
        yi = np.where(inb, yi, 0).astype(int)
        ref = D[yi, xi]
        with np.errstate(invalid="ignore", divide="ignore"):
            vis[:, j] = inb & (np.abs(d - ref) / np.where(inb, d, 1.0) < threshold)
    return [np.flatnonzero(v) for v in vis]


# -- world patch grid ---------------------------------------------------------------


def _plane_axes(normal, ref):
    """In-plane orthonormal axes, the first along ``ref`` projected onto the plane."""
    e1 = ref - (ref * normal).sum(-1, keepdims=True) * normal
    norm = np.linalg.norm(e1, axis=-1, keepdims=True)
    alt = np.cross(normal, np.array([0.0, 0.0, 1.0]))
    e1 = np.where(norm > 1e-8, e1 / np.where(norm > 1e-8, norm, 1.0), alt)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(normal, e1)
    return e1, e2


def _grid_points(center, e1, e2, spacing):
    o = PATCH_GRID
    return (center[:, None, :] + spacing[:, None, None]
            * (o[None, :, 0, None] * e1[:, None, :] + o[None, :, 1, None] * e2[:, None, :]))


def _mean_projected_spacing(state, grids, pair_lm, pair_img, n):
    uv, _ = project_world(state, pair_img[:, None], grids[pair_lm])
    g = uv.reshape(-1, 4, 4, 2)
    dx = np.linalg.norm(np.diff(g, axis=2), axis=-1).mean((1, 2))
    dy = np.linalg.norm(np.diff(g, axis=1), axis=-1).mean((1, 2))
    d = 0.5 * (dx + dy)
    good = np.isfinite(d)
    tot = np.bincount(pair_lm[good], weights=d[good], minlength=n)
    cnt = np.bincount(pair_lm[good], minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return tot / cnt


def world_patch_grids(state: ProblemState, views, landmarks=None, tol: float = SPACING_TOL):
    """World 4x4 grids whose mean projected spacing over ``views[k]`` is one pixel.

    Solves for the world spacing of every landmark at once by bisection in
    log-space to relative precision ``tol``. Returns ``(X (L, 16, 3),
    spacing (L,), e1, e2)``; landmarks without a usable view get NaN.
    """
    idx = np.arange(state.n_landmarks) if landmarks is None else np.asarray(landmarks)
    n = idx.size
    center = world_points(state, idx)
    normal = plane_normal_world(state, idx)
    # first axis follows the source camera's x axis
    e1, e2 = _plane_axes(normal, state.R[state.sources[idx], 0, :])
    pair_lm = np.repeat(np.arange(n), [len(views[k]) for k in idx])
    pair_img = np.concatenate([np.asarray(views[k], dtype=int) for k in idx]) if n else np.zeros(0, int)
    if np.any(np.bincount(pair_lm, minlength=n) == 0):
        raise PreprocessError("landmark without visible views")

    def f(s):
        return _mean_projected_spacing(state, _grid_points(center, e1, e2, s), pair_lm, pair_img, n)

    # unit-spacing estimate then a bracket [lo, hi] with f(lo) < 1 < f(hi)
    s0 = 1.0 / np.maximum(f(np.ones(n)), 1e-12)
    lo, hi = s0 / 2, s0 * 2
    for _ in range(60):
        flo, fhi = f(lo), f(hi)
        bad_lo = flo > 1
        bad_hi = fhi < 1
        if not (np.any(bad_lo) or np.any(bad_hi)):
            break
        lo = np.where(bad_lo, lo / 2, lo)
        hi = np.where(bad_hi, hi * 2, hi)
    while True:
        mid = np.sqrt(lo * hi)
        above = f(mid) > 1
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all((hi - lo) <= tol * hi) or not np.all(np.isfinite(hi)):
            break
    spacing = np.sqrt(lo * hi)
    return _grid_points(center, e1, e2, spacing), spacing, e1, e2


def world_patch_grid(k: int, state: ProblemState, views=None, tol: float = SPACING_TOL) -> WorldPatchGrid:
    """Single-landmark form of :func:`world_patch_grids`."""
    views = state.visibility(k) if views is None else np.asarray(views, dtype=int)
    if len(views) == 0:
        raise PreprocessError(f"landmark {k} has no visible view")
    table = {k: views}
    X, s, e1, e2 = world_patch_grids(state, table, np.array([k]), tol)
    return WorldPatchGrid(X[0].T, float(s[0]), X[0].mean(0), np.stack([e1[0], e2[0]]))


# -- robust patch mean -------------------------------------------------------------------


def _segment_sum(values, seg, n):
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, seg, values)
    return out


def robust_patch_means(patches, seg, n, tau: float = TAU, tol: float = IRLS_TOL,
                       max_iter: int = IRLS_MAX_ITER):
    """IRLS robust means of patch groups ``seg`` (``n`` groups), started at the plain mean."""
    patches = np.asarray(patches, dtype=float)
    cnt = np.bincount(seg, minlength=n).astype(float)
    mu = _segment_sum(patches, seg, n) / np.maximum(cnt, 1)[:, None]
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d = ((patches - mu[seg]) ** 2).sum(-1)
        _, w = geman_mcclure(d, tau)
        new = _segment_sum(patches * w[:, None], seg, n) / np.maximum(
            np.bincount(seg, weights=w, minlength=n), 1e-300)[:, None]
        step = np.linalg.norm(new - mu, axis=1)
        mu = np.where(active[:, None], new, mu)
        iters += active
        active &= step >= tol
        if not active.any():
            break
    return mu, iters


def robust_patch_mean(patches, tau: float = TAU, tol: float = IRLS_TOL,
                      max_iter: int = IRLS_MAX_ITER) -> np.ndarray:
    """Robust (Geman-McClure) mean of normalized patches by IRLS."""
    patches = np.atleast_2d(np.asarray(patches, dtype=float))
    mu, _ = robust_patch_means(patches, np.zeros(len(patches), dtype=int), 1, tau, tol, max_iter)
    return mu[0]


# -- source frame selection ----------------------------------------------------------------


@dataclass
class SourceSelection:
    source: np.ndarray  # chosen image per landmark, -1 when no usable view
    candidates: list
    distances: list = field(default_factory=list)


def select_source_frames(state: ProblemState, atlas: PyramidAtlas, candidates, tau: float = TAU,
                         eps_sigma: float = 1e-6) -> SourceSelection:
    """Pick per landmark the view whose patch is closest to the robust mean.

    Each candidate view is sampled on the projected world grid at level 0 and
    NCC-normalized; out-of-bounds or textureless views are ignored. Ties go
    to the lowest image index.
    """
    L = state.n_landmarks
    X, _, _, _ = world_patch_grids(state, candidates)
    pair_lm = np.repeat(np.arange(L), [len(c) for c in candidates])
    pair_img = np.concatenate([np.asarray(c, dtype=int) for c in candidates]) if L else np.zeros(0, int)
    uv, _ = project_world(state, pair_img[:, None], X[pair_lm])
    vals, _, _, ok, _ = atlas.sample(pair_img[:, None], 0, uv[..., 0], uv[..., 1])
    ok = ok.all(-1)
    patches, good = _ncc(vals, eps_sigma)
    ok &= good
    lm_ok, img_ok, p_ok = pair_lm[ok], pair_img[ok], patches[ok]
    mu, _ = robust_patch_means(p_ok, lm_ok, L, tau)
    dist = ((p_ok - mu[lm_ok]) ** 2).sum(-1)
    source = np.full(L, -1, dtype=int)
    best = np.full(L, np.inf)
    np.minimum.at(best, lm_ok, dist)
    # lowest image index among the (numerically) tied minima
    tied = dist <= best[lm_ok] + TIE_TOL
    pick = np.full(L, np.iinfo(np.int64).max)
    np.minimum.at(pick, lm_ok[tied], img_ok[tied])
    has = np.isfinite(best)
    source[has] = pick[has]
    dists = [dist[lm_ok == k] for k in range(L)] if L <= 64 else []
    return SourceSelection(source, [np.asarray(c) for c in candidates], dists)


def select_source_frame(k: int, state: ProblemState, atlas: PyramidAtlas, candidates=None,
                        tau: float = TAU) -> int:
    """Source frame for one landmark among ``candidates`` (default ``V_k`` plus its anchor view)."""
    if candidates is None:
        candidates = np.union1d(state.visibility(k), [state.sources[k]])
    sub = state.subset_landmarks([k])
    sel = select_source_frames(sub, atlas, [np.asarray(candidates, dtype=int)], tau)
    if sel.source[0] < 0:
        raise PreprocessError(f"landmark {k}: every view is out of bounds or textureless")
    return int(sel.source[0])


def reanchor(state: ProblemState, new_sources, candidates) -> ProblemState:
    """Move landmarks to new source frames, anchored at the rounded projection.

    The world plane is kept; visibility becomes the candidates minus the
    source.
    """
    X = world_points(state)
    normals = plane_normal_world(state)
    new_sources = np.asarray(new_sources, dtype=int)
    uv, _ = project_world(state, new_sources, X)
    anchors = np.rint(uv)
    Rs, ts = state.R[new_sources], state.t[new_sources]
    Xc = np.einsum("nij,nj->ni", Rs, X) + ts
    nc = np.einsum("nij,nj->ni", Rs, normals)
    d = (nc * Xc).sum(-1)
    planes = nc / d[:, None]
    vis = [np.setdiff1d(np.asarray(c, dtype=int), [s]) for c, s in zip(candidates, new_sources)]
    return state.with_landmarks(anchors, new_sources, planes, vis)


# -- texture culling ------------------------------------------------------------------------


def patch_sigma(patch) -> np.ndarray:
    """Centered l2 norm of raw patches (last axis)."""
    p = np.asarray(patch, dtype=float)
    c = p - p.mean(-1, keepdims=True)
    return np.sqrt((c * c).sum(-1))


@dataclass
class CullReport:
    sigma: np.ndarray
    textureless: np.ndarray
    out_of_bounds: np.ndarray
    threshold: float

    @property
    def n_culled(self) -> int:
        return int((self.textureless | self.out_of_bounds).sum())


def cull_textureless(state: ProblemState, atlas: PyramidAtlas, threshold: float = CULL_SIGMA):
    """Keep mask of landmarks whose level-0 source patch has ``sigma >= threshold``."""
    grid = patch_grid(state.anchors)
    src = np.repeat(state.sources[:, None], 16, 1)
    vals, _, _, ok, _ = atlas.sample(src, 0, grid[..., 0], grid[..., 1])
    oob = ~ok.all(-1)
    sigma = patch_sigma(vals)
    textureless = ~oob & (sigma < threshold)
    keep = ~(oob | textureless)
    return keep, CullReport(sigma, textureless, oob, threshold)


# -- driver -------------------------------------------------------------------------------------


@dataclass
class PreprocessConfig:
    visibility_threshold: float = VISIBILITY_THRESHOLD
    cull_sigma: float = CULL_SIGMA
    tau: float = TAU
    min_views: int = 2
    bbox: tuple | None = None  # ((xmin, ymin, zmin), (xmax, ymax, zmax)) object-of-interest filter


@dataclass
class PreprocessReport:
    n_input: int = 0
    n_outside_bbox: int = 0
    n_no_view: int = 0
    n_textureless: int = 0
    n_out_of_bounds: int = 0
    n_few_views: int = 0
    n_kept: int = 0
    n_source_changed: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def preprocess(state: ProblemState, atlas: PyramidAtlas, visibility=None, depth_maps=None,
               config: PreprocessConfig | None = None):
    """Visibility, source selection with re-anchoring, and culling.

    ``visibility`` (explicit view lists, per landmark) takes precedence over
    ``depth_maps``. Returns ``(state, kept_indices, report)``.
    """
    config = config or PreprocessConfig()
    report = PreprocessReport(n_input=state.n_landmarks)
    keep = np.arange(state.n_landmarks)
    if config.bbox is not None:
        X = world_points(state)
        lo, hi = (np.asarray(b, dtype=float) for b in config.bbox)
        inside = np.all((X >= lo) & (X <= hi), axis=1)
        report.n_outside_bbox = int((~inside).sum())
        state, keep = state.subset_landmarks(inside), keep[inside]
    if visibility is not None:
        vis = [np.asarray(visibility[k], dtype=int) for k in keep]
    elif depth_maps is not None:
        vis = compute_visibility(state, depth_maps, config.visibility_threshold)
    else:
        raise PreprocessError("visibility needs depth maps or explicit visibility lists")
    candidates = [np.union1d(v, [s]).astype(int) for v, s in zip(vis, state.sources)]
    sel = select_source_frames(state, atlas, candidates, config.tau)
    usable = sel.source >= 0
    report.n_no_view = int((~usable).sum())
    state = state.subset_landmarks(usable)
    keep = keep[usable]
    candidates = [c for c, u in zip(candidates, usable) if u]
    new_src = sel.source[usable]
    report.n_source_changed = int((new_src != state.sources).sum())
    state = reanchor(state, new_src, candidates)
    ok, cull = cull_textureless(state, atlas, config.cull_sigma)
    report.n_textureless = int(cull.textureless.sum())
    report.n_out_of_bounds = int(cull.out_of_bounds.sum())
    enough = np.diff(state.vis_ptr) >= config.min_views
    report.n_few_views = int((ok & ~enough).sum())
    final = ok & enough
    state = state.subset_landmarks(final)
    keep = keep[final]
    report.n_kept = state.n_landmarks
    logger.info("preprocess: %s", report.as_dict())
    return state, keep, report
