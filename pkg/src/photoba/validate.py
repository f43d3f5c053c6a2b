"""Finite-difference validation of residual Jacobians on random configurations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import finite_difference_check
from .imaging import GrayImage, PyramidAtlas, build_pyramid
from .photocost import CostConfig, PhotometricModel
from .scene import (
    FULL_WIDTH,
    PLANE,
    SRC_L,
    SRC_ROT,
    SRC_S,
    SRC_T,
    TGT_L,
    TGT_ROT,
    TGT_S,
    TGT_T,
    ParameterDelta,
    ProblemState,
    apply_update,
    patch_grid,
    warp_points,
)

COLUMN_GROUPS = {
    "src_rot": SRC_ROT, "src_t": SRC_T, "tgt_rot": TGT_ROT, "tgt_t": TGT_T,
    "src_s": SRC_S, "src_l": SRC_L, "tgt_s": TGT_S, "tgt_l": TGT_L, "plane": PLANE,
}


@dataclass
class JacobianCheck:
    n_configs: int
    max_rel_error: float
    per_group: dict
    n_flagged_columns: int
    engine: str
    errors: list = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol

    def as_dict(self) -> dict:
        return {"n_configs": self.n_configs, "max_rel_error": self.max_rel_error,
                "per_group": self.per_group, "n_flagged_columns": self.n_flagged_columns,
                "engine": self.engine}


def per_image_cameras(state: ProblemState) -> ProblemState:
    """Give every image its own intrinsics so source and target columns separate."""
    out = state.copy()
    out.s = state.s[state.camera_of_image].copy()
    out.l = state.l[state.camera_of_image].copy()
    out.camera_of_image = np.arange(state.n_images)
    return out


def block_delta(theta, state: ProblemState, k: int, j: int) -> ParameterDelta:
    """Map the 27 block parameters of landmark ``k`` seen in image ``j`` to a full update."""
    theta = np.asarray(theta, dtype=float)
    i = int(state.sources[k])
    ci, cj = state.camera_of_image[i], state.camera_of_image[j]
    dr = np.zeros((state.n_images, 3))
    dt = np.zeros((state.n_images, 3))
    ds = np.zeros((state.n_cameras, 4))
    dl = np.zeros((state.n_cameras, 2))
    dn = np.zeros((state.n_landmarks, 3))
    dr[i] += theta[SRC_ROT]
    dt[i] += theta[SRC_T]
    dr[j] += theta[TGT_ROT]
    dt[j] += theta[TGT_T]
    ds[ci] += theta[SRC_S]
    dl[ci] += theta[SRC_L]
    ds[cj] += theta[TGT_S]
    dl[cj] += theta[TGT_L]
    dn[k] += theta[PLANE]
    return ParameterDelta(dr, dt, ds, dl, dn)


def block_scales(state: ProblemState, k: int, j: int) -> np.ndarray:
    """Magnitude of each block parameter, ``max(1, |p|)``, for relative FD steps.

    A fixed absolute step on a focal length of ~500 px perturbs it by a few
    parts in 1e9 and drowns the difference quotient in round-off.
    """
    sc = np.ones(FULL_WIDTH)
    ci = state.camera_of_image[int(state.sources[k])]
    cj = state.camera_of_image[j]
    sc[SRC_S] = np.maximum(1.0, np.abs(state.s[ci]))
    sc[TGT_S] = np.maximum(1.0, np.abs(state.s[cj]))
    return sc


def random_configuration(state: ProblemState, rng, rot_deg=1.0, trans=0.02, focal=0.03,
                         dist=(0.1, 0.02), depth=0.05) -> ProblemState:
    """Perturb every pose, intrinsic and plane of ``state``."""
    P, C, L = state.n_images, state.n_cameras, state.n_landmarks
    dr = np.deg2rad(rot_deg) * rng.uniform(-1, 1, (P, 3))
    dt = trans * rng.uniform(-1, 1, (P, 3))
    ds = np.zeros((C, 4))
    ds[:, :2] = focal * state.s[:, :2] * rng.uniform(-1, 1, (C, 2))
    ds[:, 2:] = rng.uniform(-2, 2, (C, 2))
    dl = np.stack([rng.uniform(-dist[0], dist[0], C), rng.uniform(-dist[1], dist[1], C)], 1) - state.l
    dn = state.planes * rng.uniform(-depth, depth, (L, 1))
    return apply_update(state, ParameterDelta(dr, dt, ds, dl, dn))


def check_scene(seed: int = 0):
    """Small rendered scene (4 views) and its atlas for derivative checks."""
    from .synthetic import SceneSpec, generate_synthetic_scene

    sc = generate_synthetic_scene(seed, SceneSpec(n_images=4, n_landmarks=150, arc_degrees=20.0))
    atlas = PyramidAtlas([build_pyramid(GrayImage(im)) for im in sc.images])
    return per_image_cameras(sc.truth), atlas


def lattice_clearance(state: ProblemState, k: int, j: int, level: int, steps) -> float:
    """Distance of the block's samples to the nearest lattice line, in units of
    the largest sample motion one FD step can cause (``inf`` if nothing moves)."""
    grid = patch_grid(state.anchors[[k]], 1.0)
    u, v, _ = warp_points(state, np.array([k]), np.array([j]), grid, seeds="full")
    scale = 2.0**level
    move = 0.0
    dist = np.inf
    for c in (u, v):
        x = (c.val + 0.5) / scale - 0.5
        dist = min(dist, float(np.abs(x - np.round(x)).min()))
        move = max(move, float((np.abs(c.der[0]) * steps).max()) / scale)
    return dist / move if move > 0 else np.inf


def check_jacobians(n_configs: int = 200, seed: int = 0, step: float = 1e-6,
                    engine: str = "dual", scene=None, max_tries: int = 50,
                    margin: float = 10.0, rel_floor: float = 1e-4) -> JacobianCheck:
    """Compare residual Jacobians with central differences on random configurations.

    Each configuration perturbs all parameters, picks a random valid block and
    checks all 27 columns. ``step`` is relative: intrinsics columns use
    ``step * |s|`` (see :func:`block_scales`). Configurations whose samples
    lie within ``margin`` FD motions of a bilinear lattice line are redrawn;
    ``rel_floor`` is passed to :func:`finite_difference_check`. Columns whose stencil crosses a bilinear lattice line
    are flagged and skipped (they have no two-sided derivative).
    """
    rng = np.random.default_rng(seed)
    base, atlas = scene or check_scene(seed)
    model = PhotometricModel(atlas, CostConfig(center_shift=0.5))
    lm_all, tgt_all = base.block_arrays()
    worst = 0.0
    per_group = {g: 0.0 for g in COLUMN_GROUPS}
    flagged = 0
    errors = []
    done = 0
    while done < n_configs:
        for _ in range(max_tries):
            st = random_configuration(base, rng)
            b = rng.integers(lm_all.size)
            k, j = int(lm_all[b]), int(tgt_all[b])
            model.prepare(st, 0)
            E, ok, level = model.residuals(st, np.array([k]), np.array([j]), seeds="full",
                                           engine=engine)
            h = step * block_scales(st, k, j)
            if ok[0] and lattice_clearance(st, k, j, int(level[0]), h) > margin:
                break
        else:
            raise RuntimeError("could not find a valid block configuration")

        def fn(theta, st=st, k=k, j=j):
            moved = apply_update(st, block_delta(theta, st, k, j))
            val, _, _ = model.residuals(moved, np.array([k]), np.array([j]), seeds="none")
            return val[0]

        rep = finite_difference_check(fn, np.zeros(FULL_WIDTH), step=h, jacobian=E.der[0],
                                      rel_floor=rel_floor)
        flagged += len(rep.flagged)
        errors.append(rep.max_rel_error)
        worst = max(worst, rep.max_rel_error)
        for g, sl in COLUMN_GROUPS.items():
            per_group[g] = max(per_group[g], float(rep.column_errors[sl].max()))
        done += 1
    return JacobianCheck(n_configs, worst, per_group, flagged, engine, errors)
