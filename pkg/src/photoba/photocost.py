"""Photometric objective: NCC patch residuals, robust kernels and the total cost."""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Dual, mark_one_sided
from .imaging import PyramidAtlas, mean_grid_spacing
from .scene import ProblemState, linearize_warp, patch_grid, warp_points

TAU = 0.5
EPS_SIGMA = 1e-6
HUBER_THRESHOLD = 40.0**2
REGULARIZER_WEIGHT = 1e5
N_SAMPLES = 16


class TexturelessPatch(ValueError):
    pass


def geman_mcclure(s, tau: float = TAU):
    """Geman-McClure kernel on a squared norm: ``(rho(s), rho'(s))``."""
    t2 = tau * tau
    s = np.asarray(s, dtype=float)
    d = s + t2
    return s / d, t2 / (d * d)


def huber(s, threshold: float = HUBER_THRESHOLD):
    """Huber kernel on a squared norm with transition at ``s = threshold``."""
    s = np.asarray(s, dtype=float)
    inlier = s <= threshold
    root = np.sqrt(np.maximum(s, threshold) * threshold)
    rho = np.where(inlier, s, 2.0 * root - threshold)
    drho = np.where(inlier, 1.0, threshold / root)
    return rho, drho


def ncc_normalize(patch, eps_sigma: float = EPS_SIGMA) -> np.ndarray:
    """Zero-mean, unit-norm version of a patch (over the last axis)."""
    p = np.asarray(patch, dtype=float)
    c = p - p.mean(axis=-1, keepdims=True)
    sigma = np.sqrt((c * c).sum(axis=-1, keepdims=True))
    if np.any(sigma <= eps_sigma):
        raise TexturelessPatch(f"patch is textureless (sigma <= {eps_sigma})")
    return c / sigma


def _ncc(values, eps_sigma):
    """Batched NCC over the last axis; returns ``(psi, ok)``. Works on duals."""
    if isinstance(values, Dual):
        c = values - values.mean(-1).expand()
        ss = (c * c).sum(-1)
        ok = ss.val > eps_sigma * eps_sigma
        if not np.all(ok):
            ss = Dual(np.where(ok, ss.val, 1.0), np.where(ok[..., None], ss.der, 0.0))
        return c / ss.sqrt().expand(), ok
    c = values - values.mean(-1, keepdims=True)
    sig = np.sqrt((c * c).sum(-1))
    ok = sig > eps_sigma
    return c / np.where(ok, sig, 1.0)[..., None], ok


@dataclass
class CostConfig:
    mode: str = "ncc"  # or "ssd"
    tau: float = TAU
    eps_sigma: float = EPS_SIGMA
    huber_threshold: float = HUBER_THRESHOLD
    fixed_scale: bool = False
    regularizer_weight: float = REGULARIZER_WEIGHT
    # principal-point target is W/2 - center_shift (0.5 under pixel-center coordinates)
    center_shift: float = 0.0
    chunk_landmarks: int = 256
    threads: int = 1

    def robustify(self, s):
        if self.mode == "ssd":
            return huber(s, self.huber_threshold)
        return geman_mcclure(s, self.tau)


@dataclass
class ResidualBlock:
    landmark: int
    target: int
    residual: np.ndarray
    weight: float
    valid: bool
    level: int = 0


@dataclass
class CostBreakdown:
    total: float
    regularizer: float
    photometric: float
    n_valid: int
    n_invalid: int


def intrinsics_regularizer(
    state: ProblemState, weight: float = REGULARIZER_WEIGHT, center_shift: float = 0.0
):
    """Residuals ``(3C,)`` keeping pixels square and the principal point centered.

    Returns ``(E_reg, J_reg)`` where ``J_reg`` spans the full camera parameter
    vector (only the ``s`` columns are non-zero).
    """
    C = state.n_cameras
    sizes = state.camera_sizes().astype(float)
    s = state.s
    denom = s[:, 0] + s[:, 1]
    if np.any(denom == 0):
        raise ValueError("invalid intrinsics: s1 + s2 == 0")
    W, H = sizes[:, 0], sizes[:, 1]
    m = np.maximum(W, H)
    E = np.empty((C, 3))
    E[:, 0] = (s[:, 0] - s[:, 1]) / denom
    E[:, 1] = (s[:, 2] - (W / 2 - center_shift)) / m
    E[:, 2] = (s[:, 3] - (H / 2 - center_shift)) / m
    J = np.zeros((3 * C, state.n_camera_params))
    base = 6 * state.n_images
    for c in range(C):
        col = base + 6 * c
        J[3 * c, col] = 2 * s[c, 1] / denom[c] ** 2
        J[3 * c, col + 1] = -2 * s[c, 0] / denom[c] ** 2
        J[3 * c + 1, col + 2] = 1 / m[c]
        J[3 * c + 2, col + 3] = 1 / m[c]
    return weight * E.ravel(), weight * J


class PhotometricModel:
    """Evaluates patch residuals for one resolution stage.

    ``source_level`` fixes the source pyramid level (grid spacing ``2**level``
    level-0 pixels); the source patches are sampled once and cached, since
    anchors and source frames do not move.
    """

    def __init__(self, atlas: PyramidAtlas, config: CostConfig | None = None):
        self.atlas = atlas
        self.config = config or CostConfig()
        self.source_level = None
        self._src = None
        self._src_ok = None

    # stage setup ---------------------------------------------------------
    def prepare(self, state: ProblemState, source_level: int = 0) -> "PhotometricModel":
        self.source_level = int(source_level)
        spacing = 2.0**self.source_level
        grid = patch_grid(state.anchors, spacing)
        src = np.repeat(state.sources[:, None], N_SAMPLES, 1)
        vals, _, _, ok, _ = self.atlas.sample(src, self.source_level, grid[..., 0], grid[..., 1])
        ok = ok.all(-1)
        if self.config.mode == "ncc":
            patch, good = _ncc(vals, self.config.eps_sigma)
            ok &= good
        else:
            patch = vals
        self._src = patch
        self._src_ok = ok
        self._n_landmarks = state.n_landmarks
        return self

    def _ensure(self, state):
        if self._src is None or self._n_landmarks != state.n_landmarks:
            self.prepare(state, self.source_level or 0)

    @property
    def grid_spacing(self) -> float:
        return 2.0 ** (self.source_level or 0)

    # evaluation -------------------------------------------------------------
    def residuals(self, state, lm, tgt, seeds="none", inv_table=None, engine="staged"):
        """Residuals of the blocks ``(lm[b], tgt[b])``.

        ``seeds`` is ``"none"``, ``"plane"`` (3 derivative columns) or
        ``"full"`` (27). ``engine="staged"`` chains per-stage Jacobians of the
        warp; ``engine="dual"`` pushes full-width duals through every
        operation (slower, kept as a reference). Returns ``(E, ok, level)``;
        ``E`` is ``(B, 16)``, a dual when seeded.
        """
        self._ensure(state)
        cfg = self.config
        lm = np.asarray(lm)
        tgt = np.asarray(tgt)
        grid = patch_grid(state.anchors[lm], self.grid_spacing)
        lin = None
        if seeds != "none" and engine == "staged":
            lin = linearize_warp(state, lm, tgt, grid, inv_table=inv_table)
            u, v, ok = lin.u, lin.v, lin.ok
        else:
            u, v, ok = warp_points(state, lm, tgt, grid, seeds=seeds, inv_table=inv_table)
        uv = np.stack([_value(u), _value(v)], -1)
        if cfg.fixed_scale:
            level = np.full(lm.shape, self.source_level, dtype=int)
        else:
            d = mean_grid_spacing(uv)
            with np.errstate(divide="ignore", invalid="ignore"):
                lv = np.round(np.log2(np.where(d > 0, d, 1.0)))
            level = np.clip(np.nan_to_num(lv), 0, self.atlas.max_level[tgt]).astype(int)
        if lin is not None:
            val, gx, gy, inb, lattice = self.atlas.sample(tgt[:, None], level[:, None], u, v)
            if np.any(lattice):
                mark_one_sided()
            vals = Dual(val, lin.pullback(gx, gy, seeds))
        else:
            vals, inb = self.atlas.sample_dual(tgt[:, None], level[:, None], u, v)
        ok = ok & inb.all(-1) & self._src_ok[lm]
        if cfg.mode == "ncc":
            psi, good = _ncc(vals, cfg.eps_sigma)
            ok &= good
            E = psi - self._src[lm]
        else:
            E = vals - self._src[lm]
        return E, ok, level

    def block_costs(self, state, lm, tgt, inv_table=None):
        """Robust cost, weight and validity per block (values only)."""
        E, ok, _ = self.residuals(state, lm, tgt, inv_table=inv_table)
        sq = (E * E).sum(-1)
        rho, drho = self.config.robustify(sq)
        return np.where(ok, rho, 0.0), drho, ok

    def chunks(self, state, landmarks=None):
        """Yield ``(lm, tgt)`` block arrays in landmark chunks."""
        n = self.config.chunk_landmarks
        if landmarks is None:
            for a in range(0, state.n_landmarks, n):
                b = min(a + n, state.n_landmarks)
                lo, hi = state.vis_ptr[a], state.vis_ptr[b]
                lm = np.repeat(np.arange(a, b), np.diff(state.vis_ptr[a : b + 1]))
                yield lm, state.vis_idx[lo:hi]
        else:
            landmarks = np.asarray(landmarks)
            counts = np.diff(state.vis_ptr)
            for a in range(0, landmarks.size, n):
                ks = landmarks[a : a + n]
                lm = np.repeat(ks, counts[ks])
                tgt = np.concatenate([state.visibility(k) for k in ks]) if ks.size else np.zeros(0, int)
                yield lm, tgt

    def map_chunks(self, fn, state, landmarks=None):
        """Yield ``fn(lm, tgt)`` for every chunk, in order (optionally threaded).

        Results are produced lazily and at most ``2 * threads`` chunks are in
        flight, so callers that reduce as they go never hold more than that.
        """
        items = self.chunks(state, landmarks)
        n = self.config.threads
        if n <= 1:
            for lm, tgt in items:
                yield fn(lm, tgt)
            return
        with ThreadPoolExecutor(n) as pool:
            pending = deque()
            for lm, tgt in items:
                pending.append(pool.submit(fn, lm, tgt))
                if len(pending) >= 2 * n:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

    def landmark_costs(self, state, landmarks=None, inv_table=None):
        """Per-landmark robust cost and valid-block count, length ``L``."""
        inv_table = inv_table or state.inverse_distortion_table()
        cost = np.zeros(state.n_landmarks)
        count = np.zeros(state.n_landmarks, dtype=int)

        def run(lm, tgt):
            rho, _, ok = self.block_costs(state, lm, tgt, inv_table)
            return lm, rho, ok

        for lm, rho, ok in self.map_chunks(run, state, landmarks):
            np.add.at(cost, lm, rho)
            np.add.at(count, lm, ok.astype(int))
        return cost, count

    def cost(self, state) -> CostBreakdown:
        cost, count = self.landmark_costs(state)
        E_reg, _ = intrinsics_regularizer(state, self.config.regularizer_weight,
                                          self.config.center_shift)
        reg = float(E_reg @ E_reg)
        photo = float(cost.sum())
        n_valid = int(count.sum())
        return CostBreakdown(reg + photo, reg, photo, n_valid, state.n_blocks - n_valid)


def _value(x):
    return x.val if isinstance(x, Dual) else x


def patch_residual(k: int, j: int, state: ProblemState, atlas: PyramidAtlas,
                   config: CostConfig | None = None, source_level: int = 0) -> ResidualBlock:
    """Residual of landmark ``k`` seen in image ``j``."""
    model = PhotometricModel(atlas, config).prepare(state, source_level)
    E, ok, level = model.residuals(state, np.array([k]), np.array([j]))
    sq = float((E[0] ** 2).sum())
    _, w = model.config.robustify(sq)
    return ResidualBlock(k, j, E[0], float(w), bool(ok[0]), int(level[0]))


def total_cost(state: ProblemState, atlas: PyramidAtlas, config: CostConfig | None = None,
               source_level: int = 0) -> float:
    return PhotometricModel(atlas, config).prepare(state, source_level).cost(state).total
