"""Low-memory Variable Projection optimiser.

Structure is eliminated landmark by landmark: each chunk of landmarks builds
its weighted residual/Jacobian stacks, folds them into the reduced camera
system (RCS) through the per-landmark projector ``I - Jp Jp^+`` and drops
them. Cameras are then solved with Levenberg damping and every landmark
plane is refined by embedded Gauss-Newton point iterations (EPIs).
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .photocost import CostBreakdown, PhotometricModel, intrinsics_regularizer
from .scene import CAMERA_WIDTH, PLANE, ParameterDelta, ProblemState, apply_update

logger = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-6
LAMBDA_CEIL = 1e20  # camera steps are numerically zero beyond this: treat as converged
OMEGA_RESET = 10.0
PINV_COND = 1e12


class OptimizationError(RuntimeError):
    pass


class NumericalError(OptimizationError):
    pass


@dataclass
class SolverConfig:
    iterations: int = 10
    initial_lambda: float | None = None  # None: number of landmarks
    solver: str = "varpro"  # or "alternate"
    weighting: str = "rho_prime"  # or "sqrt" (IRLS-standard)
    freeze: frozenset = frozenset()  # subset of {"poses", "intrinsics", "structure"}
    epi_max_iter: int = 10
    epi_rel_tol: float = 1e-9
    max_retries: int = 25


@dataclass
class ReducedCameraSystem:
    H: np.ndarray
    g: np.ndarray
    n_landmarks: int = 0
    n_valid_blocks: int = 0
    n_invalid_blocks: int = 0


@dataclass
class DampingState:
    """Levenberg damping schedule: divide by 10 on success, grow geometrically on failure."""

    lam: float
    omega: float = OMEGA_RESET

    def accept(self) -> None:
        self.lam /= 10.0
        self.omega = OMEGA_RESET

    def reject(self) -> None:
        self.lam = max(self.lam * self.omega, LAMBDA_FLOOR)
        self.omega *= 2.0


@dataclass
class IterationRecord:
    iteration: int
    stage: str
    lam: float
    cost: float
    accepted: bool
    invalid_blocks: int
    wall_time: float

    FIELDS = ("iteration", "stage", "lambda", "cost", "accepted", "invalid_blocks", "wall_time")

    def row(self) -> list:
        return [self.iteration, self.stage, f"{self.lam:.6g}", f"{self.cost:.12g}",
                int(self.accepted), self.invalid_blocks, f"{self.wall_time:.3f}"]


@dataclass
class OptimizeResult:
    state: ProblemState
    log: list = field(default_factory=list)
    initial_cost: float = float("nan")
    final_cost: float = float("nan")


class JacobianMemory:
    """Counts bytes of per-landmark Jacobian stacks alive at any moment."""

    def __init__(self):
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0
        self.allocations = 0
        self.largest = 0

    def acquire(self, nbytes: int) -> None:
        with self._lock:
            self.live += nbytes
            self.allocations += 1
            self.largest = max(self.largest, nbytes)
            self.peak = max(self.peak, self.live)

    def release(self, nbytes: int) -> None:
        with self._lock:
            self.live -= nbytes


# -- helpers ---------------------------------------------------------------------


def camera_columns(state: ProblemState, lm: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Global camera-parameter indices of the 24 local block columns, ``(B, 24)``."""
    src = state.sources[lm]
    base = 6 * state.n_images
    cs = state.camera_of_image[src]
    ct = state.camera_of_image[tgt]
    r6 = np.arange(6)
    return np.concatenate(
        [6 * src[:, None] + r6, 6 * tgt[:, None] + r6,
         base + 6 * cs[:, None] + r6, base + 6 * ct[:, None] + r6],
        axis=1,
    )


def active_columns(state: ProblemState, freeze) -> np.ndarray:
    mask = np.ones(state.n_camera_params, dtype=bool)
    if "poses" in freeze:
        mask[: 6 * state.n_images] = False
    if "intrinsics" in freeze:
        mask[6 * state.n_images :] = False
    return mask


def truncated_pinv_sym(M: np.ndarray, cond: float = PINV_COND):
    """Pseudo-inverse of stacked symmetric PSD 3x3 matrices and its square root factor.

    Eigenvalues below ``max_eig / cond`` are dropped. Returns ``(Minv, S)`` with
    ``Minv = S S^T``.
    """
    e, V = np.linalg.eigh(M)
    top = e.max(axis=-1, keepdims=True)
    keep = (e > top / cond) & (e > 0)
    inv = np.where(keep, 1.0 / np.where(keep, e, 1.0), 0.0)
    Minv = np.einsum("...ij,...j,...kj->...ik", V, inv, V)
    S = V * np.sqrt(inv)[..., None, :]
    return Minv, S


def _weights(drho, ok, weighting):
    w = np.sqrt(drho) if weighting == "sqrt" else drho
    return np.where(ok, w, 0.0)


def _landmark_valid_counts(lm, ok, n):
    return np.bincount(lm, weights=ok.astype(float), minlength=n)


# -- reduced camera system -------------------------------------------------------------


def accumulate_rcs(
    state: ProblemState,
    model: PhotometricModel,
    config: SolverConfig | None = None,
    use_projector: bool = True,
    memory: JacobianMemory | None = None,
    inv_table=None,
) -> ReducedCameraSystem:
    """Stream all landmarks into ``H_rcs`` and ``g_rcs``.

    With ``use_projector=False`` the structure coupling is ignored and the
    plain camera normal equations are returned (alternation).
    """
    config = config or SolverConfig()
    D = state.n_camera_params
    inv_table = inv_table or state.inverse_distortion_table()
    robustify = model.config.robustify

    def chunk(lm, tgt):
        H = np.zeros(D * D)
        g = np.zeros(D)
        if lm.size == 0:
            return H, g, 0, 0, 0
        E, ok, _ = model.residuals(state, lm, tgt, seeds="full", inv_table=inv_table)
        J = E.der
        nbytes = J.nbytes
        if memory is not None:
            memory.acquire(nbytes)
        try:
            Ev = E.val
            sq = (Ev * Ev).sum(-1)
            _, drho = robustify(sq)
            uniq, loc = np.unique(lm, return_inverse=True)
            counts = _landmark_valid_counts(loc, ok, uniq.size)
            live = ok & (counts[loc] >= 2)
            w = _weights(drho, live, config.weighting)
            Jw = J * w[:, None, None]
            Ew = Ev * w[:, None]
            Jc = Jw[..., :CAMERA_WIDTH]
            Jp = Jw[..., PLANE]
            gidx = camera_columns(state, lm, tgt)
            JtJ = np.einsum("bri,brj->bij", Jc, Jc)
            gc = np.einsum("bri,br->bi", Jc, Ew)
            flat = (gidx[:, :, None] * D + gidx[:, None, :]).ravel()
            H += np.bincount(flat, weights=JtJ.ravel(), minlength=D * D)
            g += np.bincount(gidx.ravel(), weights=gc.ravel(), minlength=D)
            if use_projector:
                A = np.einsum("bri,brj->bij", Jc, Jp)
                Mb = np.einsum("bri,brj->bij", Jp, Jp)
                hb = np.einsum("bri,br->bi", Jp, Ew)
                nL = uniq.size
                M = np.zeros((nL, 3, 3))
                np.add.at(M, loc, Mb)
                hp = np.zeros((nL, 3))
                np.add.at(hp, loc, hb)
                Minv, S = truncated_pinv_sym(M)
                At = np.zeros((nL, D, 3))
                np.add.at(At, (np.repeat(loc, CAMERA_WIDTH), gidx.ravel()),
                          A.reshape(-1, 3))
                Bm = np.einsum("kdi,kij->dkj", At, S).reshape(D, 3 * nL)
                H -= (Bm @ Bm.T).ravel()
                g -= np.einsum("kdi,ki->d", At, np.einsum("kij,kj->ki", Minv, hp))
            n_used = int((counts >= 2).sum())
            return H, g, n_used, int(ok.sum()), int((~ok).sum())
        finally:
            if memory is not None:
                memory.release(nbytes)
            del J, E

    H = np.zeros(D * D)
    g = np.zeros(D)
    n_lm = n_ok = n_bad = 0
    for h, gg, a, b, c in model.map_chunks(chunk, state):
        H += h
        g += gg
        n_lm += a
        n_ok += b
        n_bad += c
    H = H.reshape(D, D)
    H = 0.5 * (H + H.T)
    return ReducedCameraSystem(H, g, n_lm, n_ok, n_bad)


def solve_camera_update(
    rcs: ReducedCameraSystem,
    E_reg: np.ndarray | None,
    J_reg: np.ndarray | None,
    lam: float,
    active: np.ndarray | None = None,
) -> np.ndarray:
    """Damped camera step ``-(H + Jr^T Jr + lam I)^-1 (g + Jr^T Er)``.

    Columns outside ``active`` are held fixed (their step is exactly zero).
    """
    H = rcs.H.copy()
    g = rcs.g.copy()
    if J_reg is not None and J_reg.size:
        H += J_reg.T @ J_reg
        g += J_reg.T @ E_reg
    D = g.size
    active = np.ones(D, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    step = np.zeros(D)
    if not active.any():
        return step
    Ha = H[np.ix_(active, active)] + lam * np.eye(int(active.sum()))
    try:
        factor = scipy.linalg.cho_factor(Ha)
        step[active] = -scipy.linalg.cho_solve(factor, g[active])
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalError(
            f"camera system factorisation failed at lambda={lam:.3g}; increase damping"
        ) from exc
    return step


def alternation_update(state, model, lam, config=None) -> ParameterDelta:
    """Camera step from the structure-fixed normal equations (no projector)."""
    config = config or SolverConfig(solver="alternate")
    rcs = accumulate_rcs(state, model, config, use_projector=False)
    E_reg, J_reg = intrinsics_regularizer(state, model.config.regularizer_weight,
                                          model.config.center_shift)
    step = solve_camera_update(rcs, E_reg, J_reg, lam, active_columns(state, config.freeze))
    return ParameterDelta.from_camera_vector(step, state.n_images, state.n_cameras)


# -- embedded point iterations ---------------------------------------------------------------


def _plane_steps(state, model, landmarks, config, inv_table):
    """Gauss-Newton plane steps ``-Jp^+ E`` for ``landmarks``."""
    steps = np.zeros((state.n_landmarks, 3))
    robustify = model.config.robustify

    def run(lm, tgt):
        E, ok, _ = model.residuals(state, lm, tgt, seeds="plane", inv_table=inv_table)
        sq = (E.val**2).sum(-1)
        _, drho = robustify(sq)
        w = _weights(drho, ok, config.weighting)
        Jp = E.der * w[:, None, None]
        Ew = E.val * w[:, None]
        return lm, np.einsum("bri,brj->bij", Jp, Jp), np.einsum("bri,br->bi", Jp, Ew)

    M = np.zeros((state.n_landmarks, 3, 3))
    h = np.zeros((state.n_landmarks, 3))
    for lm, Mb, hb in model.map_chunks(run, state, landmarks):
        np.add.at(M, lm, Mb)
        np.add.at(h, lm, hb)
    Minv, _ = truncated_pinv_sym(M[landmarks])
    steps[landmarks] = -np.einsum("kij,kj->ki", Minv, h[landmarks])
    return steps


def embedded_point_iterations(
    state: ProblemState,
    model: PhotometricModel,
    config: SolverConfig | None = None,
    landmarks=None,
    inv_table=None,
) -> tuple[ProblemState, dict]:
    """Refine planes of all (or the given) landmarks while their local cost drops.

    A landmark's step is kept only if its robust cost over its visible views
    decreases without losing valid blocks; it stops on rejection, on a
    relative decrease below ``epi_rel_tol`` or after ``epi_max_iter`` steps.
    """
    config = config or SolverConfig()
    inv_table = inv_table or state.inverse_distortion_table()
    cur_cost, cur_count = model.landmark_costs(state, landmarks, inv_table)
    candidates = np.arange(state.n_landmarks) if landmarks is None else np.asarray(landmarks)
    active = candidates[cur_count[candidates] >= 2]
    planes = state.planes.copy()
    frozen = candidates.size - active.size
    steps_taken = 0
    for _ in range(config.epi_max_iter):
        if active.size == 0:
            break
        trial = replace(state, planes=planes)
        steps = _plane_steps(trial, model, active, config, inv_table)
        prop_planes = planes.copy()
        prop_planes[active] += steps[active]
        proposal = replace(state, planes=prop_planes)
        new_cost, new_count = model.landmark_costs(proposal, active, inv_table)
        nc, cc = new_cost[active], cur_cost[active]
        accept = (nc < cc) & (new_count[active] >= cur_count[active]) & np.isfinite(nc)
        acc = active[accept]
        planes[acc] = prop_planes[acc]
        steps_taken += acc.size
        rel = (cc[accept] - nc[accept]) / np.maximum(cc[accept], 1e-300)
        cur_cost[acc] = new_cost[acc]
        active = acc[rel >= config.epi_rel_tol]
    out = replace(state, planes=planes)
    return out, {"frozen": int(frozen), "steps": int(steps_taken)}


def epi_update(k: int, state: ProblemState, model: PhotometricModel,
               config: SolverConfig | None = None) -> np.ndarray:
    """Refined plane of landmark ``k`` (single-landmark form of the EPIs)."""
    new, _ = embedded_point_iterations(state, model, config, landmarks=np.array([k]))
    return new.planes[k]


# -- Algorithm driver ------------------------------------------------------------------------


def optimize(
    state: ProblemState,
    model: PhotometricModel,
    config: SolverConfig | None = None,
    stage: str = "joint",
    memory: JacobianMemory | None = None,
    on_record=None,
) -> OptimizeResult:
    """Run the damped VarPro schedule on one resolution stage.

    Each outer iteration accumulates the RCS once; rejected steps are retried
    from the same RCS with more damping, re-running the EPIs after every
    camera update. A rejection leaves the state exactly as it was.
    """
    config = config or SolverConfig()
    t0 = time.perf_counter()
    mask = active_columns(state, config.freeze)
    cams = bool(mask.any())
    structure = "structure" not in config.freeze
    use_projector = config.solver == "varpro" and structure
    lam0 = config.initial_lambda if config.initial_lambda is not None else float(state.n_landmarks)
    damping = DampingState(lam0)
    cost = model.cost(state)
    if not np.isfinite(cost.total):
        raise OptimizationError(f"non-finite initial cost in stage {stage}")
    result = OptimizeResult(state, initial_cost=cost.total)
    best = cost.total

    def record(it, c, accepted):
        rec = IterationRecord(it, stage, damping.lam, c.total, accepted, c.n_invalid,
                              time.perf_counter() - t0)
        result.log.append(rec)
        if on_record is not None:
            on_record(rec)
        logger.info("%s it=%d lambda=%.3g cost=%.8g accepted=%s invalid=%d", stage, it,
                    rec.lam, rec.cost, accepted, rec.invalid_blocks)

    record(0, cost, True)
    for it in range(1, config.iterations + 1):
        inv_table = state.inverse_distortion_table()
        rcs = None
        if cams:
            rcs = accumulate_rcs(state, model, config, use_projector, memory, inv_table)
            E_reg, J_reg = intrinsics_regularizer(state, model.config.regularizer_weight,
                                                  model.config.center_shift)
        accepted = False
        for _retry in range(config.max_retries + 1):
            cand = state
            if cams:
                try:
                    step = solve_camera_update(rcs, E_reg, J_reg, damping.lam, mask)
                except NumericalError:
                    # round-off made the damped system indefinite: treat as a rejection
                    damping.reject()
                    record(it, CostBreakdown(np.inf, np.nan, np.nan, 0, 0), False)
                    if damping.lam > LAMBDA_CEIL:
                        break
                    continue
                cand = apply_update(
                    state, ParameterDelta.from_camera_vector(step, state.n_images, state.n_cameras)
                )
            if structure:
                cand, _ = embedded_point_iterations(cand, model, config)
            c = model.cost(cand)
            if not np.isfinite(c.total):
                raise OptimizationError(
                    f"non-finite cost in stage {stage}, iteration {it} (lambda={damping.lam:.3g})"
                )
            if c.total < best:
                state = cand
                best = c.total
                damping.accept()
                record(it, c, True)
                accepted = True
                break
            damping.reject()
            record(it, c, False)
            if not cams or damping.lam > LAMBDA_CEIL:
                # nothing (left) depends on lambda: a retry would replay the same step
                break
        if not accepted and (not cams or damping.lam > LAMBDA_CEIL):
            break
    result.state = state
    result.final_cost = best
    return result


def write_log_csv(records, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IterationRecord.FIELDS)
        for r in records:
            w.writerow(r.row())
