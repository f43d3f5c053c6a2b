"""Independent reference implementations used by the solver and acceptance tests."""

import numpy as np
from scipy.optimize import brentq

from photoba.photocost import intrinsics_regularizer
from photoba.synthetic import SceneSpec, generate_synthetic_scene

from conftest import atlas_of, initial_state

TINY = SceneSpec(n_images=3, width=160, height=120, focal=130.0, n_landmarks=20, arc_degrees=20.0)


def tiny_instance(seed):
    """Perturbed 3-image, 20-landmark problem with its image atlas."""
    sc = generate_synthetic_scene(seed, TINY)
    return initial_state(sc), atlas_of(sc.images)


def newton_oracle(l, xd):
    """Undistort by 1-D root finding on the radial forward model (to ~1e-15)."""
    rd = float(np.hypot(*xd))
    if rd == 0:
        return np.zeros(2)
    f = lambda ru: ru * (1 + l[0] * ru**2 + l[1] * ru**4) - rd
    grid = np.linspace(0, 3 * rd + 0.1, 301)
    hi = grid[np.argmax(f(grid) > 0)]  # first sign change brackets the monotone branch
    ru = brentq(f, 0.0, hi, xtol=1e-15, rtol=1e-15)
    return np.asarray(xd) * ru / rd


def global_columns(state, k, j):
    """Dense column of each of the 24 camera-block parameters, written out longhand."""
    P = state.n_images
    i = int(state.sources[k])
    ci, cj = int(state.camera_of_image[i]), int(state.camera_of_image[j])
    cols = []
    cols += [6 * i + a for a in range(3)]  # source rotation
    cols += [6 * i + 3 + a for a in range(3)]  # source translation
    cols += [6 * j + a for a in range(3)]
    cols += [6 * j + 3 + a for a in range(3)]
    cols += [6 * P + 6 * ci + a for a in range(6)]  # source focal, center, distortion
    cols += [6 * P + 6 * cj + a for a in range(6)]
    return cols


def dense_system(state, model):
    """Full weighted Jacobian over all camera and plane parameters, and the residual.

    Built block by block with the dual-number engine; weights are the robust
    derivatives, applied to both the residual and the Jacobian. Landmarks with
    fewer than two valid blocks get zero weight.
    """
    D = state.n_camera_params
    L = state.n_landmarks
    lm, tgt = state.block_arrays()
    E, ok, _ = model.residuals(state, lm, tgt, seeds="full", engine="dual")
    sq = (E.val**2).sum(-1)
    _, drho = model.config.robustify(sq)
    n_ok = np.zeros(L, dtype=int)
    for b in range(lm.size):
        n_ok[lm[b]] += int(ok[b])
    J = np.zeros((16 * lm.size, D + 3 * L))
    r = np.zeros(16 * lm.size)
    for b in range(lm.size):
        k, j = int(lm[b]), int(tgt[b])
        if not ok[b] or n_ok[k] < 2:
            continue
        w = drho[b]
        rows = slice(16 * b, 16 * b + 16)
        for local, col in enumerate(global_columns(state, k, j)):
            J[rows, col] += w * E.der[b, :, local]
        J[rows, D + 3 * k : D + 3 * k + 3] = w * E.der[b, :, 24:27]
        r[rows] = w * E.val[b]
    return J, r


def dense_schur(state, model):
    """Schur complement of the structure block of ``J^T J`` and the reduced gradient."""
    D = state.n_camera_params
    J, r = dense_system(state, model)
    N = J.T @ J
    g = J.T @ r
    Hcc, Hcp, Hpp = N[:D, :D], N[:D, D:], N[D:, D:]
    Hpp_inv = np.zeros_like(Hpp)
    for k in range(state.n_landmarks):
        s = slice(3 * k, 3 * k + 3)
        Hpp_inv[s, s] = np.linalg.pinv(Hpp[s, s], rcond=1e-12)
    H = Hcc - Hcp @ Hpp_inv @ Hcp.T
    gr = g[:D] - Hcp @ Hpp_inv @ g[D:]
    return H, gr


def dense_damped_step(state, model, lam):
    """Camera part of the full Gauss-Newton step with the regularizer rows appended
    and damping on the camera columns only."""
    D = state.n_camera_params
    J, r = dense_system(state, model)
    E_reg, J_reg = intrinsics_regularizer(state, model.config.regularizer_weight,
                                          model.config.center_shift)
    Jr = np.zeros((J_reg.shape[0], J.shape[1]))
    Jr[:, :D] = J_reg
    Ja = np.vstack([J, Jr])
    ra = np.concatenate([r, E_reg])
    N = Ja.T @ Ja
    N[:D, :D] += lam * np.eye(D)
    # structure columns of landmarks without valid blocks are empty; pin them
    empty = np.flatnonzero(np.abs(N).sum(0) == 0)
    N[empty, empty] = 1.0
    step = -np.linalg.solve(N, Ja.T @ ra)
    return step[:D]
