"""Accuracy against ground truth after a similarity alignment on camera centers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .scene import ProblemState


class EvaluationError(ValueError):
    pass


@dataclass
class Similarity:
    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, X) -> np.ndarray:
        return self.scale * np.asarray(X) @ self.R.T + self.t


@dataclass
class EvalReport:
    landmark_rmse: float
    rotation_error_deg: np.ndarray
    translation_error: np.ndarray  # camera-center error / scene diameter
    focal_error_pct: np.ndarray
    alignment_residual: float
    n_landmarks: int
    cost_curve: list = field(default_factory=list)

    @property
    def mean_rotation_error(self) -> float:
        return float(np.mean(self.rotation_error_deg))

    @property
    def mean_translation_error(self) -> float:
        return float(np.mean(self.translation_error))

    @property
    def max_focal_error(self) -> float:
        return float(np.max(self.focal_error_pct))

    def as_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        d.update(mean_rotation_error_deg=self.mean_rotation_error,
                 mean_translation_error=self.mean_translation_error,
                 max_focal_error_pct=self.max_focal_error)
        return d


def umeyama(src, dst) -> Similarity:
    """Least-squares similarity with ``dst ~ s R src + t`` (closed form)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3:
        raise EvaluationError("similarity alignment needs at least 3 cameras")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    var = (a * a).sum() / len(src)
    if var <= 0:
        raise EvaluationError("degenerate camera configuration (all centers coincide)")
    cov = b.T @ a / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = np.trace(np.diag(D) @ S) / var
    return Similarity(float(s), R, mu_d - s * R @ mu_s)


def camera_centers(state: ProblemState) -> np.ndarray:
    return -np.einsum("nji,nj->ni", state.R, state.t)


def rotation_angle_deg(Ra, Rb) -> np.ndarray:
    """Geodesic angle between rotations (batched)."""
    M = np.einsum("...ji,...jk->...ik", Ra, Rb)
    c = (np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0
    # arccos is ill-conditioned near 0; use atan2 of |skew| and trace
    w = np.stack([M[..., 2, 1] - M[..., 1, 2], M[..., 0, 2] - M[..., 2, 0],
                  M[..., 1, 0] - M[..., 0, 1]], -1)
    s = np.linalg.norm(w, axis=-1) / 2.0
    return np.degrees(np.arctan2(s, c))


def evaluate_against_truth(est: ProblemState, truth: ProblemState, est_points,
                           truth_points, diameter: float | None = None,
                           cost_curve=None) -> EvalReport:
    """Align estimated camera centers to the truth, then measure errors.

    Landmark points are compared one-to-one (NaN rows are skipped).
    Translation errors are camera-center distances divided by the scene
    diameter (the truth centers' extent if not given).
    """
    if est.n_images != truth.n_images:
        raise EvaluationError("estimate and truth have different image counts")
    ce, ct = camera_centers(est), camera_centers(truth)
    sim = umeyama(ce, ct)
    aligned_c = sim.apply(ce)
    resid = float(np.sqrt(((aligned_c - ct) ** 2).sum(1).mean()))
    diam = diameter or float(np.linalg.norm(ct.max(0) - ct.min(0)))
    P = sim.apply(np.asarray(est_points, dtype=float))
    T = np.asarray(truth_points, dtype=float)
    good = np.isfinite(P).all(1) & np.isfinite(T).all(1)
    rmse = float(np.sqrt(((P[good] - T[good]) ** 2).sum(1).mean())) if good.any() else float("nan")
    # estimated world-to-camera rotation expressed in the truth frame: R_e sim.R^T
    R_al = np.einsum("nij,kj->nik", est.R, sim.R)
    rot = rotation_angle_deg(R_al, truth.R)
    trans = np.linalg.norm(aligned_c - ct, axis=1) / diam
    fe = est.s[est.camera_of_image, :2]
    ft = truth.s[truth.camera_of_image, :2]
    focal = 100.0 * np.abs(fe - ft).max(1) / ft.max(1)
    return EvalReport(rmse, rot, trans, focal, resid, int(good.sum()), list(cost_curve or []))
