"""World to pixel mapping: projection, calibration and radial distortion.

Every public function takes plain numpy arrays with the coordinate axis last.
The underscore-prefixed ``*_xy`` helpers work component-wise and accept
floats, arrays or :class:`~photoba.autodiff.Dual` values alike; the batched
warp in :mod:`photoba.scene` is built from them.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

EPS_Z = 1e-9
SMALL_ANGLE = 1e-8
N_INVERSE_COEFFS = 6
DEFAULT_VALIDITY_RADIUS = 1.0
_FIT_NODES = 64


class CameraModelError(ValueError):
    pass


class PointBehindCamera(CameraModelError):
    pass


class InvalidIntrinsics(CameraModelError):
    pass


class OutOfModelRange(CameraModelError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    """Linear calibration ``s = (fx, fy, cx, cy)`` and radial terms ``l``."""

    s: np.ndarray
    l: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).reshape(4)
        l = np.asarray(self.l, dtype=float).reshape(2)
        if not (s[0] > 0 and s[1] > 0):
            raise InvalidIntrinsics(f"focal lengths must be positive, got {s[:2]}")
        if not np.all(np.isfinite(l)):
            raise InvalidIntrinsics("distortion coefficients must be finite")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "l", l)


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``x_cam = R x_world + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.abs(R @ R.T - np.eye(3)).max() >= 1e-10 or np.linalg.det(R) <= 0:
            raise CameraModelError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


@dataclass(frozen=True)
class InverseDistortion:
    """Coefficients of the undistortion polynomial and its range of validity.

    ``r_max`` is the squared undistorted radius the fit covers, ``rd_max`` the
    matching squared distorted radius (the input domain of :func:`undistort`).
    """

    b: np.ndarray
    r_max: float = DEFAULT_VALIDITY_RADIUS
    rd_max: float = DEFAULT_VALIDITY_RADIUS
    reduced: bool = False


# -- component-wise primitives -------------------------------------------------


def _kappa_xy(s, x, y):
    return s[0] * x + s[2], s[1] * y + s[3]


def _kappa_inv_xy(s, x, y):
    return (x - s[2]) / s[0], (y - s[3]) / s[1]


def _distort_xy(l1, l2, x, y):
    r = x * x + y * y
    f = 1.0 + l1 * r + l2 * (r * r)
    return x * f, y * f


def _undistort_xy(b, x, y):
    r = x * x + y * y
    # Horner in r: 1 + b1 r + ... + b6 r^6
    acc = b[5] * r
    for c in (b[4], b[3], b[2], b[1], b[0]):
        acc = (acc + c) * r
    f = acc + 1.0
    return x * f, y * f


# -- public API ---------------------------------------------------------------


def pi(p, eps_z: float = EPS_Z) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(np.abs(z) < eps_z):
        raise PointBehindCamera("point lies on the camera plane (|z| < eps)")
    return p[..., :2] / z[..., None]


def _check_focal(s):
    s = np.asarray(s, dtype=float)
    if s[0] == 0 or s[1] == 0:
        raise InvalidIntrinsics("zero focal length")
    return s


def kappa(s, x) -> np.ndarray:
    s = _check_focal(s)
    x = np.asarray(x, dtype=float)
    return np.stack(_kappa_xy(s, x[..., 0], x[..., 1]), axis=-1)


def kappa_inv(s, x) -> np.ndarray:
    s = _check_focal(s)
    x = np.asarray(x, dtype=float)
    return np.stack(_kappa_inv_xy(s, x[..., 0], x[..., 1]), axis=-1)


def distort(l, x) -> np.ndarray:
    l = np.asarray(l, dtype=float)
    x = np.asarray(x, dtype=float)
    return np.stack(_distort_xy(l[0], l[1], x[..., 0], x[..., 1]), axis=-1)


def monotone_radius(l, r_max: float = DEFAULT_VALIDITY_RADIUS) -> float:
    """Largest squared radius <= r_max over which the distortion is monotone.

    The radial map rho -> rho (1 + l1 rho^2 + l2 rho^4) has derivative
    1 + 3 l1 r + 5 l2 r^2 in r = rho^2; the first positive root caps the range.
    """
    l1, l2 = float(l[0]), float(l[1])
    disc = 9.0 * l1 * l1 - 20.0 * l2
    roots = []
    if disc >= 0:
        # numerically stable quadratic roots, also fine for tiny l2
        q = -0.5 * (3.0 * l1 + np.copysign(np.sqrt(disc), l1))
        if q != 0:
            roots.append(1.0 / q)
            if abs(q) <= 1e12 * abs(5.0 * l2):  # else the root is far outside any radius
                roots.append(q / (5.0 * l2))
    return min([r_max] + [r for r in roots if r > 0])


def inverse_coefficients(l1: float, l2: float, r_max: float = DEFAULT_VALIDITY_RADIUS):
    """Fit the undistortion coefficients and their derivative w.r.t. ``l``.

    The six coefficients minimise the undistortion error in least squares over
    Chebyshev-spaced radii covering ``[0, r_max]`` (squared, undistorted). The
    fit is a smooth closed-form function of ``l``; its exact Jacobian comes
    from differentiating the normal equations.

    Returns ``(b, db_dl)`` with shapes ``(6,)`` and ``(6, 2)``.
    """
    t = 0.5 * (1.0 - np.cos(np.pi * np.arange(_FIT_NODES) / (_FIT_NODES - 1)))
    ru = np.sqrt(r_max) * t
    rd = ru * (1.0 + l1 * ru**2 + l2 * ru**4)
    powers = np.arange(1, N_INVERSE_COEFFS + 1)
    A = rd[:, None] ** (2 * powers + 1)
    y = ru - rd
    # QR keeps the (ill-conditioned) monomial fit accurate; G^-1 v = R^-1 R^-T v
    Q, R = np.linalg.qr(A)
    b = np.linalg.solve(R, Q.T @ y)
    db = np.empty((N_INVERSE_COEFFS, 2))
    for i, drd in enumerate((ru**3, ru**5)):
        dA = (2 * powers + 1) * rd[:, None] ** (2 * powers) * drd[:, None]
        rhs = dA.T @ (y - A @ b) - A.T @ (drd + dA @ b)
        db[:, i] = np.linalg.solve(R, np.linalg.solve(R.T, rhs))
    return b, db


def invert_distortion(l, r_max: float = DEFAULT_VALIDITY_RADIUS) -> InverseDistortion:
    """Undistortion coefficients for the radial model ``l``.

    If the forward model stops being monotone inside ``r_max`` a warning is
    emitted and the validity radius is reduced to the turning point.
    """
    l = np.asarray(l, dtype=float).reshape(2)
    if not np.all(np.isfinite(l)):
        raise InvalidIntrinsics("distortion coefficients must be finite")
    r_ok = monotone_radius(l, r_max)
    reduced = r_ok < r_max
    if reduced:
        warnings.warn(
            f"distortion {l} is not monotone beyond squared radius {r_ok:.4g}; "
            "validity radius reduced",
            RuntimeWarning,
            stacklevel=2,
        )
    b, _ = inverse_coefficients(l[0], l[1], r_ok)
    rho = np.sqrt(r_ok)
    rd = rho * (1.0 + l[0] * r_ok + l[1] * r_ok**2)
    return InverseDistortion(b, r_ok, float(rd * rd), reduced)


def undistort(
    inv: InverseDistortion,
    x,
    check_range: bool = True,
    newton_l=None,
    newton_tol: float = 1e-12,
) -> np.ndarray:
    """Apply the undistortion polynomial to distorted normalized points.

    Passing ``newton_l`` (the forward coefficients) polishes the polynomial
    estimate with Newton iterations on the forward model; meant for
    validation runs, not for the optimizer.
    """
    x = np.asarray(x, dtype=float)
    if check_range and np.any((x**2).sum(-1) > inv.rd_max * (1 + 1e-12)):
        raise OutOfModelRange(
            f"point outside the undistortion validity radius ({inv.rd_max:.4g})"
        )
    out = np.stack(_undistort_xy(inv.b, x[..., 0], x[..., 1]), axis=-1)
    if newton_l is not None:
        out = _newton_undistort(np.asarray(newton_l, dtype=float), x, out, newton_tol)
    return out


def _newton_undistort(l, xd, xu, tol, max_iter=50):
    # radial Newton on rho_d = rho_u (1 + l1 rho_u^2 + l2 rho_u^4)
    rd = np.linalg.norm(xd, axis=-1)
    ru = np.linalg.norm(xu, axis=-1)
    for _ in range(max_iter):
        f = ru * (1 + l[0] * ru**2 + l[1] * ru**4) - rd
        df = 1 + 3 * l[0] * ru**2 + 5 * l[1] * ru**4
        step = f / df
        ru = ru - step
        if np.all(np.abs(step) < tol):
            break
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rd > 0, ru / rd, 1.0)
    return xd * scale[..., None]


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], -1),
            np.stack([v[..., 2], z, -v[..., 0]], -1),
            np.stack([-v[..., 1], v[..., 0], z], -1),
        ],
        -2,
    )


def rodrigues(r) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``r`` (batched over leading axes)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    K = skew(r)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    I = np.broadcast_to(np.eye(3), K.shape)
    return I + a[..., None, None] * K + b[..., None, None] * K2


def project(X, pose: Pose, intr: Intrinsics, eps_z: float = EPS_Z) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    pc = X @ pose.R.T + pose.t
    if np.any(pc[..., 2] <= eps_z):
        raise PointBehindCamera("point is behind the camera")
    return kappa(intr.s, distort(intr.l, pi(pc, eps_z)))
