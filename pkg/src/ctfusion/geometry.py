"""SO(3) / SE(3) helpers.

Rotations are plain ``(3, 3)`` float arrays; :class:`Pose` pairs one with a
translation. The ``*_batch`` variants operate on stacks of shape ``(n, 3)`` or
``(n, 3, 3)`` and are what the spline and factor code use internally.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from .errors import InvalidArgument, NearSingularLog

SMALL_ANGLE = 1e-8
LOG_PI_MARGIN = 1e-6
_ORTHO_TOL = 1e-9


def _as_vec3(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise InvalidArgument(f"{name} must have shape (3,), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument(f"{name} has non-finite components")
    return a


def hat(v) -> np.ndarray:
    x, y, z = _as_vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        raise InvalidArgument(f"vee expects a 3x3 matrix, got {m.shape}")
    if np.max(np.abs(m + m.T)) > _ORTHO_TOL:
        raise InvalidArgument("vee expects a skew-symmetric matrix")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def hat_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("...i,...i->...", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat_batch(phi)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if np.any(theta > np.pi - LOG_PI_MARGIN):
        raise NearSingularLog("rotation angle too close to pi for so3_log")
    small = s < SMALL_ANGLE
    safe_s = np.where(small, 1.0, s)
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / safe_s)
    return w * scale[..., None]


def so3_exp(phi) -> np.ndarray:
    """Rodrigues' formula; second-order series below ``SMALL_ANGLE``."""
    return so3_exp_batch(_as_vec3(phi, "phi"))


def so3_log(R) -> np.ndarray:
    """Principal-branch logarithm, returned as a rotation vector."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidArgument("so3_log expects a finite 3x3 matrix")
    return so3_log_batch(R)


def right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    """``Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("...i,...i->...", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / (safe**3))
    K = hat_batch(phi)
    return np.eye(3) - a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian_inv_batch(phi: np.ndarray) -> np.ndarray:
    """``Log(Exp(phi) Exp(d)) ~= phi + Jr^{-1}(phi) d``."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.einsum("...i,...i->...", phi, phi)
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = hat_batch(phi)
    return np.eye(3) + 0.5 * K + c[..., None, None] * (K @ K)


def right_jacobian(phi) -> np.ndarray:
    return right_jacobian_batch(_as_vec3(phi, "phi"))


def right_jacobian_inv(phi) -> np.ndarray:
    return right_jacobian_inv_batch(_as_vec3(phi, "phi"))


def is_rotation(R, tol: float = _ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.max(np.abs(R @ R.T - np.eye(3))) <= tol and abs(np.linalg.det(R) - 1.0) <= tol
    )


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (used to scrub accumulated round-off)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def quat_to_rot(q) -> np.ndarray:
    """Hamilton quaternion ``(qw, qx, qy, qz)`` to a rotation matrix."""
    qw, qx, qy, qz = np.asarray(q, dtype=float)
    return _ScipyRotation.from_quat([qx, qy, qz, qw]).as_matrix()


def rot_to_quat(R) -> np.ndarray:
    """Rotation matrix to ``(qw, qx, qy, qz)`` with ``qw >= 0``."""
    x, y, z, w = _ScipyRotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = _as_vec3(self.translation, "translation").copy()
        if not is_rotation(R, tol=1e-6):
            raise InvalidArgument("Pose.rotation is not a valid rotation matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def apply(self, x) -> np.ndarray:
        return self.rotation @ np.asarray(x, dtype=float) + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)


def pose_compose(A: Pose, B: Pose) -> Pose:
    return Pose(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def pose_inverse(A: Pose) -> Pose:
    Rt = A.rotation.T
    return Pose(Rt, -Rt @ A.translation)
