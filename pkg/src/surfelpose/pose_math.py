"""Rigid-body poses and the composition operators used by tracking and the EKF.

Conventions
-----------
* ``RigidTransform`` maps points from a source frame into a target frame:
  ``x_target = rotation @ x_source + translation``.
* Euler angles are extrinsic X-Y-Z: ``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.
* The local error between two poses (``pose_minus``) is the translation
  difference plus the rotation vector of ``R_x^T R_z``; ``pose_plus`` is its
  inverse. Both are used for the filter innovation and correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

ORTHO_TOL = 1e-9
GIMBAL_TOL = 1e-6
_SMALL_ANGLE = 1e-8


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.pi - math.fmod(math.pi - a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotvec_to_matrix(rotvec) -> np.ndarray:
    """Rodrigues' formula (exponential map of so(3))."""
    w = np.asarray(rotvec, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Logarithm of a rotation matrix, returned with norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(vee))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = math.atan2(s, c)
    if theta < _SMALL_ANGLE:
        return vee * (1.0 + theta * theta / 6.0)
    if theta < math.pi - 1e-4:
        return vee * (theta / s)
    # Near pi the antisymmetric part vanishes; recover the axis from the
    # symmetric part (1 - cos) a a^T.
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if float(axis @ vee) < 0.0:
        axis = -axis
    return axis * theta


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar projection). Long chains of products
    otherwise drift off SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        Q = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return Q


def _rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation. Immutable; arrays are read-only copies."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float).reshape(4, 4)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotvec_to_matrix(rotvec), translation)

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self) -> str:
        rv = np.round(matrix_to_rotvec(self.rotation), 6).tolist()
        return f"RigidTransform(t={np.round(self.translation, 6).tolist()}, rotvec={rv})"


def translate(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), (x, y, z))


def rotx(a: float) -> RigidTransform:
    return RigidTransform(_rx(a), np.zeros(3))


def roty(a: float) -> RigidTransform:
    return RigidTransform(_ry(a), np.zeros(3))


def rotz(a: float) -> RigidTransform:
    return RigidTransform(_rz(a), np.zeros(3))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return RigidTransform(orthonormalize(a.rotation @ b.rotation), a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


@dataclass(frozen=True, eq=False)
class TangentVector6:
    """Local pose error: translation difference (m) and rotation vector (rad)."""

    dt: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dr: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        dr = np.array(self.dr, dtype=float).reshape(3)
        theta = float(np.linalg.norm(dr))
        if theta > math.pi:
            # Same rotation, shorter way round.
            dr = dr * (1.0 - 2.0 * math.pi / theta)
        object.__setattr__(self, "dt", _frozen(self.dt, (3,)))
        object.__setattr__(self, "dr", _frozen(dr, (3,)))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dt, self.dr])

    @classmethod
    def from_array(cls, v) -> "TangentVector6":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])


def pose_minus(z: RigidTransform, x: RigidTransform) -> TangentVector6:
    """Local error of ``z`` relative to ``x`` (the ⊖ operator)."""
    return TangentVector6(
        z.translation - x.translation,
        matrix_to_rotvec(x.rotation.T @ z.rotation),
    )


def pose_plus(x: RigidTransform, v: TangentVector6 | np.ndarray) -> RigidTransform:
    """Apply a local correction to ``x`` (the ⊕ operator)."""
    if not isinstance(v, TangentVector6):
        v = TangentVector6.from_array(v)
    return RigidTransform(orthonormalize(x.rotation @ rotvec_to_matrix(v.dr)), x.translation + v.dt)


@dataclass(frozen=True)
class Pose6D:
    """Translation (m) and extrinsic X-Y-Z Euler angles (rad)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    gimbal_lock: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("rx", "ry", "rz"):
            object.__setattr__(self, name, normalize_angle(float(getattr(self, name))))
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.rx, self.ry, self.rz])


def euler_to_transform(p: Pose6D) -> RigidTransform:
    R = _rz(p.rz) @ _ry(p.ry) @ _rx(p.rx)
    return RigidTransform(R, (p.x, p.y, p.z))


def transform_to_euler(t: RigidTransform) -> Pose6D:
    """Inverse of :func:`euler_to_transform`.

    At gimbal lock (``|cos ry| < 1e-6``) roll is not observable; the result
    has ``rx = 0``, yaw absorbs the remaining rotation and ``gimbal_lock`` is
    set.
    """
    R = t.rotation
    x, y, z = t.translation
    sy = -R[2, 0]
    cy = math.hypot(R[0, 0], R[1, 0])
    ry = math.atan2(sy, cy)
    if cy < GIMBAL_TOL:
        rz = math.atan2(-R[0, 1], R[1, 1])
        return Pose6D(x, y, z, 0.0, ry, rz, gimbal_lock=True)
    rx = math.atan2(R[2, 1], R[2, 2])
    rz = math.atan2(R[1, 0], R[0, 0])
    return Pose6D(x, y, z, rx, ry, rz)


def pose_to_json(t: RigidTransform) -> dict:
    p = transform_to_euler(t)
    return {"t": [p.x, p.y, p.z], "euler_xyz": [p.rx, p.ry, p.rz]}


def pose_from_json(d: Mapping) -> RigidTransform:
    """Accept ``{"t", "euler_xyz"}`` or a row-major 4x4 ``{"matrix"}``."""
    if "matrix" in d:
        M = np.asarray(d["matrix"], dtype=float)
        if M.size != 16:
            raise ValueError("pose matrix must have 16 entries")
        t = RigidTransform.from_matrix(M.reshape(4, 4))
        if not t.is_valid(1e-6):
            raise ValueError("pose matrix rotation is not orthonormal")
        return t
    if "t" not in d or "euler_xyz" not in d:
        raise ValueError("pose needs 't' and 'euler_xyz' (or 'matrix')")
    x, y, z = (float(v) for v in d["t"])
    rx, ry, rz = (float(v) for v in d["euler_xyz"])
    return euler_to_transform(Pose6D(x, y, z, rx, ry, rz))
