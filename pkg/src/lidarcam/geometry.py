"""Rigid-body and pinhole projection algebra.

Conventions (used everywhere in the package):

* Quaternions are Hamilton, stored scalar-first ``(w, x, y, z)``. The matrix of
  ``q`` is the usual active rotation.
* A :class:`RigidPose` stores the rotation ``R`` that takes laser (world)
  coordinates into the camera frame, and the camera centre ``p`` expressed in
  the laser frame. A world point maps to the camera as ``R @ (x - p)``.
* Rotation errors are right-multiplicative on that world-to-camera rotation:
  ``R_true = R_est @ (I - skew(theta))``. Geometrically ``theta`` is the small
  rotation of the camera body about laser-frame axes. Position errors are
  additive: ``p_true = p_est + p_err``.

The first-order update ``R @ (I - skew(theta))`` is mapped back to SO(3) with a
polar decomposition, whose rotation angle is ``atan(|theta|)``. The error
extraction in :func:`quaternion_error` inverts exactly that map, so the pair
round-trips to machine precision and is only defined for relative angles
below 90 degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_EPS = 1e-6


class BehindCamera(ValueError):
    """Point is at or behind the image plane."""


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Skew matrices for an ``(n, 3)`` array of vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------------------
# quaternion / rotation helpers


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # canonical sign keeps serialisation deterministic
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns a canonical (w >= 0) unit quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula, ``exp(skew(w))``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    q = matrix_to_quat(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return 2.0 * v
    angle = 2.0 * np.arctan2(s, q[0])
    return v / s * angle


def rotation_angle(R) -> float:
    """Angle of a rotation matrix, computed robustly through the quaternion."""
    q = matrix_to_quat(R)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


def nearest_rotation(M) -> np.ndarray:
    """Polar-decomposition projection of a 3x3 matrix onto SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return quat_normalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class SmallAngle:
    """Minimal three-parameter rotation error ``theta`` (radians).

    ``degenerate`` is set by :func:`quaternion_error` when the two rotations
    are 90 degrees or more apart and the small-angle map is undefined.
    """

    theta: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).reshape(3))

    def to_quaternion(self) -> np.ndarray:
        """Error quaternion ``dq = (sqrt(1 - |theta|^2 / 4), -theta / 2)``.

        The minus sign converts the JPL-style ``[theta/2, ...]`` vector part to
        the Hamilton storage used here.
        """
        t = self.theta
        w2 = 1.0 - 0.25 * float(t @ t)
        if w2 < 0.0:
            raise ValueError("small angle too large for a unit error quaternion")
        return np.concatenate([[np.sqrt(w2)], -0.5 * t])

    @classmethod
    def from_quaternion(cls, dq) -> "SmallAngle":
        dq = np.asarray(dq, dtype=float)
        if dq[0] < 0:
            dq = -dq
        return cls(-2.0 * dq[1:])


@dataclass(frozen=True)
class RigidPose:
    """Camera pose in the laser frame (see module docstring for conventions)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, R, p) -> "RigidPose":
        return cls(matrix_to_quat(R), p)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def p(self) -> np.ndarray:
        return self.translation

    def to_camera(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self.translation) @ self.R.T

    def to_world(self, xc) -> np.ndarray:
        xc = np.asarray(xc, dtype=float)
        return xc @ self.R + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self`` applied after ``other``: x -> self.to_camera(other.to_camera(x))."""
        p = other.translation + other.R.T @ self.translation
        return RigidPose(quat_multiply(self.rotation, other.rotation), p)

    def inverse(self) -> "RigidPose":
        return RigidPose(quat_conjugate(self.rotation), -self.R @ self.translation)

    def to_dict(self) -> dict:
        return {"rotation_wxyz": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidPose":
        return cls(np.array(d["rotation_wxyz"]), np.array(d["translation"]))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**d)


# ---------------------------------------------------------------------------
# error state


def apply_rotation_error(R_hat, theta) -> np.ndarray:
    """``R_hat (I - skew(theta))`` projected back onto SO(3)."""
    theta = theta.theta if isinstance(theta, SmallAngle) else np.asarray(theta, dtype=float)
    return nearest_rotation(np.asarray(R_hat, dtype=float) @ (np.eye(3) - skew(theta)))


def quaternion_error(q_true, q_est) -> SmallAngle:
    """Small-angle error ``theta`` such that ``apply_rotation_error(R_est, theta) == R_true``.

    Both quaternions are world-to-camera rotations. Relative angles of 90
    degrees or more return a zero angle flagged ``degenerate``.
    """
    dq = quat_multiply(quat_conjugate(q_est), q_true)
    dq = dq / np.linalg.norm(dq)
    w, v = dq[0], dq[1:]
    cos_angle = w * w - float(v @ v)
    if cos_angle <= 0.0:
        return SmallAngle(np.zeros(3), degenerate=True)
    # tan(angle) * axis, with the sign flip of the right-multiplied I - skew
    return SmallAngle(-2.0 * w * v / cos_angle)


# ---------------------------------------------------------------------------
# projection


def project_camera_point(xc, K: CameraIntrinsics):
    """Pinhole projection of a camera-frame point and its 2x3 Jacobian."""
    x, y, z = np.asarray(xc, dtype=float)
    if z <= DEPTH_EPS:
        raise BehindCamera(f"depth {z:.3g} m")
    uv = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
    J = np.array(
        [
            [K.fx / z, 0.0, -K.fx * x / z**2],
            [0.0, K.fy / z, -K.fy * y / z**2],
        ]
    )
    return uv, J


def project(point, camera_pose: RigidPose, K: CameraIntrinsics):
    """Project a laser-frame point. Returns ``(uv, J)`` with ``J = d uv / d x_cam``."""
    return project_camera_point(camera_pose.to_camera(point), K)


def project_batch(xc: np.ndarray, K: CameraIntrinsics):
    """Vectorised projection; returns ``(uv, J, valid)`` for ``(n, 3)`` camera points."""
    xc = np.atleast_2d(np.asarray(xc, dtype=float))
    z = xc[:, 2]
    valid = z > DEPTH_EPS
    zs = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * xc[:, 0] / zs + K.cx, K.fy * xc[:, 1] / zs + K.cy], axis=1)
    J = np.zeros((len(xc), 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * xc[:, 0] / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * xc[:, 1] / zs**2
    return uv, J, valid
