"""Rigid-body poses as position plus unit quaternion (w, x, y, z).

Quaternions are canonicalized to w >= 0 on construction so the double
cover never leaks into stored values. The matrix <-> quaternion
conversion picks the branch with the largest of (trace, R00, R11, R22);
the differentiable twin in ``kinematics.dfk`` mirrors this rule exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion, largest-diagonal branch selection."""
    t = r[0, 0] + r[1, 1] + r[2, 2]
    branch = int(np.argmax([t, r[0, 0], r[1, 1], r[2, 2]]))
    if branch == 0:
        s = np.sqrt(1.0 + t) * 2.0
        q = np.array([
            0.25 * s,
            (r[2, 1] - r[1, 2]) / s,
            (r[0, 2] - r[2, 0]) / s,
            (r[1, 0] - r[0, 1]) / s,
        ])
    elif branch == 1:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([
            (r[2, 1] - r[1, 2]) / s,
            0.25 * s,
            (r[0, 1] + r[1, 0]) / s,
            (r[0, 2] + r[2, 0]) / s,
        ])
    elif branch == 2:
        s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
        q = np.array([
            (r[0, 2] - r[2, 0]) / s,
            (r[0, 1] + r[1, 0]) / s,
            0.25 * s,
            (r[1, 2] + r[2, 1]) / s,
        ])
    else:
        s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
        q = np.array([
            (r[1, 0] - r[0, 1]) / s,
            (r[0, 2] + r[2, 0]) / s,
            (r[1, 2] + r[2, 1]) / s,
            0.25 * s,
        ])
    return quat_normalize(q)


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle between two unit quaternions, in [0, pi]."""
    d = abs(float(np.dot(a, b)))
    return 2.0 * np.arccos(min(d, 1.0))


def quat_log_vector(q: np.ndarray) -> np.ndarray:
    """Rotation-vector (axis * angle) form of a unit quaternion."""
    w = q[0]
    v = q[1:]
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(nv, w)
    if angle > np.pi:
        angle -= 2.0 * np.pi
    return (angle / nv) * v


def rpy_to_matrix(rpy: np.ndarray) -> np.ndarray:
    """Roll-pitch-yaw (XYZ extrinsic, the URDF convention) to a matrix."""
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def matrix_to_rpy(r: np.ndarray) -> np.ndarray:
    """Inverse of rpy_to_matrix away from the pitch = +-pi/2 singularity."""
    sp = -r[2, 0]
    sp = min(1.0, max(-1.0, sp))
    p = np.arcsin(sp)
    if abs(sp) > 1.0 - 1e-12:
        # gimbal lock: fold yaw into roll
        return np.array([np.arctan2(-r[0, 1], r[1, 1]), p, 0.0])
    roll = np.arctan2(r[2, 1], r[2, 2])
    yaw = np.arctan2(r[1, 0], r[0, 0])
    return np.array([roll, p, yaw])


@dataclass(frozen=True, eq=False)
class Pose:
    """Position (meters) plus unit quaternion (w, x, y, z), w >= 0."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        q = np.array(self.orientation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        q = q / n
        if q[0] < 0.0:
            q = -q
        pos.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(rot: np.ndarray, pos: np.ndarray) -> "Pose":
        return Pose(np.asarray(pos, dtype=np.float64), matrix_to_quat(rot))

    @staticmethod
    def from_xyz_rpy(xyz, rpy) -> "Pose":
        return Pose(np.asarray(xyz, dtype=np.float64),
                    matrix_to_quat(rpy_to_matrix(np.asarray(rpy, dtype=np.float64))))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.position
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.position + quat_to_matrix(self.orientation) @ other.position,
                    quat_normalize(quat_mul(self.orientation, other.orientation)))

    def inverse(self) -> "Pose":
        qi = quat_conj(self.orientation)
        return Pose(-(quat_to_matrix(qi) @ self.position), quat_normalize(qi))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return self.rotation_matrix() @ np.asarray(v, dtype=np.float64)
