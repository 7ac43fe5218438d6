"""Quaternion and rigid-motion helpers.

Quaternions are (w, x, y, z). A :class:`Pose` maps world points into the
camera frame, ``x_cam = R(omega) @ x_world + t``, so the motion from camera
``a`` to camera ``b`` is ``T_b @ inv(T_a)``. Angles are radians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


class GeometryError(ValueError):
    pass


def qnormalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise GeometryError("zero quaternion cannot be normalized")
    q = q / n
    # w >= 0; for w == 0 take the first nonzero component positive
    if q[0] < 0 or (q[0] == 0 and q[np.flatnonzero(q)[0]] < 0):
        q = -q
    return q


def qmul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def qconj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def qrotate(q, v) -> np.ndarray:
    """Rotate 3-vector ``v`` by unit quaternion ``q``."""
    w, u = q[0], np.asarray(q[1:])
    v = np.asarray(v, dtype=np.float64)
    c = np.cross(u, v)
    return v + 2.0 * w * c + 2.0 * np.cross(u, c)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return qnormalize(q)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return qnormalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


@dataclass(frozen=True)
class Pose:
    """Unit quaternion ``omega`` plus translation ``t``."""

    omega: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.omega, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            q = qnormalize(q)
        elif q[0] < 0:
            q = -q
        object.__setattr__(self, "omega", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(self.omega)
        M[:3, 3] = self.t
        return M

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other`` as rigid transforms (apply ``other`` first)."""
        q = qmul(self.omega, other.omega)
        return Pose(q, qrotate(self.omega, other.t) + self.t)

    def inverse(self) -> "Pose":
        qi = qconj(self.omega)
        return Pose(qi, -qrotate(qi, self.t))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.omega, other.omega) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.omega.tobytes(), self.t.tobytes()))


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Motion taking camera ``a`` to camera ``b``: rotation ``omega_b * omega_a^-1``."""
    q = qmul(b.omega, qconj(a.omega))
    q = q / np.linalg.norm(q)
    return Pose(q, b.t - qrotate(q, a.t))


def _check_unit(q, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise GeometryError(f"{name} is not a unit quaternion (norm {np.linalg.norm(q):.6g})")
    return q


def rot_distance(q1, q2) -> float:
    """Geodesic angle between two rotations, in [0, pi]."""
    q1 = _check_unit(q1, "q1")
    q2 = _check_unit(q2, "q2")
    r = qmul(qconj(q1), q2)
    return float(2.0 * np.arctan2(np.linalg.norm(r[1:]), abs(r[0])))


def trans_distance(t1, t2) -> float:
    return float(np.linalg.norm(np.asarray(t1, dtype=np.float64) - np.asarray(t2, dtype=np.float64)))


def pose_to_vec7(p: Pose) -> np.ndarray:
    return np.concatenate([p.omega, p.t])


def vec7_to_pose(v) -> Pose:
    v = np.asarray(v, dtype=np.float64).reshape(7)
    if not np.any(v[:4]):
        raise GeometryError("quaternion part of pose vector is zero")
    # Pose renormalizes only when needed, so stored unit vectors round-trip exactly
    return Pose(v[:4], v[4:])


def random_quat(rng: np.random.Generator) -> np.ndarray:
    return qnormalize(rng.normal(size=4))


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    return Pose(random_quat(rng), rng.normal(scale=scale, size=3))
