"""Rigid-transform algebra and the point-cloud container shared by all modules.

Rotation increments use roll/pitch/yaw under the intrinsic x-y'-z'' convention,
i.e. ``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)``. A tangent vector is the 6-array
``(tx, ty, tz, roll, pitch, yaw)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula. Accepts a single rotation vector or an (N, 3) batch."""
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    th = np.linalg.norm(w, axis=1)
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -w[:, 2], w[:, 1]
    K[:, 1, 0], K[:, 1, 2] = w[:, 2], -w[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -w[:, 1], w[:, 0]
    small = th < 1e-8
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)
    return R[0] if single else R


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    q = rotation_to_quat(R)
    # shortest arc: w >= 0
    if q[3] < 0:
        q = -q
    s = np.linalg.norm(q[:3])
    if s < 1e-12:
        return 2.0 * q[:3]
    angle = 2.0 * np.arctan2(s, q[3])
    return q[:3] / s * angle


def rotation_to_quat(R) -> np.ndarray:
    """Unit quaternion (x, y, z, w) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_to_rotation(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def orthonormalize(R) -> np.ndarray:
    """Closest rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t. ``a @ b`` applies ``b`` first, then ``a``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("pose must be finite")
        err = max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
        if err > ORTHO_TOL:
            # small drift is projected away, anything larger is a caller bug
            if err > 1e-6:
                raise ValueError(f"not a rotation matrix (orthonormality error {err:.2e})")
            R = orthonormalize(R)
        object.__setattr__(self, "R", _frozen(R))
        object.__setattr__(self, "t", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quat(cls, q, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(quat_to_rotation(q), t)

    @classmethod
    def from_rotvec(cls, w, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(so3_exp(w), t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def kitti_row(self) -> np.ndarray:
        return self.matrix()[:3, :4].reshape(12)

    @property
    def quat(self) -> np.ndarray:
        return rotation_to_quat(self.R)

    @property
    def rotvec(self) -> np.ndarray:
        return so3_log(self.R)

    @property
    def angle(self) -> float:
        # atan2 keeps full precision near 0 where arccos of the trace does not
        R = self.R
        s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return float(np.arctan2(s, (np.trace(R) - 1.0) / 2.0))

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def apply(self, p) -> np.ndarray:
        return apply(self, p)

    def rotate(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v @ self.R.T

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol)

    def __repr__(self) -> str:
        return f"Pose(rotvec={np.round(self.rotvec, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    R = a.R @ b.R
    if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL:
        R = orthonormalize(R)
    return Pose(R, a.R @ b.t + a.t)


def apply(T: Pose, p) -> np.ndarray:
    """R p + t for a single 3-vector or an (N, 3) array."""
    p = np.asarray(p, dtype=float)
    return p @ T.R.T + T.t


def interpolate(T: Pose, s: float) -> Pose:
    """Slerp from identity to ``T.R`` at ratio ``s``; translation scaled linearly."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation ratio {s} outside [0, 1]")
    return Pose(so3_exp(s * so3_log(T.R)), s * T.t)


def euler_xyz_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return rot_x(roll) @ rot_y(pitch) @ rot_z(yaw)


def rotation_to_euler_xyz(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    pitch = np.arcsin(np.clip(R[0, 2], -1.0, 1.0))
    roll = np.arctan2(-R[1, 2], R[2, 2])
    yaw = np.arctan2(-R[0, 1], R[0, 0])
    return np.array([roll, pitch, yaw])


def from_tangent(xi) -> Pose:
    """Exact pose for a tangent vector; the rotation is the full Euler composition."""
    xi = np.asarray(xi, dtype=float)
    return Pose(euler_xyz_to_rotation(*xi[3:6]), xi[:3])


def to_tangent(T: Pose) -> np.ndarray:
    return np.concatenate([T.t, rotation_to_euler_xyz(T.R)])


def linearized_rotation(angles) -> np.ndarray:
    return np.eye(3) + skew(angles)


def is_valid_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return bool(np.abs(R.T @ R - np.eye(3)).max() < tol and abs(np.linalg.det(R) - 1.0) < tol)


@dataclass
class PointCloud:
    """Structure-of-arrays scan: float32 coordinates plus per-point attributes.

    ``timestamp_ratio`` is either None or one ratio in [0, 1] per point, where 0 is
    the frame end and 1 the frame start.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    timestamp_ratio: np.ndarray | None = None
    frame_id: int = 0
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=np.float32).reshape(-1, 3))
        n = len(self.xyz)
        if self.intensity is None:
            self.intensity = np.zeros(n, dtype=np.float32)
        self.intensity = np.asarray(self.intensity, dtype=np.float32).reshape(n)
        if self.timestamp_ratio is not None:
            self.timestamp_ratio = np.asarray(self.timestamp_ratio, dtype=np.float64).reshape(n)
            if n and not (self.timestamp_ratio.min() >= 0.0 and self.timestamp_ratio.max() <= 1.0):
                raise ValueError("timestamp ratios must lie in [0, 1]")
        self.sensor_origin = np.asarray(self.sensor_origin, dtype=float).reshape(3)
        if not np.isfinite(self.xyz).all():
            raise ValueError("point coordinates must be finite")
        if (self.intensity < 0).any():
            raise ValueError("intensity must be non-negative")

    def __len__(self) -> int:
        return len(self.xyz)

    def select(self, idx) -> "PointCloud":
        ts = None if self.timestamp_ratio is None else self.timestamp_ratio[idx]
        return PointCloud(self.xyz[idx], self.intensity[idx], ts, self.frame_id, self.sensor_origin)

    def transformed(self, T: Pose) -> "PointCloud":
        xyz = apply(T, self.xyz.astype(np.float64))
        return PointCloud(xyz, self.intensity, self.timestamp_ratio, self.frame_id, apply(T, self.sensor_origin))


def kdtree(xyz):
    """KD-tree with sliding-midpoint splits, which build and query faster than
    median splits on the clustered, surface-like clouds handled here."""
    return cKDTree(xyz, balanced_tree=False, compact_nodes=False)


def inclusive(r: float) -> float:
    """Next float above ``r``: cKDTree's ``distance_upper_bound`` is strict, so
    querying with this bound includes points at exactly ``r``."""
    return float(np.nextafter(r, np.inf))
