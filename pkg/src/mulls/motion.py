"""Scan undistortion under the uniform-motion assumption.

Each point with ratio ``s`` (1 at frame start, 0 at frame end) is moved into the
frame-end coordinates by ``slerp(R, s) p + s t`` where ``(R, t)`` is the motion
from frame start to frame end.
"""
from __future__ import annotations

import numpy as np

from .core import PointCloud, Pose, so3_exp, so3_log

N_BUCKETS = 256


class MissingTimestampsError(ValueError):
    pass


def _rotations_at(motion: Pose, s: np.ndarray) -> np.ndarray:
    return so3_exp(np.outer(s, so3_log(motion.R)))


def compensate(cloud: PointCloud, motion: Pose, exact: bool = False, n_buckets: int = N_BUCKETS) -> PointCloud:
    """Undistort ``cloud``. Bucketed mode uses one rotation per ratio bucket
    (evaluated at the bucket's mean ratio); translation is always per point."""
    if cloud.timestamp_ratio is None:
        raise MissingTimestampsError("cloud carries no timestamp ratios; skip compensation")
    s = cloud.timestamp_ratio
    if len(s) and (s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("timestamp ratios must lie in [0, 1]")
    if motion.angle >= np.pi:
        raise ValueError("motion rotation must be below pi for a unique slerp")
    p = cloud.xyz.astype(np.float64)
    if exact:
        R = _rotations_at(motion, s)
        out = np.einsum("nij,nj->ni", R, p)
    else:
        bucket = np.minimum((s * n_buckets).astype(np.int64), n_buckets - 1)
        counts = np.bincount(bucket, minlength=n_buckets)
        sums = np.bincount(bucket, weights=s, minlength=n_buckets)
        rep = np.divide(sums, counts, out=np.zeros(n_buckets), where=counts > 0)
        R = _rotations_at(motion, rep)
        out = np.empty_like(p)
        order = np.argsort(bucket, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in np.flatnonzero(counts):
            idx = order[bounds[k] : bounds[k + 1]]
            out[idx] = p[idx] @ R[k].T
    out += np.outer(s, motion.t)
    return PointCloud(out, cloud.intensity, None, cloud.frame_id, cloud.sensor_origin)
