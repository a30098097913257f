"""Odometry: scan-to-scan then scan-to-map registration against a cropped local map."""
from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .core import PointCloud, Pose, inclusive
from .features import CLASSES, NONGROUND, FeatureCloud, FeatureFrame, FeatureSet, extract_features, voxel_downsample
from .io import TrajectoryRecord
from .motion import compensate
from .registration import FeatureIndex, RegistrationError, RegistrationResult, mulls_icp

log = logging.getLogger(__name__)


class LocalMap:
    """Per-class feature points from recent frames.

    Points are stored in world coordinates (float64); ``reference_pose`` is the
    pose of the newest frame. Each point keeps the id of the frame it came from.
    """

    def __init__(self, features: FeatureCloud | None = None, reference_pose: Pose | None = None):
        self.features = features if features is not None else FeatureCloud()
        self.reference_pose = reference_pose or Pose.identity()
        self._index = None

    @property
    def index(self) -> FeatureIndex:
        if self._index is None:
            self._index = FeatureIndex(self.features)
        return self._index

    def counts(self) -> dict:
        return self.features.counts()

    def __len__(self) -> int:
        return self.features.total()

    def replace(self, features: FeatureCloud, reference_pose: Pose) -> None:
        self.features = features
        self.reference_pose = reference_pose
        self._index = None


@dataclass
class OdometryState:
    pose: Pose = field(default_factory=Pose.identity)
    last_delta: Pose = field(default_factory=Pose.identity)
    local_map: LocalMap = field(default_factory=LocalMap)
    prev_dense: FeatureCloud | None = None
    record: TrajectoryRecord = field(default_factory=TrajectoryRecord)
    untracked: list = field(default_factory=list)
    last_frame: FeatureFrame | None = None
    last_result: RegistrationResult | None = None
    n_frames: int = 0


def filter_dynamic(features: FeatureCloud, local_map: LocalMap, r_near: float = 30.0, d_dyn: float = 0.5,
                   origin=(0.0, 0.0, 0.0)) -> FeatureCloud:
    """Drop nonground points near the scanner that have no same-class map point within ``d_dyn``.

    ``features`` and ``origin`` are in map coordinates. Classes absent from the
    map are kept (nothing to compare against).
    """
    origin = np.asarray(origin, dtype=float)
    out = FeatureCloud({c: s for c, s in features.items()})
    for c in NONGROUND:
        s = features[c]
        tree = local_map.index.tree(c)
        if len(s) == 0 or tree is None:
            continue
        near = np.linalg.norm(s.xyz - origin, axis=1) <= r_near
        if not near.any():
            continue
        d, _ = tree.query(s.xyz[near], k=1, distance_upper_bound=inclusive(d_dyn))
        moving = np.zeros(len(s), dtype=bool)
        moving[near] = ~(d <= d_dyn)
        if moving.any():
            out[c] = s.subset(np.flatnonzero(~moving))
    return out


def _newest_first(frame_id: np.ndarray, budget: int) -> np.ndarray:
    order = np.lexsort((np.arange(len(frame_id)), -frame_id))
    return np.sort(order[:budget])


def update_map(local_map: LocalMap, features: FeatureCloud, pose: Pose, crop_radius: float = 80.0,
               max_points: int | dict = 40000, voxel: float = 0.0) -> LocalMap:
    """Append map-frame ``features``, crop around ``pose`` and enforce per-class budgets.

    With ``voxel > 0`` each class keeps only the newest point per voxel.
    """
    merged = FeatureCloud()
    centre = pose.t
    for c in CLASSES:
        s = FeatureSet.concat([local_map.features[c], features[c]])
        if len(s):
            keep = np.flatnonzero(np.linalg.norm(s.xyz - centre, axis=1) <= crop_radius)
            s = s.subset(keep)
        if voxel > 0 and len(s):
            s = s.subset(voxel_downsample(s.xyz, voxel, s.frame_id.astype(float)))
        budget = max_points.get(c, np.inf) if isinstance(max_points, dict) else max_points
        if len(s) > budget:
            s = s.subset(_newest_first(s.frame_id, int(budget)))
        merged[c] = s
    local_map.replace(merged, pose)
    return local_map


_VARIANT = re.compile(r"^(?:s(\d+))?(?:m(\d*))?$")


def variant_iterations(name: str, converge_cap: int = 30) -> tuple[int, int]:
    """``"s5m5"`` -> (5, 5); ``"m1"`` -> (0, 1); a bare ``m`` runs to convergence."""
    m = _VARIANT.match(name.strip().lower())
    if not m or not name.strip():
        raise ValueError(f"unrecognised registration variant '{name}'")
    s2s = int(m.group(1) or 0)
    if m.group(2) is None:
        s2m = 0
    else:
        s2m = int(m.group(2)) if m.group(2) else converge_cap
    return s2s, s2m


def process_frame(state: OdometryState, cloud: PointCloud, cfg: RunConfig | None = None) -> tuple[OdometryState, Pose]:
    """Register one scan, update the local map and append to the trajectory record."""
    cfg = cfg or RunConfig()
    fe, rc = cfg.frontend, cfg.registration
    t0 = time.perf_counter()
    timing = {}
    if fe.deskew and state.n_frames > 0 and cloud.timestamp_ratio is not None:
        # uniform motion: frame start -> frame end is the inverse of the last ego-motion
        cloud = compensate(cloud, state.last_delta.inverse())
    # submaps encode their own descriptors, so frames skip NCC
    frame = extract_features(cloud, cfg, with_ncc=False)
    t1 = time.perf_counter()
    timing.update({f"feature_{k}": v for k, v in frame.timing.items()})
    timing["feature"] = (t1 - t0) * 1e3

    if state.n_frames == 0:
        pose = Pose.identity()
        update_map(state.local_map, frame.dense.transformed(pose), pose, fe.crop_radius, fe.map_max_points, fe.map_voxel)
        t2 = t3 = time.perf_counter()
        tracked = True
        result = None
    else:
        prev = state.pose
        guess = prev @ state.last_delta
        t_assoc = t_est = 0.0
        n_iter = 0
        if fe.s2s_iters > 0 and state.prev_dense is not None:
            try:
                r = mulls_icp(frame.sparse, state.prev_dense, state.last_delta, rc, max_iter=fe.s2s_iters, with_overlap=False)
                guess = prev @ r.transform
                t_assoc += r.t_association
                t_est += r.t_estimation
                n_iter += r.iterations
            except RegistrationError as e:
                log.warning("frame %d: scan-to-scan failed (%s); using constant velocity", cloud.frame_id, e)
        tracked = True
        result = None
        if fe.s2m_iters > 0:
            try:
                result = mulls_icp(frame.sparse, state.local_map.index, guess, rc, max_iter=fe.s2m_iters, with_overlap=False)
                pose = result.transform
                t_assoc += result.t_association
                t_est += result.t_estimation
                n_iter += result.iterations
            except RegistrationError as e:
                log.warning("frame %d: scan-to-map failed (%s); frame untracked", cloud.frame_id, e)
                pose = prev @ state.last_delta
                tracked = False
        else:
            pose = guess
        t2 = time.perf_counter()
        timing["association"] = t_assoc * 1e3
        timing["estimation"] = t_est * 1e3
        timing["iterations"] = n_iter
        if tracked:
            world = frame.sparse.transformed(pose)
            if fe.dynamic_filter and len(state.local_map):
                world = filter_dynamic(world, state.local_map, fe.dynamic_near, fe.dynamic_dist, pose.t)
            update_map(state.local_map, world, pose, fe.crop_radius, fe.map_max_points, fe.map_voxel)
        else:
            state.untracked.append(cloud.frame_id)
        t3 = time.perf_counter()
        state.last_delta = prev.inverse() @ pose
    timing["registration"] = (t2 - t1) * 1e3
    timing["map"] = (t3 - t2) * 1e3
    timing["total"] = (t3 - t0) * 1e3
    state.pose = pose
    state.prev_dense = frame.dense
    state.last_frame = frame
    state.last_result = result
    state.n_frames += 1
    state.record.append(cloud.frame_id, pose, timing)
    return state, pose


class Odometry:
    """Stateful convenience wrapper around :func:`process_frame`."""

    def __init__(self, cfg: RunConfig | None = None):
        self.cfg = cfg or RunConfig()
        self.state = OdometryState()

    def process(self, cloud: PointCloud) -> Pose:
        _, pose = process_frame(self.state, cloud, self.cfg)
        return pose

    @property
    def trajectory(self) -> TrajectoryRecord:
        return self.state.record
