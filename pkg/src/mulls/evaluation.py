"""Trajectory and map accuracy metrics plus per-stage timing summaries."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Pose, inclusive, kdtree

log = logging.getLogger(__name__)

SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)

# Table-V style stage names -> keys of the per-frame timing dicts
STAGES = {
    "feature extraction": "feature",
    "map update": "map",
    "association": "association",
    "transform estimation": "estimation",
    "registration": "registration",
    "total": "total",
}


@dataclass
class MetricReport:
    ate: float | None = None  # percent
    are: float | None = None  # deg / 100 m
    segments: dict = field(default_factory=dict)  # L -> (ate %, are deg/100m, count)
    mapping_error: float | None = None
    timing: dict = field(default_factory=dict)  # stage -> (mean ms, p95 ms)
    warnings: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.ate is None

    def format(self) -> str:
        lines = []
        if self.ate is not None:
            lines.append(f"ATE {self.ate:.2f}%  ARE {self.are:.4f} deg/100m")
            for L, (t, r, n) in sorted(self.segments.items()):
                lines.append(f"  {L:4d} m: ATE {t:.2f}%  ARE {r:.4f} deg/100m  ({n} segments)")
        if self.mapping_error is not None:
            lines.append(f"mapping error {self.mapping_error:.4f} m")
        for name, (mean, p95) in self.timing.items():
            lines.append(f"{name:>22s}: {mean:8.2f} ms mean  {p95:8.2f} ms p95")
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def path_distances(poses) -> np.ndarray:
    t = np.array([T.t for T in poses])
    steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_ate_are(estimated, ground_truth, lengths=SEGMENT_LENGTHS) -> MetricReport:
    """Segment-based relative errors with every frame used as a start point.

    A segment of length L starting at frame i ends at the first frame whose
    ground-truth path distance is at least ``d_i + L``.
    """
    est, gt = list(estimated), list(ground_truth)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} estimated vs {len(gt)} ground truth")
    if len(gt) < 2:
        raise ValueError("need at least two poses")
    dist = path_distances(gt)
    report = MetricReport()
    t_all, r_all = [], []
    for L in lengths:
        ends = np.searchsorted(dist, dist + L, side="left")
        starts = np.flatnonzero(ends < len(gt))
        if len(starts) == 0:
            continue
        te, re = np.empty(len(starts)), np.empty(len(starts))
        for k, i in enumerate(starts):
            j = ends[i]
            E = (gt[i].inverse() @ gt[j]).inverse() @ (est[i].inverse() @ est[j])
            te[k] = np.linalg.norm(E.t) / L
            re[k] = np.degrees(E.angle) / L
        report.segments[int(L)] = (float(te.mean() * 100), float(re.mean() * 100), len(starts))
        t_all.append(te)
        r_all.append(re)
    if not t_all:
        msg = f"trajectory spans {dist[-1]:.1f} m, shorter than the {min(lengths)} m minimum segment"
        log.warning(msg)
        report.warnings.append(msg)
        return report
    report.ate = float(np.concatenate(t_all).mean() * 100)
    report.are = float(np.concatenate(r_all).mean() * 100)
    return report


def endpoint_error(estimated, ground_truth) -> float:
    """Translation error of the last pose with both trajectories anchored at their first pose."""
    e0, g0 = estimated[0], ground_truth[0]
    return float(np.linalg.norm(((g0.inverse() @ ground_truth[-1]).inverse() @ (e0.inverse() @ estimated[-1])).t))


def mapping_error(map_xyz, reference_xyz, max_dist: float = 2.0) -> float:
    """Mean nearest-neighbour distance from map points to the reference, ignoring pairs beyond ``max_dist``."""
    map_xyz = np.asarray(map_xyz, dtype=float).reshape(-1, 3)
    reference_xyz = np.asarray(reference_xyz, dtype=float).reshape(-1, 3)
    if len(map_xyz) == 0 or len(reference_xyz) == 0:
        raise ValueError("mapping_error needs two nonempty clouds")
    d, _ = kdtree(reference_xyz).query(map_xyz, k=1, distance_upper_bound=inclusive(max_dist))
    d = d[np.isfinite(d)]
    if len(d) == 0:
        log.warning("no map point within %.2f m of the reference", max_dist)
        return float("nan")
    return float(d.mean())


def timing_summary(timings, stages=STAGES) -> dict:
    """``{stage: (mean, p95)}`` in ms over frames that recorded the stage."""
    out = {}
    for name, key in stages.items():
        vals = np.array([t[key] for t in timings if key in t], dtype=float)
        if len(vals):
            out[name] = (float(vals.mean()), float(np.percentile(vals, 95)))
    return out


def align_to_first(poses) -> list[Pose]:
    """Express a trajectory relative to its first pose."""
    inv = poses[0].inverse()
    return [inv @ T for T in poses]
