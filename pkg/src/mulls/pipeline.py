"""Front-end and full SLAM runs over a sequence of clouds."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .backend import Backend
from .config import RunConfig
from .frontend import Odometry
from .io import TrajectoryRecord

log = logging.getLogger(__name__)


@dataclass
class SlamResult:
    odometry: TrajectoryRecord
    corrected: TrajectoryRecord
    backend: Backend | None = None
    untracked: list = field(default_factory=list)


def run_odometry(clouds, cfg: RunConfig | None = None, progress=None) -> tuple[TrajectoryRecord, list]:
    odo = Odometry(cfg)
    for k, cloud in enumerate(clouds):
        odo.process(cloud)
        if progress:
            progress(k, odo)
    return odo.trajectory, list(odo.state.untracked)


def run_slam(clouds, cfg: RunConfig | None = None, progress=None) -> SlamResult:
    """Odometry with the back-end fed every tracked frame; corrections touch output poses only."""
    cfg = cfg or RunConfig()
    odo = Odometry(cfg)
    be = Backend(cfg)
    for k, cloud in enumerate(clouds):
        pose = odo.process(cloud)
        frame = odo.state.last_frame
        be.add_frame(frame.frame_id, pose, frame.dense)
        if progress:
            progress(k, odo)
    be.finalize()
    corrected = be.corrected_poses()
    rec = odo.trajectory
    poses = [corrected.get(fid, T) for fid, T in zip(rec.frame_ids, rec.poses)]
    return SlamResult(rec, rec.with_poses(poses), be, list(odo.state.untracked))
