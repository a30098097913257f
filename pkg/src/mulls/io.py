"""KITTI readers/writers, PLY export and KITTI-specific preprocessing."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PointCloud, Pose, orthonormalize


class MalformedFileError(ValueError):
    pass


def read_kitti_bin(path, frame_id: int = 0) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(data[:, :3], data[:, 3], frame_id=frame_id)


def write_kitti_bin(cloud: PointCloud, path) -> None:
    data = np.empty((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.xyz
    data[:, 3] = cloud.intensity
    Path(path).write_bytes(data.tobytes())


def parse_kitti_poses(text: str, source: str = "<string>") -> list[Pose]:
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise MalformedFileError(f"{source}:{lineno}: expected 12 values, got {len(tokens)}")
        try:
            M = np.array([float(x) for x in tokens]).reshape(3, 4)
        except ValueError:
            raise MalformedFileError(f"{source}:{lineno}: non-numeric value") from None
        # text precision leaves ~1e-9 orthogonality error; always project
        poses.append(Pose(orthonormalize(M[:, :3]), M[:, 3]))
    return poses


def read_kitti_poses(path) -> list[Pose]:
    return parse_kitti_poses(Path(path).read_text(), str(path))


def write_kitti_poses(poses, path) -> None:
    with open(path, "w") as f:
        for T in poses:
            f.write(" ".join(f"{v:.12e}" for v in T.kitti_row()) + "\n")


def read_kitti_calib(path) -> Pose:
    """The ``Tr`` line of a KITTI ``calib.txt``: velodyne -> left camera."""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        key, _, rest = line.partition(":")
        if key.strip() != "Tr":
            continue
        vals = rest.split()
        if len(vals) != 12:
            raise MalformedFileError(f"{path}:{lineno}: expected 12 values after 'Tr:', got {len(vals)}")
        M = np.array([float(x) for x in vals]).reshape(3, 4)
        return Pose(orthonormalize(M[:, :3]), M[:, 3])
    raise MalformedFileError(f"{path}: no 'Tr:' line")


def camera_to_lidar(poses, Tr: Pose) -> list[Pose]:
    """Re-express camera-frame ground truth as velodyne poses: ``Tr^-1 T Tr``."""
    inv = Tr.inverse()
    return [inv @ T @ Tr for T in poses]


TRAJECTORY_HEADER = ["frame_id"] + [f"T{r}{c}" for r in range(3) for c in range(4)] + [
    "t_feature_ms",
    "t_reg_ms",
    "t_map_ms",
    "t_total_ms",
]


@dataclass
class TrajectoryRecord:
    """One row per frame: index, pose and per-stage wall-clock milliseconds."""

    frame_ids: list[int] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)

    def append(self, frame_id: int, pose: Pose, timing: dict | None = None) -> None:
        if self.frame_ids and frame_id <= self.frame_ids[-1]:
            raise ValueError(f"frame id {frame_id} not increasing")
        self.frame_ids.append(frame_id)
        self.poses.append(pose)
        self.timings.append(dict(timing or {}))

    def __len__(self) -> int:
        return len(self.poses)

    def with_poses(self, poses) -> "TrajectoryRecord":
        return TrajectoryRecord(list(self.frame_ids), list(poses), [dict(t) for t in self.timings])


def write_trajectory_csv(record: TrajectoryRecord, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_HEADER)
        for fid, T, tm in zip(record.frame_ids, record.poses, record.timings):
            row = [fid] + [f"{v:.12e}" for v in T.kitti_row()]
            row += [f"{tm.get(k, 0.0):.3f}" for k in ("feature", "registration", "map", "total")]
            w.writerow(row)


def read_trajectory_csv(path) -> TrajectoryRecord:
    rec = TrajectoryRecord()
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0] == "frame_id":
                continue
            if len(row) < 13:
                raise MalformedFileError(f"{path}:{lineno}: expected at least 13 columns")
            M = np.array([float(x) for x in row[1:13]]).reshape(3, 4)
            timing = {}
            if len(row) >= 17:
                timing = dict(zip(("feature", "registration", "map", "total"), map(float, row[13:17])))
            rec.append(int(row[0]), Pose(orthonormalize(M[:, :3]), M[:, 3]), timing)
    return rec


def read_trajectory(path) -> list[Pose]:
    """Poses from either a trajectory CSV or a KITTI pose text file."""
    path = Path(path)
    with open(path) as f:
        first = f.readline()
    if first.startswith("frame_id") or "," in first:
        return read_trajectory_csv(path).poses
    return read_kitti_poses(path)


def write_ply(cloud: PointCloud, path, labels=None, binary: bool = True) -> None:
    n = len(cloud)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z", "property float intensity"]
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != n:
            raise ValueError("one label per point required")
        header.append("property uchar class")
    header.append("end_header")
    dtype = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")]
    if labels is not None:
        dtype.append(("class", "u1"))
    rec = np.empty(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["intensity"] = cloud.intensity
    if labels is not None:
        rec["class"] = labels.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(rec.tobytes())
        else:
            for r in rec:
                vals = [repr(float(np.float32(r[k]))) for k in ("x", "y", "z", "intensity")]
                if labels is not None:
                    vals.append(str(int(r["class"])))
                f.write((" ".join(vals) + "\n").encode("ascii"))


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
    "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int32": "<i4", "float32": "<f4",
    "float64": "<f8",
}


def read_ply(path) -> tuple[PointCloud, np.ndarray | None]:
    """Reader for single-element vertex PLYs with scalar properties."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise MalformedFileError(f"{path}: not a PLY file")
        fmt, n, props = None, 0, []
        while True:
            line = f.readline()
            if not line:
                raise MalformedFileError(f"{path}: missing end_header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                if tok[1] != "vertex":
                    raise MalformedFileError(f"{path}: unsupported element '{tok[1]}'")
                n = int(tok[2])
            elif tok[0] == "property":
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        dtype = np.dtype(props)
        if fmt == "binary_little_endian":
            rec = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype, count=n)
        elif fmt == "ascii":
            rows = np.loadtxt(f, ndmin=2, max_rows=n) if n else np.zeros((0, len(props)))
            rec = np.empty(n, dtype=dtype)
            for i, (name, _) in enumerate(props):
                rec[name] = rows[:, i]
        else:
            raise MalformedFileError(f"{path}: unsupported format '{fmt}'")
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    inten = rec["intensity"] if "intensity" in rec.dtype.names else None
    labels = np.array(rec["class"]) if "class" in rec.dtype.names else None
    return PointCloud(xyz, inten), labels


def correct_intrinsic_angle(cloud: PointCloud, correction: float) -> PointCloud:
    """Raise every point's elevation angle by ``correction`` radians about the sensor origin."""
    if not np.isfinite(correction):
        raise ValueError("correction must be finite")
    if correction == 0.0 or len(cloud) == 0:
        return cloud
    p = cloud.xyz.astype(np.float64) - cloud.sensor_origin
    rho = np.hypot(p[:, 0], p[:, 1])
    c, s = np.cos(correction), np.sin(correction)
    # rotate (rho, z) in the vertical plane through the point; azimuth unchanged
    new_rho = c * rho - s * p[:, 2]
    new_z = s * rho + c * p[:, 2]
    scale = np.divide(new_rho, rho, out=np.zeros_like(rho), where=rho > 0)
    out = np.empty_like(p)
    out[:, 0] = p[:, 0] * scale
    out[:, 1] = p[:, 1] * scale
    out[:, 2] = new_z
    on_axis = rho == 0
    out[on_axis] = p[on_axis]
    return PointCloud(out + cloud.sensor_origin, cloud.intensity, cloud.timestamp_ratio, cloud.frame_id, cloud.sensor_origin)


def list_frames(directory) -> list[Path]:
    """Sorted ``*.bin`` frames, looking inside ``velodyne/`` when present."""
    d = Path(directory)
    if (d / "velodyne").is_dir():
        d = d / "velodyne"
    return sorted(d.glob("*.bin"))
