"""Command-line driver: odom, slam, eval, scene, bench."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .core import PointCloud
from .evaluation import endpoint_error, kitti_ate_are, mapping_error, timing_summary
from .io import (MalformedFileError, camera_to_lidar, correct_intrinsic_angle, list_frames, read_kitti_bin, read_kitti_calib,
                 read_ply, read_trajectory, write_kitti_bin, write_kitti_poses, write_ply, write_trajectory_csv)
from .pipeline import run_odometry, run_slam
from .synthetic import SyntheticScene, generate_scene, square_loop_scene, structured_scene, trajectory_poses

log = logging.getLogger("mulls")

PRESETS = {"square": square_loop_scene, "structured": structured_scene}


class UsageError(ValueError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for kv in args.set or []:
        key, sep, value = kv.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got '{kv}'")
        cfg.set(key.strip(), value.strip())
    cfg.validate()
    return cfg


def _frames(directory, cfg: RunConfig, limit: int | None = None):
    paths = list_frames(directory)
    if not paths:
        raise UsageError(f"no *.bin frames found in {directory}")
    if limit:
        paths = paths[:limit]
    angle = np.radians(cfg.features.intrinsic_angle_deg)

    def gen():
        for k, p in enumerate(paths):
            cloud = read_kitti_bin(p, frame_id=k)
            yield correct_intrinsic_angle(cloud, angle) if angle else cloud

    return gen(), len(paths)


def _progress(every: int):
    def cb(k, odo):
        if every and (k + 1) % every == 0:
            log.info("frame %d  %.1f ms", k + 1, odo.trajectory.timings[-1].get("total", 0.0))
    return cb


def cmd_odom(args) -> int:
    cfg = _config(args)
    frames, n = _frames(args.dir, cfg, args.limit)
    rec, untracked = run_odometry(frames, cfg, _progress(args.progress))
    write_trajectory_csv(rec, args.out)
    print(f"wrote {len(rec)} poses to {args.out}")
    if untracked:
        print(f"untracked frames: {untracked}")
    return 0


def cmd_slam(args) -> int:
    cfg = _config(args)
    frames, n = _frames(args.dir, cfg, args.limit)
    res = run_slam(frames, cfg, _progress(args.progress))
    write_trajectory_csv(res.corrected, args.out)
    if args.odom_out:
        write_trajectory_csv(res.odometry, args.odom_out)
    be = res.backend
    print(f"wrote {len(res.corrected)} poses to {args.out}; {len(be.submaps)} submaps, {len(be.loop_edges)} loop edges")
    if args.graph:
        from .backend import write_graph
        write_graph(be.graph, args.graph)
    if args.map:
        xyz, inten, labels = [], [], []
        for sm in be.submaps:
            pc, lab = sm.features.to_point_cloud()
            xyz.append(be.graph.nodes[sm.id].apply(pc.xyz))
            inten.append(pc.intensity)
            labels.append(lab)
        write_ply(PointCloud(np.concatenate(xyz), np.concatenate(inten)), args.map, np.concatenate(labels))
        print(f"wrote map to {args.map}")
    return 0


def cmd_eval(args) -> int:
    est = read_trajectory(args.est)
    gt = read_trajectory(args.gt)
    if args.calib:
        gt = camera_to_lidar(gt, read_kitti_calib(args.calib))
    if args.align_first:
        n = min(len(est), len(gt))
        est, gt = est[:n], gt[:n]
    rep = kitti_ate_are(est, gt)
    if args.map:
        if not args.ref:
            raise UsageError("--map needs --ref")
        m, _ = read_ply(args.map)
        r, _ = read_ply(args.ref)
        rep.mapping_error = mapping_error(m.xyz, r.xyz, args.max_dist)
    if rep.empty and rep.mapping_error is None:
        print(f"endpoint error {endpoint_error(est, gt):.4f} m")
    print(rep.format())
    return 0


def cmd_scene(args) -> int:
    if args.spec:
        scene = SyntheticScene.load(args.spec)
    else:
        scene = PRESETS[args.preset]()
    out = Path(args.out)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    poses = trajectory_poses(scene)
    n = min(len(poses), args.frames) if args.frames else len(poses)
    for k in range(n):
        cloud, _ = generate_scene(scene, k, poses)
        write_kitti_bin(cloud, out / "velodyne" / f"{k:06d}.bin")
    write_kitti_poses(poses[:n], out / "poses.txt")
    scene.save(out / "scene.json")
    print(f"wrote {n} frames to {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    scene = square_loop_scene(points=args.points, frames=max(args.frames, 2))
    poses = trajectory_poses(scene)
    clouds = [generate_scene(scene, k, poses)[0] for k in range(args.frames)]
    t0 = time.perf_counter()
    rec, _ = run_odometry(clouds, cfg)
    wall = time.perf_counter() - t0
    timings = rec.timings[1:]
    summary = timing_summary(timings)
    print(f"{args.frames} frames, {args.points} points/frame, {wall:.1f} s wall")
    print(f"{'stage':>22s}  {'mean ms':>9s}  {'p95 ms':>9s}")
    for name, (mean, p95) in summary.items():
        print(f"{name:>22s}  {mean:9.2f}  {p95:9.2f}")
    iters = np.array([t.get("iterations", 0) for t in timings], dtype=float)
    if iters.sum() > 0:
        per = lambda key: np.sum([t[key] for t in timings]) / iters.sum()
        print(f"{'per ICP iteration':>22s}  association {per('association'):.2f} ms, estimation {per('estimation'):.3f} ms")
    print(f"endpoint error {endpoint_error(rec.poses, poses[:len(rec)]):.4f} m")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mulls", description="LiDAR odometry and SLAM with multi-metric linear least-squares ICP.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and loop-closure decisions")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key (repeatable)")

    sp = sub.add_parser("odom", help="run the odometry front-end over a directory of KITTI .bin frames")
    sp.add_argument("dir", help="frame directory (or a sequence directory containing velodyne/)")
    with_config(sp)
    sp.add_argument("--out", required=True, help="trajectory CSV to write")
    sp.add_argument("--limit", type=int, help="process only the first N frames")
    sp.add_argument("--progress", type=int, default=0, help="log every N frames (with -v)")
    sp.set_defaults(func=cmd_odom)

    sp = sub.add_parser("slam", help="odometry plus submap loop closure and pose-graph optimisation")
    sp.add_argument("dir", help="frame directory (or a sequence directory containing velodyne/)")
    with_config(sp)
    sp.add_argument("--out", required=True, help="corrected trajectory CSV to write")
    sp.add_argument("--odom-out", help="also write the uncorrected odometry trajectory")
    sp.add_argument("--map", help="write the corrected feature map as PLY")
    sp.add_argument("--graph", help="write the pose graph as text (NODE/EDGE lines)")
    sp.add_argument("--limit", type=int, help="process only the first N frames")
    sp.add_argument("--progress", type=int, default=0, help="log every N frames (with -v)")
    sp.set_defaults(func=cmd_slam)

    sp = sub.add_parser("eval", help="KITTI-style ATE/ARE and optional mapping error")
    sp.add_argument("--est", required=True, help="estimated trajectory (CSV or KITTI pose text)")
    sp.add_argument("--gt", required=True, help="ground-truth trajectory (KITTI pose text or CSV)")
    sp.add_argument("--calib", help="KITTI calib.txt; converts camera-frame ground truth to the velodyne frame")
    sp.add_argument("--align-first", action="store_true", help="truncate both trajectories to the shorter one")
    sp.add_argument("--map", help="map PLY for the mapping error")
    sp.add_argument("--ref", help="reference PLY for the mapping error")
    sp.add_argument("--max-dist", type=float, default=2.0, help="ignore map points farther than this from the reference (m)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("scene", help="write synthetic frames, ground-truth poses and the scene description")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="scene JSON file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in scene")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--frames", type=int, help="write only the first N frames")
    sp.set_defaults(func=cmd_scene)

    sp = sub.add_parser("bench", help="per-stage timing of the front-end on the synthetic square loop")
    with_config(sp)
    sp.add_argument("--frames", type=int, default=30, help="number of frames")
    sp.add_argument("--points", type=int, default=12000, help="points per frame")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    for name in ("limit", "frames", "points", "progress"):
        v = getattr(args, name, None)
        if v is not None and v < 0 or (name in ("frames", "points") and v is not None and v == 0):
            print(f"error: --{name} must be positive", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, MalformedFileError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
