"""Synthetic LiDAR-like scenes with known trajectories.

A scene is a list of primitives (rectangles, boxes, poles, beams, blobs) over a
ground plane at z = 0, plus a trajectory. Each frame samples every primitive at
a fixed surface density, keeps what lies within sensor range, and expresses the
result in the sensor frame with Gaussian noise. No occlusion is modelled.
Everything is reproducible from ``(seed, frame)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import PointCloud, Pose, apply, rot_z, so3_exp, so3_log


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)
    trajectory: dict = field(default_factory=lambda: {"kind": "static", "frames": 1})
    noise: float = 0.0
    surface_density: float = 20.0
    line_density: float = 60.0
    ground_density: float = 4.0
    ground: bool = True
    max_range: float = 40.0
    sensor_height: float = 1.8
    motion_distortion: bool = False
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @property
    def n_frames(self) -> int:
        return len(trajectory_poses(self))


# ------------------------------------------------------------------ trajectories


def rounded_square_path(side: float, radius: float, step: float, frames: int) -> list[Pose]:
    """Counter-clockwise rounded square starting at the lower-left straight,
    heading +x, arc-length sampled every ``step`` metres."""
    straight = side - 2 * radius
    if straight < 0:
        raise ValueError("corner radius too large for side length")
    seg = [straight, np.pi * radius / 2] * 4
    perim = sum(seg)
    poses = []
    for k in range(frames):
        s = (k * step) % perim
        # start of each straight/arc piece
        x, y, yaw = radius, 0.0, 0.0
        for i, L in enumerate(seg):
            if s <= L or i == len(seg) - 1:
                if i % 2 == 0:
                    x += s * np.cos(yaw)
                    y += s * np.sin(yaw)
                else:
                    a = s / radius
                    cx, cy = x - radius * np.sin(yaw), y + radius * np.cos(yaw)
                    yaw_new = yaw + a
                    x, y = cx + radius * np.sin(yaw_new), cy - radius * np.cos(yaw_new)
                    yaw = yaw_new
                break
            if i % 2 == 0:
                x += L * np.cos(yaw)
                y += L * np.sin(yaw)
            else:
                cx, cy = x - radius * np.sin(yaw), y + radius * np.cos(yaw)
                yaw += np.pi / 2
                x, y = cx + radius * np.sin(yaw), cy - radius * np.cos(yaw)
            s -= L
        poses.append(Pose(rot_z(yaw), (x, y, 0.0)))
    return poses


def trajectory_poses(scene: SyntheticScene) -> list[Pose]:
    """Ground-truth sensor poses (world <- sensor), sensor height included."""
    tr = scene.trajectory
    kind = tr.get("kind", "static")
    n = int(tr.get("frames", 1))
    lift = Pose(np.eye(3), (0.0, 0.0, scene.sensor_height))
    if kind == "static":
        base = [Pose.identity()] * n
    elif kind == "line":
        step = float(tr.get("step", 0.5))
        base = [Pose(np.eye(3), (k * step, 0.0, 0.0)) for k in range(n)]
    elif kind == "square":
        base = rounded_square_path(float(tr.get("side", 25.0)), float(tr.get("radius", 6.0)), float(tr.get("step", 0.5)), n)
    elif kind == "poses":
        base = [Pose.from_matrix(np.vstack([np.asarray(m, float).reshape(3, 4), [0, 0, 0, 1]])) for m in tr["poses"]]
    else:
        raise ValueError(f"unknown trajectory kind '{kind}'")
    return [lift @ b for b in base]


# --------------------------------------------------------------------- sampling


def _rect(rng, origin, u, v, density):
    origin, u, v = (np.asarray(a, float) for a in (origin, u, v))
    area = np.linalg.norm(np.cross(u, v))
    n = int(round(area * density))
    st = rng.random((n, 2))
    return origin + st[:, :1] * u + st[:, 1:] * v


def _box_faces(center, size, yaw):
    c = np.asarray(center, float)
    dx, dy, dz = (float(s) for s in size)
    R = rot_z(float(yaw))
    ex, ey, ez = R[:, 0] * dx, R[:, 1] * dy, np.array([0.0, 0.0, dz])
    o = c - ex / 2 - ey / 2
    return [
        (o, ex, ez), (o + ey, ex, ez), (o, ey, ez), (o + ex, ey, ez),
        (o + ez, ex, ey),
    ]


def _segment(rng, a, b, radius, density):
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    L = np.linalg.norm(axis)
    n = int(round(L * density))
    t = rng.random(n)
    pts = a + t[:, None] * axis
    if radius > 0:
        d = axis / L
        e1 = np.cross(d, [0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.cross(d, [1.0, 0.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(d, e1)
        th = rng.random(n) * 2 * np.pi
        pts = pts + radius * (np.cos(th)[:, None] * e1 + np.sin(th)[:, None] * e2)
    return pts


def _sample_primitive(rng, prim, scene, frame):
    kind = prim["type"]
    shift = np.asarray(prim.get("velocity", (0.0, 0.0, 0.0)), float) * frame
    if kind == "plane":
        pts = _rect(rng, np.asarray(prim["origin"], float) + shift, prim["u"], prim["v"], prim.get("density", scene.surface_density))
    elif kind == "box":
        faces = _box_faces(np.asarray(prim["center"], float) + shift, prim["size"], prim.get("yaw", 0.0))
        dens = prim.get("density", scene.surface_density)
        pts = np.vstack([_rect(rng, o, u, v, dens) for o, u, v in faces])
    elif kind == "pole":
        base = np.asarray(prim["base"], float) + shift
        pts = _segment(rng, base, base + [0.0, 0.0, prim["height"]], prim.get("radius", 0.0), prim.get("density", scene.line_density))
    elif kind == "beam":
        pts = _segment(rng, np.asarray(prim["start"], float) + shift, np.asarray(prim["end"], float) + shift, prim.get("radius", 0.0), prim.get("density", scene.line_density))
    elif kind == "blob":
        n = int(prim.get("points", 200))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = prim["radius"] * rng.random(n) ** (1 / 3)
        pts = np.asarray(prim["center"], float) + shift + d * r[:, None]
    else:
        raise ValueError(f"unknown primitive type '{kind}'")
    inten = np.full(len(pts), float(prim.get("intensity", 100.0)))
    return pts, inten


def generate_scene(scene: SyntheticScene, frame: int, poses: list[Pose] | None = None) -> tuple[PointCloud, Pose]:
    """Sensor-frame cloud of ``frame`` and its ground-truth world pose."""
    poses = poses if poses is not None else trajectory_poses(scene)
    T = poses[frame]
    rng = np.random.default_rng([scene.seed, frame])
    pts, inten = [], []
    for prim in scene.primitives:
        p, i = _sample_primitive(rng, prim, scene, frame)
        pts.append(p)
        inten.append(i)
    if scene.ground:
        R = scene.max_range
        n = int(round(np.pi * R * R * scene.ground_density))
        r = R * np.sqrt(rng.random(n))
        a = rng.random(n) * 2 * np.pi
        g = np.column_stack([T.t[0] + r * np.cos(a), T.t[1] + r * np.sin(a), np.zeros(n)])
        pts.append(g)
        inten.append(np.full(n, 30.0))
    world = np.vstack(pts) if pts else np.zeros((0, 3))
    inten = np.concatenate(inten) if inten else np.zeros(0)
    keep = np.linalg.norm(world - T.t, axis=1) <= scene.max_range
    world, inten = world[keep], inten[keep]
    inten = np.clip(inten + rng.uniform(-3.0, 3.0, len(inten)), 0.0, 255.0)
    world = world + rng.normal(scale=scene.noise, size=world.shape) if scene.noise > 0 else world
    local = apply(T.inverse(), world)
    ratio = None
    if scene.motion_distortion and frame > 0:
        # spinning sensor: ratio 1 at azimuth -pi (frame start) down to 0 at +pi
        az = np.arctan2(local[:, 1], local[:, 0])
        ratio = np.clip((np.pi - az) / (2 * np.pi), 0.0, 1.0)
        motion = T.inverse() @ poses[frame - 1]
        # sensor frame at ratio s is interpolate(motion, s) relative to frame end
        Rs = so3_exp(np.outer(ratio, so3_log(motion.R)))
        local = np.einsum("nji,nj->ni", Rs, local - np.outer(ratio, motion.t))
    elif scene.motion_distortion:
        ratio = np.zeros(len(local))
    return PointCloud(local, inten, ratio, frame_id=frame), T


# ----------------------------------------------------------------- scene library


def structured_scene(noise: float = 0.02, points: int = 20000, seed: int = 0) -> SyntheticScene:
    """Three facades, ground, four pillars and two beams around the origin."""
    prims = [
        {"type": "plane", "origin": [-12, 10, 0], "u": [24, 0, 0], "v": [0, 0, 8], "intensity": 120},
        {"type": "plane", "origin": [14, -12, 0], "u": [0, 20, 0], "v": [0, 0, 6], "intensity": 90},
        {"type": "plane", "origin": [-15, -14, 0], "u": [12, -6, 0], "v": [0, 0, 7], "intensity": 150},
        {"type": "pole", "base": [5, 4, 0], "height": 6, "intensity": 200},
        {"type": "pole", "base": [-6, 3, 0], "height": 5, "intensity": 210},
        {"type": "pole", "base": [7, -7, 0], "height": 7, "intensity": 190},
        {"type": "pole", "base": [-4, -8, 0], "height": 6, "intensity": 180},
        {"type": "beam", "start": [-8, 6, 4.5], "end": [8, 6, 4.5], "intensity": 160},
        {"type": "beam", "start": [10, -10, 5.0], "end": [10, 6, 5.0], "intensity": 170},
    ]
    scene = SyntheticScene(prims, {"kind": "static", "frames": 2}, noise=noise, max_range=30.0, seed=seed)
    _scale_density(scene, points)
    return scene


def square_loop_scene(noise: float = 0.02, frames: int = 200, step: float = 0.5, side: float = 25.0, seed: int = 0,
                      points: int = 12000) -> SyntheticScene:
    """Rounded-square loop through a small block of buildings, poles, beams and trees."""
    rng = np.random.default_rng(1000 + seed)
    prims = []
    inner, outer = 7.0, 7.0
    # inner block, broken into segments with gaps
    lo, hi = inner, side - inner
    for (a, b) in (([lo, lo], [hi, lo]), ([hi, lo], [hi, hi]), ([hi, hi], [lo, hi]), ([lo, hi], [lo, lo])):
        a, b = np.array(a, float), np.array(b, float)
        d = b - a
        prims.append({"type": "plane", "origin": [*a, 0], "u": [*(0.55 * d), 0], "v": [0, 0, 9], "intensity": 110})
        prims.append({"type": "plane", "origin": [*(a + 0.65 * d), 0], "u": [*(0.35 * d), 0], "v": [0, 0, 6], "intensity": 140})
    # outer facades
    lo, hi = -outer, side + outer
    for k, (a, b) in enumerate((([lo, lo], [hi, lo]), ([hi, lo], [hi, hi]), ([hi, hi], [lo, hi]), ([lo, hi], [lo, lo]))):
        a, b = np.array(a, float), np.array(b, float)
        d = b - a
        cuts = np.sort(rng.uniform(0.15, 0.85, 2))
        for s0, s1, h in ((0.0, cuts[0] - 0.06, 8 + k), (cuts[0], cuts[1] - 0.05, 12 - k), (cuts[1], 1.0, 7 + 2 * k)):
            prims.append({"type": "plane", "origin": [*(a + s0 * d), 0], "u": [*((s1 - s0) * d), 0], "v": [0, 0, h], "intensity": 80 + 20 * k})
    # poles along the road, beams overhead, parked boxes, trees
    for k in range(16):
        t = k / 16
        side_k = k // 4
        s = (t * 4) % 1
        base = [[s * side, -3.5], [side + 3.5, s * side], [side - s * side, side + 3.5], [-3.5, side - s * side]][side_k]
        prims.append({"type": "pole", "base": [base[0] + rng.uniform(-1, 1), base[1], 0], "height": float(rng.uniform(4, 7)), "intensity": 200})
    prims.append({"type": "beam", "start": [2, -4.5, 5.0], "end": [20, -4.5, 5.0], "intensity": 170})
    prims.append({"type": "beam", "start": [side + 4.5, 4, 4.5], "end": [side + 4.5, 20, 4.5], "intensity": 175})
    prims.append({"type": "beam", "start": [22, side + 4.5, 5.5], "end": [6, side + 4.5, 5.5], "intensity": 165})
    prims.append({"type": "beam", "start": [-4.5, 21, 4.0], "end": [-4.5, 5, 4.0], "intensity": 160})
    for k in range(8):
        c = rng.uniform(-2, side + 2, 2)
        edge = rng.integers(4)
        c = [[c[0], -5.5], [side + 5.5, c[1]], [c[0], side + 5.5], [-5.5, c[1]]][edge]
        prims.append({"type": "box", "center": [c[0], c[1], 0.0], "size": [4.2, 1.8, 1.5], "yaw": float(edge * np.pi / 2), "intensity": 60})
    for k in range(10):
        c = rng.uniform(-4, side + 4, 2)
        if inner - 1 < c[0] < side - inner + 1 and inner - 1 < c[1] < side - inner + 1:
            c = c * 0.3
        prims.append({"type": "blob", "center": [float(c[0]), float(c[1]), float(rng.uniform(2.5, 4.0))], "radius": 1.2, "points": 300, "intensity": 50})
    traj = {"kind": "square", "side": side, "radius": 6.0, "step": step, "frames": frames}
    scene = SyntheticScene(prims, traj, noise=noise, max_range=35.0, seed=seed)
    _scale_density(scene, points, frame=0)
    return scene


def _scale_density(scene: SyntheticScene, points: int, frame: int = 0) -> None:
    """Rescale all densities so ``frame`` has roughly ``points`` points."""
    cloud, _ = generate_scene(scene, frame)
    if len(cloud) == 0:
        return
    f = points / len(cloud)
    scene.surface_density *= f
    scene.line_density *= f
    scene.ground_density *= f
    for p in scene.primitives:
        if p["type"] == "blob":
            p["points"] = max(10, int(round(p["points"] * f)))
