"""Submap-based loop closure and pose-graph optimisation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import BackendConfig, RunConfig
from .core import Pose, rotation_to_quat, so3_exp
from .features import CLASSES, FeatureClass, FeatureCloud, FeatureSet, encode_ncc, voxel_downsample
from .registration import FeatureIndex, RegistrationError, mulls_icp

log = logging.getLogger(__name__)


class LoopRejected(RuntimeError):
    """A loop candidate failed one of the closure checks."""


class GraphError(ValueError):
    pass


# ------------------------------------------------------------------------ submaps


@dataclass
class Submap:
    """Frames aggregated into the reference frame (the last member frame).

    ``relative_poses[k]`` maps member frame k into the reference frame.
    """

    id: int
    reference_pose: Pose
    features: FeatureCloud
    ncc: np.ndarray
    frame_ids: list
    relative_poses: list
    accumulated_translation: float = 0.0
    accumulated_rotation: float = 0.0
    _index: FeatureIndex | None = field(default=None, repr=False)

    @property
    def vertices(self) -> FeatureSet:
        return self.features[FeatureClass.VERTEX]

    @property
    def index(self) -> FeatureIndex:
        if self._index is None:
            self._index = FeatureIndex(self.features)
        return self._index

    @property
    def n_frames(self) -> int:
        return len(self.frame_ids)


class SubmapAccumulator:
    """Frames since the last submap together with travelled distance and rotation."""

    def __init__(self):
        self.frame_ids, self.poses, self.features = [], [], []
        self.translation = 0.0
        self.rotation = 0.0

    def add(self, frame_id: int, pose: Pose, features: FeatureCloud | None = None) -> None:
        if self.poses:
            step = self.poses[-1].inverse() @ pose
            self.translation += float(np.linalg.norm(step.t))
            self.rotation += step.angle
        self.frame_ids.append(frame_id)
        self.poses.append(pose)
        self.features.append(features if features is not None else FeatureCloud())

    def __len__(self) -> int:
        return len(self.frame_ids)

    def clear(self) -> None:
        self.__init__()


def build_submap(acc: SubmapAccumulator, submap_id: int, cfg: RunConfig | None = None) -> Submap:
    """Aggregate the accumulated frames into the last frame's coordinates and encode NCC."""
    cfg = cfg or RunConfig()
    if len(acc) == 0:
        raise ValueError("no frames to build a submap from")
    ref = acc.poses[-1]
    ref_inv = ref.inverse()
    rel = [ref_inv @ T for T in acc.poses]
    merged = FeatureCloud.concat(fc.transformed(R) for fc, R in zip(acc.features, rel))
    voxel = {c: cfg.backend.submap_voxel for c in CLASSES}
    voxel[FeatureClass.GROUND] = max(cfg.backend.submap_voxel, cfg.ground.voxel_dense)
    out = FeatureCloud()
    for c, s in merged.items():
        out[c] = s.subset(voxel_downsample(s.xyz, voxel[c], s.score)) if len(s) else s
    f = cfg.features
    ncc = encode_ncc(out[FeatureClass.VERTEX], out, f.ncc_radius, f.intensity_max, f.height_max)
    return Submap(submap_id, ref, out, ncc, list(acc.frame_ids), rel, acc.translation, acc.rotation)


def should_spawn(acc: SubmapAccumulator, cfg: BackendConfig) -> bool:
    return (len(acc) >= cfg.submap_max_frames
            or acc.translation >= cfg.submap_max_trans
            or acc.rotation >= np.radians(cfg.submap_max_rot_deg))


def maybe_spawn_submap(acc: SubmapAccumulator, submap_id: int, cfg: RunConfig | None = None) -> Submap | None:
    """Build a submap and reset ``acc`` once any trigger fires."""
    cfg = cfg or RunConfig()
    if len(acc) == 0 or not should_spawn(acc, cfg.backend):
        return None
    sm = build_submap(acc, submap_id, cfg)
    acc.clear()
    return sm


# ----------------------------------------------------------------------- graph


@dataclass
class PoseGraphEdge:
    """``measurement`` maps node ``to`` coordinates into node ``source`` coordinates."""

    source: int
    target: int
    measurement: Pose
    information: np.ndarray
    kind: str = "adjacent"

    def __post_init__(self):
        if self.source == self.target:
            raise GraphError("edge endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6) or not np.all(np.isfinite(info)):
            raise GraphError("information must be a finite 6x6 matrix")
        self.information = 0.5 * (info + info.T)


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    fixed: int | None = None

    def add_node(self, node_id: int, pose: Pose, fixed: bool = False) -> None:
        self.nodes[node_id] = pose
        if fixed or self.fixed is None:
            self.fixed = node_id

    def add_edge(self, edge: PoseGraphEdge) -> None:
        for n in (edge.source, edge.target):
            if n not in self.nodes:
                raise GraphError(f"edge references unknown node {n}")
        self.edges.append(edge)

    def components(self) -> list[list[int]]:
        parent = {n: n for n in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            parent[find(e.source)] = find(e.target)
        groups = {}
        for n in sorted(self.nodes):
            groups.setdefault(find(n), []).append(n)
        return sorted(groups.values())


def edge_residual(Xi: Pose, Xj: Pose, Z: Pose) -> np.ndarray:
    """``[t, 2 q_vec]`` of ``Xi^-1 Xj Z^-1``; zero when the estimate agrees with ``Z``."""
    E = Xi.inverse() @ Xj @ Z.inverse()
    q = rotation_to_quat(E.R)
    if q[3] < 0:
        q = -q
    return np.concatenate([E.t, 2.0 * q[:3]])


def graph_cost(graph: PoseGraph, poses: dict | None = None) -> float:
    poses = graph.nodes if poses is None else poses
    total = 0.0
    for e in graph.edges:
        r = edge_residual(poses[e.source], poses[e.target], e.measurement)
        total += float(r @ e.information @ r)
    return total


def _perturb(X: Pose, d) -> Pose:
    # left perturbation, translation then rotation vector
    return Pose(so3_exp(d[3:]) @ X.R, X.t + d[:3])


def _edge_jacobians(Xi: Pose, Xj: Pose, Z: Pose, h: float = 1e-5):
    Ji, Jj = np.empty((6, 6)), np.empty((6, 6))
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        Ji[:, k] = (edge_residual(_perturb(Xi, d), Xj, Z) - edge_residual(_perturb(Xi, -d), Xj, Z)) / (2 * h)
        Jj[:, k] = (edge_residual(Xi, _perturb(Xj, d), Z) - edge_residual(Xi, _perturb(Xj, -d), Z)) / (2 * h)
    return Ji, Jj


def optimize_graph(graph: PoseGraph, max_iter: int = 50, rel_tol: float = 1e-9, step_tol: float = 1e-10) -> dict:
    """Damped Gauss-Newton over all free nodes; returns ``{id: Pose}``.

    Stops once the relative cost decrease is below ``rel_tol`` and the step is
    below ``step_tol``: with large residuals convergence is only linear, and a
    flat valley can stall the cost well before the poses settle.
    The fixed node is returned as the very same object it was given as.
    """
    if not graph.nodes:
        return {}
    comps = graph.components()
    if len(comps) > 1:
        raise GraphError(f"pose graph is disconnected: components {comps}")
    free = [n for n in sorted(graph.nodes) if n != graph.fixed]
    slot = {n: i for i, n in enumerate(free)}
    poses = dict(graph.nodes)
    if not free or not graph.edges:
        return poses
    cost = graph_cost(graph, poses)
    lam = 1e-6
    for _ in range(max_iter):
        if cost == 0.0:
            break
        H = np.zeros((6 * len(free), 6 * len(free)))
        g = np.zeros(6 * len(free))
        for e in graph.edges:
            Xi, Xj = poses[e.source], poses[e.target]
            r = edge_residual(Xi, Xj, e.measurement)
            Ji, Jj = _edge_jacobians(Xi, Xj, e.measurement)
            for n, J in ((e.source, Ji), (e.target, Jj)):
                if n not in slot:
                    continue
                a = 6 * slot[n]
                g[a:a + 6] += J.T @ e.information @ r
                for m, K in ((e.source, Ji), (e.target, Jj)):
                    if m in slot:
                        b = 6 * slot[m]
                        H[a:a + 6, b:b + 6] += J.T @ e.information @ K
        improved = False
        while lam < 1e12:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = dict(poses)
            for n in free:
                trial[n] = _perturb(poses[n], delta[6 * slot[n]:6 * slot[n] + 6])
            new_cost = graph_cost(graph, trial)
            if new_cost <= cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
        decrease = cost - new_cost
        poses, cost = trial, new_cost
        lam = max(lam / 10.0, 1e-12)
        if decrease <= rel_tol * max(cost + decrease, 1e-300) and np.abs(delta).max() <= step_tol:
            break
    return poses


def distribute_inner(submap: Submap, corrected_reference: Pose) -> list[Pose]:
    """Member frame poses under a corrected reference (chain topology: pure composition)."""
    return [corrected_reference @ R for R in submap.relative_poses]


def write_graph(graph: PoseGraph, path) -> None:
    iu = np.triu_indices(6)
    with open(path, "w") as f:
        for n in sorted(graph.nodes):
            f.write(f"NODE {n} " + " ".join(f"{v:.12e}" for v in graph.nodes[n].kitti_row()) + "\n")
        for e in graph.edges:
            vals = list(e.measurement.kitti_row()) + list(e.information[iu])
            f.write(f"EDGE {e.source} {e.target} " + " ".join(f"{v:.12e}" for v in vals) + "\n")


def read_graph(path) -> PoseGraph:
    """Inverse of :func:`write_graph`; the lowest node id becomes the fixed node."""
    g = PoseGraph()
    iu = np.triu_indices(6)
    nodes, edges = {}, []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "NODE" and len(tok) == 14:
                    nodes[int(tok[1])] = _pose_from_row(tok[2:])
                elif tok[0] == "EDGE" and len(tok) == 36:
                    info = np.zeros((6, 6))
                    info[iu] = [float(v) for v in tok[15:]]
                    info = info + np.triu(info, 1).T
                    edges.append(PoseGraphEdge(int(tok[1]), int(tok[2]), _pose_from_row(tok[3:15]), info, "edge"))
                else:
                    raise ValueError(tok[0])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: malformed graph line") from None
    for n in sorted(nodes):
        g.add_node(n, nodes[n])
    for e in edges:
        g.add_edge(e)
    return g


def _pose_from_row(vals) -> Pose:
    from .core import orthonormalize
    M = np.array([float(v) for v in vals]).reshape(3, 4)
    return Pose(orthonormalize(M[:, :3]), M[:, 3])


# ----------------------------------------------------------------- loop closure


def find_loop_candidates(submaps, current: Submap, radius: float) -> list[int]:
    """Earlier submaps within ``radius`` of ``current``, skipping its direct predecessor."""
    if radius <= 0:
        return []
    out = []
    for sm in submaps:
        if sm.id >= current.id - 1:
            continue
        if np.linalg.norm(sm.reference_pose.t - current.reference_pose.t) <= radius:
            out.append(sm.id)
    return out


def match_ncc(a: np.ndarray, b: np.ndarray, cos_min: float = 0.9, min_matches: int = 3):
    """Mutual-best cosine matches between descriptor rows; returns ``(ia, ib, similarity)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 3 or len(b) < 3:
        raise LoopRejected(f"too few descriptors ({len(a)}, {len(b)})")
    na = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    nb = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    S = na @ nb.T
    best_b = S.argmax(axis=1)
    best_a = S.argmax(axis=0)
    ia = np.flatnonzero(best_a[best_b] == np.arange(len(a)))
    ib = best_b[ia]
    sim = S[ia, ib]
    keep = sim >= cos_min
    ia, ib, sim = ia[keep], ib[keep], sim[keep]
    if len(ia) < min_matches:
        raise LoopRejected(f"only {len(ia)} descriptor matches")
    return ia, ib, sim


def horn(src, dst, weights=None) -> Pose:
    """Closed-form rigid transform ``dst ~ R src + t`` via the unit-quaternion eigenproblem."""
    R, t = horn_batch(np.asarray(src, float)[None], np.asarray(dst, float)[None],
                      None if weights is None else np.asarray(weights, float)[None])
    return Pose(R[0], t[0])


def horn_batch(src, dst, weights=None):
    """Batched :func:`horn`; ``src``, ``dst`` are (B, n, 3)."""
    w = np.ones(src.shape[:2]) if weights is None else weights
    ws = w.sum(axis=1, keepdims=True)
    cs = (w[..., None] * src).sum(axis=1) / ws
    cd = (w[..., None] * dst).sum(axis=1) / ws
    a = src - cs[:, None]
    b = dst - cd[:, None]
    M = np.einsum("bn,bni,bnj->bij", w, a, b)
    Sxx, Sxy, Sxz = M[:, 0, 0], M[:, 0, 1], M[:, 0, 2]
    Syx, Syy, Syz = M[:, 1, 0], M[:, 1, 1], M[:, 1, 2]
    Szx, Szy, Szz = M[:, 2, 0], M[:, 2, 1], M[:, 2, 2]
    N = np.empty((len(M), 4, 4))
    # quaternion order (w, x, y, z)
    N[:, 0] = np.stack([Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx], axis=1)
    N[:, 1] = np.stack([Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz], axis=1)
    N[:, 2] = np.stack([Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy], axis=1)
    N[:, 3] = np.stack([Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz], axis=1)
    _, V = np.linalg.eigh(N)
    qw, qx, qy, qz = V[:, :, 3].T
    R = np.empty((len(M), 3, 3))
    R[:, 0] = np.stack([1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)], axis=1)
    R[:, 1] = np.stack([2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)], axis=1)
    R[:, 2] = np.stack([2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)], axis=1)
    t = cd - np.einsum("bij,bj->bi", R, cs)
    return R, t


def coarse_register(src, dst, iters: int = 1000, inlier_dist: float = 1.0, min_inliers: int = 8,
                    rng=None, min_area: float = 0.05):
    """RANSAC over 3-point Horn hypotheses; returns ``(Pose, inlier mask)``.

    Samples whose triangle area is below ``min_area`` (near collinear) are skipped.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    if n < 3:
        raise LoopRejected(f"only {n} correspondences")
    rng = np.random.default_rng(rng)
    idx = np.stack([rng.choice(n, 3, replace=False) for _ in range(iters)]) if n > 3 else np.tile(np.arange(3), (1, 1))
    p = src[idx]
    q = dst[idx]
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    area_q = 0.5 * np.linalg.norm(np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]), axis=1)
    ok = (area >= min_area) & (area_q >= min_area)
    if not ok.any():
        raise LoopRejected("all samples degenerate")
    R, t = horn_batch(p[ok], q[ok])
    moved = np.einsum("bij,nj->bni", R, src) + t[:, None]
    inl = np.linalg.norm(moved - dst, axis=2) <= inlier_dist
    count = inl.sum(axis=1)
    best = int(count.argmax())
    if count[best] < min_inliers:
        raise LoopRejected(f"best hypothesis has {int(count[best])} inliers (< {min_inliers})")
    mask = inl[best]
    T = horn(src[mask], dst[mask])
    # one re-scoring pass with the refined transform
    refined = np.linalg.norm(T.apply(src) - dst, axis=1) <= inlier_dist
    if refined.sum() >= mask.sum():
        mask = refined
        T = horn(src[mask], dst[mask])
    return T, mask


def verify_and_refine(a: Submap, b: Submap, guess: Pose, cfg: RunConfig | None = None, kind: str = "loop") -> PoseGraphEdge:
    """Map-to-map registration of ``b`` onto ``a`` from ``guess``; accepted edges map b into a."""
    cfg = cfg or RunConfig()
    bc = cfg.backend
    try:
        res = mulls_icp(b.features, a.index, guess, cfg.registration, intensity_max=cfg.features.intensity_max)
    except RegistrationError as e:
        raise LoopRejected(f"registration failed: {e}") from None
    if not np.isfinite(res.sigma) or res.sigma > bc.edge_sigma_max:
        raise LoopRejected(f"sigma {res.sigma:.3f} m above {bc.edge_sigma_max}")
    if res.overlap < bc.edge_overlap_min:
        raise LoopRejected(f"overlap {res.overlap:.2f} below {bc.edge_overlap_min}")
    return PoseGraphEdge(a.id, b.id, res.transform, res.information, kind)


# ---------------------------------------------------------------------- driver


@dataclass
class LoopAttempt:
    source: int
    target: int
    accepted: bool
    reason: str = ""
    used_prior: bool = False


class Backend:
    """Consumes odometry frames, spawns submaps, closes loops and keeps corrected poses.

    Runs synchronously inside the caller's loop.
    """

    # information for adjacent edges whose map-to-map check failed: 0.1 m / 0.01 rad
    FALLBACK_INFORMATION = np.diag([100.0] * 3 + [1e4] * 3)

    def __init__(self, cfg: RunConfig | None = None):
        self.cfg = cfg or RunConfig()
        self.acc = SubmapAccumulator()
        self.submaps: list[Submap] = []
        self.graph = PoseGraph()
        self.attempts: list[LoopAttempt] = []
        self.rng = np.random.default_rng(self.cfg.backend.seed)
        self._since_opt = 0

    def add_frame(self, frame_id: int, pose: Pose, features: FeatureCloud | None = None) -> Submap | None:
        self.acc.add(frame_id, pose, features)
        sm = maybe_spawn_submap(self.acc, len(self.submaps), self.cfg)
        if sm is not None:
            self._insert(sm)
        return sm

    def finalize(self) -> Submap | None:
        """Turn the frames left over since the last submap into a final submap."""
        if len(self.acc) == 0:
            return None
        sm = build_submap(self.acc, len(self.submaps), self.cfg)
        self.acc.clear()
        self._insert(sm)
        return sm

    @property
    def loop_edges(self) -> list:
        return [e for e in self.graph.edges if e.kind == "loop"]

    def _insert(self, sm: Submap) -> None:
        bc = self.cfg.backend
        prev = self.submaps[-1] if self.submaps else None
        self.submaps.append(sm)
        if prev is None:
            self.graph.add_node(sm.id, sm.reference_pose, fixed=True)
            return
        # carry the correction of the predecessor forward
        odo = prev.reference_pose.inverse() @ sm.reference_pose
        self.graph.add_node(sm.id, self.graph.nodes[prev.id] @ odo)
        try:
            edge = verify_and_refine(prev, sm, odo, self.cfg, kind="adjacent")
        except LoopRejected as e:
            log.info("submap %d: adjacent check failed (%s); using odometry", sm.id, e)
            edge = PoseGraphEdge(prev.id, sm.id, odo, self.FALLBACK_INFORMATION, "adjacent")
        self.graph.add_edge(edge)
        self._since_opt += 1
        radius = bc.loop_radius + bc.loop_radius_growth * self._since_opt if bc.loop_radius > 0 else 0.0
        current = Submap(sm.id, self.graph.nodes[sm.id], sm.features, sm.ncc, sm.frame_ids, sm.relative_poses)
        candidates = find_loop_candidates(
            [Submap(s.id, self.graph.nodes[s.id], s.features, s.ncc, [], []) for s in self.submaps[:-1]], current, radius)
        closed = False
        for cid in candidates:
            closed |= self._try_loop(self.submaps[cid], sm)
        if closed:
            self.graph.nodes = optimize_graph(self.graph, bc.pgo_max_iter, bc.pgo_rel_tol)
            self._since_opt = 0

    def _try_loop(self, a: Submap, b: Submap) -> bool:
        bc = self.cfg.backend
        prior = self.graph.nodes[a.id].inverse() @ self.graph.nodes[b.id]
        used_prior = False
        try:
            ia, ib, _ = match_ncc(a.ncc, b.ncc, bc.ncc_cos_min)
            guess, _ = coarse_register(b.vertices.xyz[ib], a.vertices.xyz[ia], bc.ransac_iters, bc.ransac_inlier,
                                       bc.ransac_min_inliers, self.rng)
        except LoopRejected as e:
            if not bc.odometry_prior:
                self.attempts.append(LoopAttempt(a.id, b.id, False, str(e)))
                return False
            guess, used_prior = prior, True
        try:
            edge = verify_and_refine(a, b, guess, self.cfg)
        except LoopRejected as e:
            if used_prior or not bc.odometry_prior:
                self.attempts.append(LoopAttempt(a.id, b.id, False, str(e), used_prior))
                return False
            # the descriptor hypothesis may be wrong while the odometry guess is fine
            try:
                edge = verify_and_refine(a, b, prior, self.cfg)
                used_prior = True
            except LoopRejected as e2:
                self.attempts.append(LoopAttempt(a.id, b.id, False, str(e2), True))
                return False
        self.graph.add_edge(edge)
        self.attempts.append(LoopAttempt(a.id, b.id, True, "", used_prior))
        log.info("loop closed between submaps %d and %d", a.id, b.id)
        return True

    def corrected_poses(self) -> dict:
        """``{frame_id: Pose}`` for every frame that has been assigned to a submap."""
        out = {}
        for sm in self.submaps:
            for fid, T in zip(sm.frame_ids, distribute_inner(sm, self.graph.nodes[sm.id])):
                out[fid] = T
        return out
