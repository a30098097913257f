"""Independent oracles and scene builders shared by the unit and acceptance tests."""
import numpy as np
from scipy.optimize import least_squares

from mulls.backend import PoseGraph, PoseGraphEdge, edge_residual
from mulls.config import FeatureConfig
from mulls.features import classify, pca_neighborhood

from mulls.core import Pose, from_tangent, rot_z, so3_exp
from mulls.registration import Correspondences, Metric, build_rows


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_correspondences(rng, n, weights=True) -> Correspondences:
    """Mixed-metric pairs with random geometry and weights (no consistency implied)."""
    metric = rng.integers(0, 3, n)
    p = rng.normal(size=(n, 3)) * 10
    q = p + rng.normal(size=(n, 3)) * 0.3
    d = unit(rng.normal(size=(n, 3)))
    w = rng.uniform(0.1, 2.0, n) if weights else None
    return Correspondences.build(p, q, metric, d, w=w)


def qr_oracle(c: Correspondences) -> np.ndarray:
    """Dense QR of the stacked sqrt(w)-scaled system, rows built one pair at a time."""
    A, b = [], []
    for i in range(len(c)):
        Ai, bi = build_rows(c.metric[i], c.p[i], c.q[i], c.direction[i])
        s = np.sqrt(c.w[i])
        A.append(Ai * s)
        b.append(bi * s)
    Q, R = np.linalg.qr(np.vstack(A))
    return np.linalg.solve(R, Q.T @ np.concatenate(b))


def consistent_scene(rng, xi_true, n=(40, 15, 10), extent=1.0) -> Correspondences:
    """Noise-free pairs whose exact alignment is ``from_tangent(xi_true)``.

    Target primitives are planes (normal n through q), lines (direction v
    through q) and points; each source point is the target point slid along
    its primitive, then moved by the inverse of the true transform.
    """
    T = from_tangent(xi_true)
    parts = []
    for metric, k in zip((Metric.PLANE, Metric.LINE, Metric.POINT), n):
        q = rng.uniform(-extent, extent, (k, 3))
        d = unit(rng.normal(size=(k, 3)))
        slide = rng.normal(size=(k, 3)) * 0.2
        if metric == Metric.PLANE:
            slide -= np.einsum("ni,ni->n", slide, d)[:, None] * d
        elif metric == Metric.LINE:
            slide = np.einsum("ni,ni->n", slide, d)[:, None] * d
        else:
            slide[:] = 0.0
        p = T.inverse().apply(q + slide)
        parts.append(Correspondences.build(p, q, metric, d if metric != Metric.POINT else None))
    return Correspondences.concat(parts)


def exact_residuals(c: Correspondences, T: Pose) -> np.ndarray:
    """Metric residuals of the moved source points with exact rotations."""
    r = T.apply(c.p) - c.q
    out = []
    for i in range(len(c)):
        s = np.sqrt(c.w[i])
        if c.metric[i] == Metric.PLANE:
            out.append([s * (c.direction[i] @ r[i])])
        elif c.metric[i] == Metric.LINE:
            out.append(s * np.cross(r[i], c.direction[i]))
        else:
            out.append(s * r[i])
    return np.concatenate(out)


def nonlinear_oracle(c: Correspondences, x0=None) -> np.ndarray:
    """Generic trust-region minimiser of the exact objective over the tangent vector."""
    x0 = np.zeros(6) if x0 is None else x0
    sol = least_squares(lambda x: exact_residuals(c, from_tangent(x)), x0, xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    return sol.x


def random_rigid(rng, max_deg, max_trans) -> Pose:
    axis = unit(rng.normal(size=3))
    direction = unit(rng.normal(size=3))
    return Pose(so3_exp(axis * np.radians(rng.uniform(0, max_deg))), direction * rng.uniform(0, max_trans))


def pose_error(A: Pose, B: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (deg) of ``A^-1 B``."""
    E = A.inverse() @ B
    return float(np.linalg.norm(E.t)), float(np.degrees(E.angle))


def grid(nx, ny, step, z=0.0):
    x, y = np.meshgrid(np.arange(nx) * step, np.arange(ny) * step, indexing="ij")
    return np.c_[x.ravel(), y.ravel(), np.full(x.size, z)]


def eq2_by_hand(xyz, grid_size, dh1, dh2):
    """Per-point dual-threshold rule evaluated with plain dictionaries."""
    cells = {}
    keys = [(int(np.floor(p[0] / grid_size)), int(np.floor(p[1] / grid_size))) for p in xyz]
    for k, p in zip(keys, xyz):
        cells[k] = min(cells.get(k, np.inf), p[2])
    out = []
    for k, p in zip(keys, xyz):
        neimin = min(cells.get((k[0] + a, k[1] + b), np.inf) for a in (-1, 0, 1) for b in (-1, 0, 1))
        out.append(p[2] - cells[k] > dh1 or cells[k] - neimin > dh2)
    return np.array(out)


def brute_pca(xyz, i, k, radius):
    d = np.linalg.norm(xyz - xyz[i], axis=1)
    order = np.argsort(d, kind="stable")
    nb = order[: min(k, int((d[order] <= radius).sum()))]
    Q = xyz[nb]
    C = (Q - Q.mean(0)).T @ (Q - Q.mean(0)) / len(Q)
    return C, len(nb)


def classify_points(pts, height=0.0):
    cfg = FeatureConfig()
    p = pca_neighborhood(pts, cfg.pca_k, cfg.pca_radius, cfg.pca_k_min)
    return classify(p, np.full(len(pts), height), cfg)

def pole_fixture(rng):
    """Slightly tilted vertical line; returns points and the mask away from its ends."""
    origin = rng.uniform(-20, 20, 3)
    tilt = so3_exp(np.r_[rng.uniform(-0.15, 0.15, 2), 0.0])
    h, step = rng.uniform(4, 8), rng.uniform(0.03, 0.08)
    z = np.arange(0, h, step)
    pts = origin + np.c_[np.zeros_like(z), np.zeros_like(z), z] @ tilt.T
    return pts, (z > 1.0) & (z < h - 1.0)


def _rotated_grid(rng, vertical):
    origin = rng.uniform(-20, 20, 3)
    R = rot_z(rng.uniform(0, 2 * np.pi))
    w, hh, s = rng.uniform(5, 10), rng.uniform(4, 8), rng.uniform(0.1, 0.2)
    u, v = np.meshgrid(np.arange(0, w, s), np.arange(0, hh, s), indexing="ij")
    u, v = u.ravel(), v.ravel()
    local = np.c_[u, np.zeros(u.size), v] if vertical else np.c_[u, v, np.zeros(u.size)]
    # interior: more than the PCA radius from the border
    return origin + local @ R.T, (u > 1) & (u < w - 1) & (v > 1) & (v < hh - 1)


def facade_fixture(rng):
    return _rotated_grid(rng, vertical=True)


def roof_fixture(rng):
    return _rotated_grid(rng, vertical=False)


def pgo_oracle(graph):
    """Generic trust-region solver on the same weighted residuals, free nodes perturbed on the left."""
    free = [n for n in sorted(graph.nodes) if n != graph.fixed]

    def poses(x):
        out = dict(graph.nodes)
        for i, n in enumerate(free):
            d = x[6 * i:6 * i + 6]
            X = graph.nodes[n]
            out[n] = Pose(so3_exp(d[3:]) @ X.R, X.t + d[:3])
        return out

    def res(x):
        P = poses(x)
        out = []
        for e in graph.edges:
            L = np.linalg.cholesky(e.information)
            out.append(L.T @ edge_residual(P[e.source], P[e.target], e.measurement))
        return np.concatenate(out)

    sol = least_squares(res, np.zeros(6 * len(free)), method="trf", jac="3-point", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return poses(sol.x)

def random_graph(rng, n):
    """Chain plus three random extra edges over random poses with noisy measurements."""
    g = PoseGraph()
    truth = [random_rigid(rng, 180, 20) for _ in range(n)]
    for k in range(n):
        g.add_node(k, truth[k] @ random_rigid(rng, 3, 0.3))
    pairs = [(k, k + 1) for k in range(n - 1)] + [tuple(sorted(rng.choice(n, 2, replace=False))) for _ in range(3)]
    for i, j in pairs:
        Z = truth[i].inverse() @ truth[j] @ random_rigid(rng, 1, 0.1)
        A = rng.normal(size=(6, 6))
        g.add_edge(PoseGraphEdge(int(i), int(j), Z, A @ A.T + 6 * np.eye(6)))
    return g


def max_pose_difference(a: dict, b: dict) -> float:
    # element-wise: arccos-based angles cannot resolve differences below ~1e-8
    return max(max(np.abs(a[n].R - b[n].R).max(), np.abs(a[n].t - b[n].t).max()) for n in a)
