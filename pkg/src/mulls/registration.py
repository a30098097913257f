"""Multi-metric linear least-squares ICP over classified feature points.

Every correspondence contributes rows to one linear system in the tangent
vector ``xi = (tx, ty, tz, roll, pitch, yaw)`` of a left increment applied to
the current estimate:

* point-to-point: 3 rows ``[I, -[p]x]``, ``b = q - p``
* point-to-plane: 1 row ``[n^T, (p x n)^T]``, ``b = n . (q - p)``
* point-to-line: 3 rows ``[[v]x, (v.p) I - p v^T]``, ``b = v x (q - p)``

with ``p`` the transformed source point and ``q`` its target match. The
normal equations are accumulated row-block by row-block and solved with a
Cholesky factorisation.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .config import RegistrationConfig
from .core import Pose, from_tangent, inclusive, kdtree, skew
from .features import CLASSES, LINEAR, NONGROUND, PLANAR, FeatureClass, FeatureCloud

_AXES = ("translation along x", "translation along y", "translation along z", "roll", "pitch", "yaw")


class Metric(IntEnum):
    POINT = 0
    PLANE = 1
    LINE = 2


METRIC_OF = {c: Metric.PLANE for c in PLANAR} | {c: Metric.LINE for c in LINEAR} | {FeatureClass.VERTEX: Metric.POINT}
ROWS_OF = {Metric.POINT: 3, Metric.PLANE: 1, Metric.LINE: 3}


class RegistrationError(RuntimeError):
    pass


class UnderdeterminedError(RegistrationError):
    pass


class DegeneracyError(RegistrationError):
    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


@dataclass
class Correspondences:
    """Matched pairs (structure of arrays). ``p`` is the source point already
    expressed in the target frame."""

    p: np.ndarray
    q: np.ndarray
    direction: np.ndarray
    metric: np.ndarray
    cls: np.ndarray
    dI: np.ndarray
    d: np.ndarray
    w: np.ndarray

    @classmethod
    def empty(cls) -> "Correspondences":
        z3, z = np.zeros((0, 3)), np.zeros(0)
        return cls(z3, z3, z3, np.zeros(0, np.int8), np.zeros(0, np.int8), z, z, z)

    @classmethod
    def build(cls, p, q, metric, direction=None, label=None, dI=None, w=None) -> "Correspondences":
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        n = len(p)
        metric = np.broadcast_to(np.asarray(metric, dtype=np.int8), (n,)).copy()
        direction = np.zeros((n, 3)) if direction is None else np.atleast_2d(np.asarray(direction, dtype=float)).copy()
        if label is None:
            label = np.where(metric == Metric.PLANE, FeatureClass.FACADE, np.where(metric == Metric.LINE, FeatureClass.PILLAR, FeatureClass.VERTEX))
        label = np.broadcast_to(np.asarray(label, dtype=np.int8), (n,)).copy()
        dI = np.zeros(n) if dI is None else np.broadcast_to(np.asarray(dI, dtype=float), (n,)).copy()
        w = np.ones(n) if w is None else np.broadcast_to(np.asarray(w, dtype=float), (n,)).copy()
        out = cls(p, q, direction, metric, label, dI, np.zeros(n), w)
        out.d = residual_distance(out)
        return out

    def __len__(self) -> int:
        return len(self.p)

    def n_rows(self) -> int:
        return int(np.sum(np.where(self.metric == Metric.PLANE, 1, 3)))

    def class_counts(self) -> dict:
        return {c: int(np.count_nonzero(self.cls == c)) for c in CLASSES}

    @staticmethod
    def concat(items) -> "Correspondences":
        items = [c for c in items if len(c)]
        if not items:
            return Correspondences.empty()
        return Correspondences(*(np.concatenate([getattr(c, f) for c in items]) for f in ("p", "q", "direction", "metric", "cls", "dI", "d", "w")))


def residual_distance(c: Correspondences) -> np.ndarray:
    r = c.q - c.p
    d = np.linalg.norm(r, axis=1)
    pl = c.metric == Metric.PLANE
    li = c.metric == Metric.LINE
    d[pl] = np.abs(np.einsum("ni,ni->n", r[pl], c.direction[pl]))
    d[li] = np.linalg.norm(np.cross(r[li], c.direction[li]), axis=1)
    return d


# ------------------------------------------------------------------------ rows


def build_rows(metric, p, q, direction=None) -> tuple[np.ndarray, np.ndarray]:
    """Design rows and observations for one correspondence."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    metric = Metric(metric)
    if metric == Metric.POINT:
        return np.hstack([np.eye(3), -skew(p)]), q - p
    v = np.asarray(direction, dtype=float)
    if metric == Metric.PLANE:
        return np.concatenate([v, np.cross(p, v)])[None, :], np.array([v @ (q - p)])
    return np.hstack([skew(v), (v @ p) * np.eye(3) - np.outer(p, v)]), np.cross(v, q - p)


def stacked_rows(c: Correspondences) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All rows, observations and per-row weights, grouped point / plane / line."""
    A_parts, b_parts, w_parts = [], [], []
    m = c.metric == Metric.POINT
    if m.any():
        p, q = c.p[m], c.q[m]
        n = len(p)
        A = np.zeros((n, 3, 6))
        A[:, 0, 0] = A[:, 1, 1] = A[:, 2, 2] = 1.0
        # -[p]x
        A[:, 0, 4], A[:, 0, 5] = p[:, 2], -p[:, 1]
        A[:, 1, 3], A[:, 1, 5] = -p[:, 2], p[:, 0]
        A[:, 2, 3], A[:, 2, 4] = p[:, 1], -p[:, 0]
        A_parts.append(A.reshape(-1, 6))
        b_parts.append((q - p).reshape(-1))
        w_parts.append(np.repeat(c.w[m], 3))
    m = c.metric == Metric.PLANE
    if m.any():
        p, q, v = c.p[m], c.q[m], c.direction[m]
        A_parts.append(np.hstack([v, np.cross(p, v)]))
        b_parts.append(np.einsum("ni,ni->n", v, q - p))
        w_parts.append(c.w[m])
    m = c.metric == Metric.LINE
    if m.any():
        p, q, v = c.p[m], c.q[m], c.direction[m]
        n = len(p)
        A = np.zeros((n, 3, 6))
        A[:, 0, 1], A[:, 0, 2] = -v[:, 2], v[:, 1]
        A[:, 1, 0], A[:, 1, 2] = v[:, 2], -v[:, 0]
        A[:, 2, 0], A[:, 2, 1] = -v[:, 1], v[:, 0]
        vp = np.einsum("ni,ni->n", v, p)
        A[:, :, 3:] = vp[:, None, None] * np.eye(3) - np.einsum("ni,nj->nij", p, v)
        A_parts.append(A.reshape(-1, 6))
        b_parts.append(np.cross(v, q - p).reshape(-1))
        w_parts.append(np.repeat(c.w[m], 3))
    if not A_parts:
        return np.zeros((0, 6)), np.zeros(0), np.zeros(0)
    return np.vstack(A_parts), np.concatenate(b_parts), np.concatenate(w_parts)


# ---------------------------------------------------------------------- weights


def weight_residual(d, delta: float, kappa: float = 1.0):
    """Residual weight from the general robust-kernel family, ``eps = d / delta``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    eps = np.asarray(d, dtype=float) / delta
    if kappa == 2:
        return np.ones_like(eps) if eps.ndim else 1.0
    if kappa == 0:
        return 2.0 * eps / (eps**2 + 2.0)
    return eps * (eps**2 / abs(kappa - 2.0) + 1.0) ** (kappa / 2.0 - 1.0)


def weight_balanced(cls, counts: dict, w_min: float = 0.1, w_max: float = 10.0):
    """Ground/roof down- or up-weighting by class counts; 1 for every other class."""
    cls = np.asarray(cls)
    n = {c: counts.get(c, 0) for c in CLASSES}
    gr = n[FeatureClass.GROUND] + n[FeatureClass.ROOF]
    if gr > 0:
        raw = (n[FeatureClass.FACADE] + 2 * n[FeatureClass.PILLAR] - n[FeatureClass.BEAM]) / (2.0 * gr)
        wgr = float(np.clip(raw, w_min, w_max))
    else:
        wgr = 1.0
    is_gr = (cls == FeatureClass.GROUND) | (cls == FeatureClass.ROOF)
    out = np.where(is_gr, wgr, 1.0)
    return out if out.ndim else float(out)


def irls_weight_residual(d, delta: float, kappa: float = 1.0):
    """``weight_residual / eps``: the reweighting factor of the same kernel, with
    its limit at eps = 0 filled in (1 for every kappa)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    eps = np.asarray(d, dtype=float) / delta
    if kappa == 2:
        return np.ones_like(eps) if eps.ndim else 1.0
    if kappa == 0:
        return 2.0 / (eps**2 + 2.0)
    return (eps**2 / abs(kappa - 2.0) + 1.0) ** (kappa / 2.0 - 1.0)


def weight_intensity(dI, intensity_max: float):
    if intensity_max <= 0:
        raise ValueError("intensity_max must be positive")
    return np.exp(-np.abs(dI) / intensity_max)


def assign_weights(c: Correspondences, cfg: RegistrationConfig, intensity_max: float = 255.0) -> np.ndarray:
    w = np.ones(len(c))
    if cfg.use_residual_weight:
        if cfg.residual_weight_form == "literal":
            w = w * weight_residual(c.d, cfg.inlier_noise, cfg.kappa)
        else:
            w = w * irls_weight_residual(c.d, cfg.inlier_noise, cfg.kappa)
    if cfg.use_balanced_weight:
        w = w * weight_balanced(c.cls, c.class_counts(), cfg.balanced_min, cfg.balanced_max)
    if cfg.use_intensity_weight:
        w = w * weight_intensity(c.dI, intensity_max)
    c.w = w
    return w


# ------------------------------------------------------------------- solve


@dataclass
class NormalEquations:
    ATA: np.ndarray
    ATb: np.ndarray
    bPb: float
    n: int

    @classmethod
    def zero(cls) -> "NormalEquations":
        return cls(np.zeros((6, 6)), np.zeros(6), 0.0, 0)

    def __add__(self, other: "NormalEquations") -> "NormalEquations":
        return NormalEquations(self.ATA + other.ATA, self.ATb + other.ATb, self.bPb + other.bPb, self.n + other.n)

    def weighted_residual(self, xi) -> float:
        """(A xi - b)^T P (A xi - b) from the accumulated sums."""
        xi = np.asarray(xi, dtype=float)
        return float(xi @ self.ATA @ xi - 2.0 * xi @ self.ATb + self.bPb)

    def scaled(self, s: float) -> "NormalEquations":
        return NormalEquations(self.ATA * s, self.ATb * s, self.bPb * s, self.n)


def accumulate(A, b, w, chunk: int | None = None) -> NormalEquations:
    """Sum of A_i^T w_i A_i etc. Chunks are reduced pairwise in a fixed order so
    any chunking gives a reproducible result."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    if chunk is None or chunk >= len(A):
        Aw = A * w[:, None]
        ATA = Aw.T @ A
        return NormalEquations(0.5 * (ATA + ATA.T), Aw.T @ b, float(np.dot(w * b, b)), len(A))
    parts = [accumulate(A[i : i + chunk], b[i : i + chunk], w[i : i + chunk]) for i in range(0, len(A), chunk)]
    while len(parts) > 1:
        parts = [parts[i] + parts[i + 1] if i + 1 < len(parts) else parts[i] for i in range(0, len(parts), 2)]
    return parts[0]


def normal_equations(c: Correspondences) -> NormalEquations:
    A, b, w = stacked_rows(c)
    return accumulate(A, b, w)


def solve_normal_equations(neq: NormalEquations, condition_max: float = 1e12) -> np.ndarray:
    evals, evecs = np.linalg.eigh(neq.ATA)
    if evals[-1] <= 0 or evals[0] <= evals[-1] / condition_max:
        v = evecs[:, 0]
        axis = int(np.argmax(np.abs(v)))
        raise DegeneracyError(
            f"degenerate system (condition {evals[-1] / max(evals[0], 1e-300):.3g}); {_AXES[axis]} unobservable "
            f"(weakest direction {np.round(v, 3).tolist()})",
            direction=v,
        )
    return cho_solve(cho_factor(neq.ATA), neq.ATb)


def solve_step(c: Correspondences, condition_max: float = 1e12) -> tuple[np.ndarray, NormalEquations]:
    """Weighted linear least-squares increment using the correspondence weights ``c.w``."""
    neq = normal_equations(c)
    if neq.bPb == 0.0 and not np.any(neq.ATb):
        # every weighted residual is zero: the current estimate is already exact
        return np.zeros(6), neq
    return solve_normal_equations(neq, condition_max), neq


def evaluate_quality(neq: NormalEquations, xi, sigma_floor: float = 1e-4) -> tuple[float, np.ndarray]:
    """Posterior standard deviation and information matrix of a solved system."""
    if neq.n <= 6:
        raise RegistrationError(f"quality needs more than 6 observations, got {neq.n}")
    var = max(neq.weighted_residual(xi), 0.0) / (neq.n - 6)
    sigma = float(np.sqrt(var))
    if sigma < sigma_floor:
        sigma = sigma_floor
    info = neq.ATA / sigma**2
    return sigma, 0.5 * (info + info.T)


# ------------------------------------------------------------------ association


class FeatureIndex:
    """Target feature cloud with one KD-tree per class (built lazily)."""

    def __init__(self, cloud: FeatureCloud):
        self.cloud = cloud
        self._trees = {}
        self._nonground = None

    def tree(self, c) -> cKDTree | None:
        if c not in self._trees:
            pts = self.cloud[c].xyz
            self._trees[c] = kdtree(pts) if len(pts) else None
        return self._trees[c]

    def nonground_tree(self) -> cKDTree | None:
        if self._nonground is None:
            s, _ = self.cloud.merged(NONGROUND)
            self._nonground = kdtree(s.xyz) if len(s) else False
        return self._nonground or None


def as_index(target) -> FeatureIndex:
    return target if isinstance(target, FeatureIndex) else FeatureIndex(target)


def associate(source: FeatureCloud, target, max_dist: float, direction_cos_min: float = np.cos(np.radians(30.0)),
              classes=CLASSES, require_rows: int = 6) -> Correspondences:
    """Same-class nearest neighbours within ``max_dist`` plus direction checks.

    ``source`` must already be expressed in the target frame.
    """
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    target = as_index(target)
    parts = []
    for c in classes:
        src = source[c]
        tree = target.tree(c)
        if len(src) == 0 or tree is None:
            continue
        dist, idx = tree.query(src.xyz, k=1, distance_upper_bound=inclusive(max_dist))
        ok = np.isfinite(dist)
        tgt = target.cloud[c]
        si = np.flatnonzero(ok)
        ti = idx[ok]
        metric = METRIC_OF[c]
        if metric != Metric.POINT:
            cos = np.abs(np.einsum("ni,ni->n", src.direction[si], tgt.direction[ti]))
            good = cos >= direction_cos_min
            si, ti = si[good], ti[good]
        n = len(si)
        if n == 0:
            continue
        corr = Correspondences(
            src.xyz[si], tgt.xyz[ti], tgt.direction[ti], np.full(n, metric, np.int8), np.full(n, c, np.int8),
            np.abs(src.intensity[si] - tgt.intensity[ti]), np.zeros(n), np.ones(n),
        )
        corr.d = residual_distance(corr)
        parts.append(corr)
    out = Correspondences.concat(parts)
    if out.n_rows() < require_rows:
        raise UnderdeterminedError(f"only {out.n_rows()} observation rows from {len(out)} correspondences")
    return out


def overlap_ratio(source: FeatureCloud, target, tau: float = 0.5) -> float:
    """Fraction of nonground source points (already in target frame) with a
    nonground target point within ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    src, _ = source.merged(NONGROUND)
    if len(src) == 0:
        return 0.0
    tree = as_index(target).nonground_tree()
    if tree is None:
        return 0.0
    d, _ = tree.query(src.xyz, k=1, distance_upper_bound=inclusive(tau))
    return float(np.count_nonzero(d <= tau) / len(src))


# ------------------------------------------------------------------------- ICP


@dataclass
class RegistrationResult:
    transform: Pose
    xi_history: list = field(default_factory=list)
    sigma: float = float("nan")
    information: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    overlap: float = 0.0
    iterations: int = 0
    converged: bool = False
    class_counts: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    t_association: float = 0.0
    t_estimation: float = 0.0


DIVERGENCE_RISE = 0.01


def _classes_for(cfg: RegistrationConfig):
    return tuple(c for c in CLASSES if cfg.use_vertex or c != FeatureClass.VERTEX)


class _Linearizer:
    """Fused association + row construction used inside the ICP loop.

    Produces the same system as ``associate`` followed by ``stacked_rows`` but
    works per class on preallocated arrays, transforming the source once per
    iteration.
    """

    def __init__(self, source: FeatureCloud, target: FeatureIndex, classes, cos_min: float):
        self.target = target
        self.cos_min = cos_min
        self.parts = []
        for c in classes:
            s = source[c]
            if len(s) and target.tree(c) is not None:
                t = target.cloud[c]
                self.parts.append((c, METRIC_OF[c], s.xyz, s.direction, s.intensity, t.xyz, t.direction, t.intensity))

    def __call__(self, T: Pose, thr: float):
        R, t = T.R, T.t
        RT = R.T
        A_parts, b_parts, own_parts, d_parts, cls_parts, dI_parts = [], [], [], [], [], []
        n_corr = 0
        for c, metric, sx, sd, si_, tx, td, ti_ in self.parts:
            P = sx @ RT
            P += t
            dist, ti = self.target.tree(c).query(P, k=1, distance_upper_bound=inclusive(thr))
            si = np.flatnonzero(dist <= thr)
            ti = ti[si]
            if metric != Metric.POINT and len(si):
                v = td[ti]
                cos = np.abs(((sd[si] @ RT) * v).sum(axis=1))
                good = np.flatnonzero(cos >= self.cos_min)
                si, ti, v = si[good], ti[good], v[good]
            n = len(si)
            if n == 0:
                continue
            p = P[si]
            r = tx[ti] - p
            px, py, pz = p[:, 0], p[:, 1], p[:, 2]
            if metric == Metric.PLANE:
                vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
                A = np.empty((n, 6))
                A[:, :3] = v
                A[:, 3] = py * vz - pz * vy
                A[:, 4] = pz * vx - px * vz
                A[:, 5] = px * vy - py * vx
                b = (v * r).sum(axis=1)
                d = np.abs(b)
                own = np.arange(n_corr, n_corr + n)
            elif metric == Metric.LINE:
                vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
                A = np.zeros((n, 3, 6))
                A[:, 0, 1], A[:, 0, 2] = -vz, vy
                A[:, 1, 0], A[:, 1, 2] = vz, -vx
                A[:, 2, 0], A[:, 2, 1] = -vy, vx
                vp = (v * p).sum(axis=1)
                A[:, :, 3:] = -p[:, :, None] * v[:, None, :]
                A[:, 0, 3] += vp
                A[:, 1, 4] += vp
                A[:, 2, 5] += vp
                A = A.reshape(-1, 6)
                rx, ry, rz = r[:, 0], r[:, 1], r[:, 2]
                bb = np.empty((n, 3))
                bb[:, 0] = vy * rz - vz * ry
                bb[:, 1] = vz * rx - vx * rz
                bb[:, 2] = vx * ry - vy * rx
                d = np.sqrt((bb * bb).sum(axis=1))
                b = bb.reshape(-1)
                own = np.repeat(np.arange(n_corr, n_corr + n), 3)
            else:
                A = np.zeros((n, 3, 6))
                A[:, 0, 0] = A[:, 1, 1] = A[:, 2, 2] = 1.0
                # -[p]x
                A[:, 0, 4], A[:, 0, 5] = pz, -py
                A[:, 1, 3], A[:, 1, 5] = -pz, px
                A[:, 2, 3], A[:, 2, 4] = py, -px
                A = A.reshape(-1, 6)
                d = np.sqrt((r * r).sum(axis=1))
                b = r.reshape(-1)
                own = np.repeat(np.arange(n_corr, n_corr + n), 3)
            A_parts.append(A)
            b_parts.append(b)
            own_parts.append(own)
            d_parts.append(d)
            cls_parts.append(np.full(n, c, np.int8))
            dI_parts.append(np.abs(si_[si] - ti_[ti]))
            n_corr += n
        if not A_parts:
            return None
        return _System(np.vstack(A_parts), np.concatenate(b_parts), np.concatenate(own_parts),
                       np.concatenate(d_parts), np.concatenate(cls_parts), np.concatenate(dI_parts))


@dataclass
class _System:
    A: np.ndarray
    b: np.ndarray
    own: np.ndarray  # row -> correspondence
    d: np.ndarray
    cls: np.ndarray
    dI: np.ndarray

    def class_counts(self) -> dict:
        counts = np.bincount(self.cls, minlength=len(CLASSES))
        return {c: int(counts[c]) for c in CLASSES}

    def weights(self, cfg: RegistrationConfig, intensity_max: float) -> np.ndarray:
        # same product as assign_weights, evaluated per correspondence
        w = np.ones(len(self.d))
        if cfg.use_residual_weight:
            kernel = weight_residual if cfg.residual_weight_form == "literal" else irls_weight_residual
            w = w * kernel(self.d, cfg.inlier_noise, cfg.kappa)
        if cfg.use_balanced_weight:
            w = w * weight_balanced(self.cls, self.class_counts(), cfg.balanced_min, cfg.balanced_max)
        if cfg.use_intensity_weight:
            w = w * weight_intensity(self.dI, intensity_max)
        return w

    def normal_equations(self, w: np.ndarray) -> NormalEquations:
        return accumulate(self.A, self.b, w[self.own])


def mulls_icp(source: FeatureCloud, target, guess: Pose | None = None, cfg: RegistrationConfig | None = None,
              max_iter: int | None = None, intensity_max: float = 255.0, with_overlap: bool = True) -> RegistrationResult:
    """Register ``source`` onto ``target``; returns the source-to-target transform.

    ``max_iter`` overrides the configured cap (fixed-iteration variants).
    ``with_overlap=False`` skips the overlap ratio (left at NaN).
    """
    cfg = cfg or RegistrationConfig()
    target = as_index(target)
    T = guess or Pose.identity()
    cap = cfg.max_iter if max_iter is None else max_iter
    lin = _Linearizer(source, target, _classes_for(cfg), np.cos(np.radians(cfg.direction_deg)))
    res = RegistrationResult(T)
    last_neq, last_xi, last_sys = None, np.zeros(6), None
    rising, prev_cost = 0, np.inf
    for it in range(cap):
        thr = max(cfg.max_dist_start * cfg.max_dist_decay**it, cfg.max_dist_min)
        ta = time.perf_counter()
        system = lin(T, thr)
        n_rows = 0 if system is None else len(system.b)
        if n_rows < 6:
            if it == 0 or last_neq is None:
                raise UnderdeterminedError(f"only {n_rows} observation rows at iteration {it} (threshold {thr:.2f} m)")
            break
        tb = time.perf_counter()
        w = system.weights(cfg, intensity_max)
        neq = system.normal_equations(w)
        if neq.bPb == 0.0 and not np.any(neq.ATb):
            xi = np.zeros(6)
        else:
            xi = solve_normal_equations(neq, cfg.condition_max)
        tc = time.perf_counter()
        res.t_association += tb - ta
        res.t_estimation += tc - tb
        T = from_tangent(xi) @ T
        cost = neq.bPb / max(float(np.sum(w[system.own])), 1e-300)
        step = float(np.linalg.norm(xi[:3]) + np.linalg.norm(xi[3:]))
        res.xi_history.append(xi)
        res.trace.append({"iteration": it, "xi_norm": step, "residual": cost, "threshold": thr, **{c.name: n for c, n in system.class_counts().items()}})
        last_neq, last_xi, last_sys = neq, xi, system
        res.iterations = it + 1
        # fluctuations in the converging tail are not divergence
        rising = rising + 1 if cost > prev_cost * (1.0 + DIVERGENCE_RISE) else 0
        prev_cost = cost
        if rising >= 3:
            raise RegistrationError(f"diverging: residual grew {rising} iterations in a row")
        if step < cfg.converge_eps:
            res.converged = True
            break
    res.transform = T
    if last_neq is not None:
        if last_neq.bPb == 0.0:
            # all residuals vanish; residual weights are zero, evaluate with unit kernel
            unit = RegistrationConfig(**{**cfg.__dict__, "use_residual_weight": False})
            last_neq = last_sys.normal_equations(last_sys.weights(unit, intensity_max))
        if last_neq.n > 6:
            res.sigma, res.information = evaluate_quality(last_neq, last_xi, cfg.sigma_floor)
        res.class_counts = last_sys.class_counts()
    res.overlap = overlap_ratio(source.transformed(T), target, cfg.overlap_dist) if with_overlap else float("nan")
    return res


def write_trace_csv(result: RegistrationResult, path) -> None:
    if not result.trace:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(result.trace[0].keys()))
        w.writeheader()
        w.writerows(result.trace)
