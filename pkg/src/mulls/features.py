"""Classified geometric feature points: ground, facade, roof, pillar, beam, vertex.

Pipeline per scan: dual-threshold ground filtering on a 2D grid, per-cell RANSAC
ground refinement, K-R neighbourhood PCA on nonground points, rule-based
classification, per-class non-maximum suppression, two-level voxel downsampling,
and the 6-D neighbourhood-category descriptor of each vertex keypoint.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial import cKDTree

from .config import FeatureConfig, GroundConfig, RunConfig
from .core import PointCloud, Pose, apply, inclusive, kdtree

log = logging.getLogger(__name__)


class FeatureClass(IntEnum):
    GROUND = 0
    FACADE = 1
    ROOF = 2
    PILLAR = 3
    BEAM = 4
    VERTEX = 5


UNCLASSIFIED = -1
CLASSES = tuple(FeatureClass)
PLANAR = (FeatureClass.GROUND, FeatureClass.FACADE, FeatureClass.ROOF)
LINEAR = (FeatureClass.PILLAR, FeatureClass.BEAM)
NONGROUND = (FeatureClass.FACADE, FeatureClass.ROOF, FeatureClass.PILLAR, FeatureClass.BEAM, FeatureClass.VERTEX)

# PLY label colours for debug export: ground gray, facade blue, roof cyan, pillar green, beam yellow, vertex magenta
CLASS_COLORS = {
    FeatureClass.GROUND: (128, 128, 128),
    FeatureClass.FACADE: (0, 0, 255),
    FeatureClass.ROOF: (0, 255, 255),
    FeatureClass.PILLAR: (0, 255, 0),
    FeatureClass.BEAM: (255, 255, 0),
    FeatureClass.VERTEX: (255, 0, 255),
}


@dataclass
class FeatureSet:
    """Points of one class. ``direction`` holds the normal (planar classes),
    the primary vector (linear classes) or zeros (vertices)."""

    xyz: np.ndarray
    direction: np.ndarray
    intensity: np.ndarray
    score: np.ndarray
    height: np.ndarray
    frame_id: np.ndarray

    @classmethod
    def empty(cls) -> "FeatureSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def build(cls, xyz, direction=None, intensity=None, score=None, height=None, frame_id=0) -> "FeatureSet":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)

        def col(v, default=0.0):
            if v is None:
                return np.full(n, default, dtype=np.float64)
            return np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy()

        d = np.zeros((n, 3)) if direction is None else np.asarray(direction, dtype=np.float64).reshape(n, 3)
        fid = np.broadcast_to(np.asarray(frame_id, dtype=np.int64), (n,)).copy()
        return cls(xyz, d, col(intensity), col(score), col(height), fid)

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.xyz[idx], self.direction[idx], self.intensity[idx], self.score[idx], self.height[idx], self.frame_id[idx])

    def transformed(self, T: Pose) -> "FeatureSet":
        return FeatureSet(apply(T, self.xyz), self.direction @ T.R.T, self.intensity, self.score, self.height, self.frame_id)

    @staticmethod
    def concat(sets) -> "FeatureSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return FeatureSet.empty()
        return FeatureSet(*(np.concatenate([getattr(s, f) for s in sets]) for f in ("xyz", "direction", "intensity", "score", "height", "frame_id")))


class FeatureCloud(dict):
    """Mapping FeatureClass -> FeatureSet holding all six classes at one density."""

    def __init__(self, sets=None):
        super().__init__({c: FeatureSet.empty() for c in CLASSES})
        if sets:
            for c, s in sets.items():
                self[FeatureClass(c)] = s

    def transformed(self, T: Pose) -> "FeatureCloud":
        return FeatureCloud({c: s.transformed(T) for c, s in self.items()})

    def counts(self) -> dict:
        return {c: len(s) for c, s in self.items()}

    def total(self) -> int:
        return sum(len(s) for s in self.values())

    def merged(self, classes=CLASSES) -> tuple[FeatureSet, np.ndarray]:
        sets = [self[c] for c in classes]
        labels = np.concatenate([np.full(len(s), int(c), dtype=np.int8) for c, s in zip(classes, sets)]) if sets else np.zeros(0, np.int8)
        return FeatureSet.concat(sets), labels

    @staticmethod
    def concat(clouds) -> "FeatureCloud":
        clouds = list(clouds)
        return FeatureCloud({c: FeatureSet.concat([fc[c] for fc in clouds]) for c in CLASSES})

    def to_point_cloud(self, classes=CLASSES) -> tuple[PointCloud, np.ndarray]:
        s, labels = self.merged(classes)
        return PointCloud(s.xyz, s.intensity), labels


@dataclass
class FeatureFrame:
    """Feature points of one scan at map (dense) and registration (sparse) density."""

    dense: FeatureCloud
    sparse: FeatureCloud
    frame_id: int = 0
    ncc: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    timing: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- ground


@dataclass
class GroundSplit:
    rough_ground: np.ndarray
    nonground: np.ndarray
    cell_id: np.ndarray
    height: np.ndarray
    cell_min: np.ndarray
    cell_neimin: np.ndarray
    shape: tuple


def ground_filter(xyz, grid_size: float, delta_h1: float, delta_h2: float, reference_plane: Pose | None = None) -> GroundSplit:
    """Dual-threshold split into rough ground and nonground.

    Heights are measured along the z axis of ``reference_plane`` (identity means
    the horizontal plane of the sensor). A point is nonground when it sits more
    than ``delta_h1`` above its cell minimum, or when its cell minimum sits more
    than ``delta_h2`` above the minimum of the surrounding 3x3 cells.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    if len(xyz) == 0:
        raise ValueError("ground_filter needs a non-empty cloud")
    if grid_size <= 0:
        raise ValueError("grid_size must be positive")
    local = xyz if reference_plane is None else apply(reference_plane.inverse(), xyz)
    h = local[:, 2]
    ij = np.floor(local[:, :2] / grid_size).astype(np.int64)
    ij -= ij.min(axis=0)
    nx, ny = ij.max(axis=0) + 1
    if nx * ny > 50_000_000:
        raise ValueError("grid too fine for the cloud extent")
    cell = ij[:, 0] * ny + ij[:, 1]
    if nx * ny == 1:
        log.warning("all points fall in one grid cell; grid_size %.2f too coarse", grid_size)
    cmin = np.full(nx * ny, np.inf)
    np.minimum.at(cmin, cell, h)
    neimin = minimum_filter(cmin.reshape(nx, ny), size=3, mode="constant", cval=np.inf).ravel()
    nonground = (h - cmin[cell] > delta_h1) | (cmin[cell] - neimin[cell] > delta_h2)
    return GroundSplit(
        np.flatnonzero(~nonground), np.flatnonzero(nonground), cell, h, cmin, neimin, (int(nx), int(ny))
    )


def refine_ground(xyz, cell_id, ransac_iters: int = 16, inlier_dist: float = 0.1, rng=None, min_points: int = 3, up=(0.0, 0.0, 1.0)):
    """Per-cell RANSAC plane fit, all cells at once.

    Returns ``(inlier_indices, normals)``; normals are the cell's least-squares
    plane normal refitted on the RANSAC consensus set, oriented so ``n . up > 0``.
    Cells with too few or collinear points are discarded.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    cell_id = np.asarray(cell_id)
    rng = np.random.default_rng(0) if rng is None else rng
    up = np.asarray(up, dtype=float)
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    order = np.argsort(cell_id, kind="stable")
    cells, starts, counts = np.unique(cell_id[order], return_index=True, return_counts=True)
    ok = counts >= max(3, min_points)
    P = xyz[order]
    owner = np.repeat(np.arange(len(cells)), counts)
    H = max(1, int(ransac_iters))
    C = len(cells)

    # hypotheses: three random members of each cell
    pick = starts[:, None, None] + np.floor(rng.random((C, H, 3)) * counts[:, None, None]).astype(np.int64)
    a, b, c = P[pick[..., 0]], P[pick[..., 1]], P[pick[..., 2]]
    nrm = np.cross(b - a, c - a)
    nn = np.linalg.norm(nrm, axis=-1)
    degenerate = nn < 1e-9
    nrm = nrm / np.where(degenerate, 1.0, nn)[..., None]
    off = np.einsum("chk,chk->ch", nrm, a)
    dist = np.abs(np.einsum("nk,nhk->nh", P, nrm[owner]) - off[owner])
    inl = (dist < inlier_dist).astype(np.int64)
    score = np.add.reduceat(inl, starts, axis=0) if len(P) else np.zeros((0, H), np.int64)
    score[degenerate] = -1
    best = score.argmax(axis=1)
    has_hyp = score[np.arange(C), best] >= 3
    best_inl = dist[np.arange(len(P)), best[owner]] < inlier_dist

    # least-squares refit on consensus set
    w = best_inl.astype(np.float64)
    cnt = np.add.reduceat(w, starts)
    s1 = np.add.reduceat(P * w[:, None], starts, axis=0)
    s2 = np.add.reduceat(np.einsum("ni,nj->nij", P, P) * w[:, None, None], starts, axis=0)
    safe = np.maximum(cnt, 1.0)
    mean = s1 / safe[:, None]
    cov = s2 / safe[:, None, None] - np.einsum("ci,cj->cij", mean, mean)
    evals, evecs = np.linalg.eigh(cov)
    normal = evecs[:, :, 0]
    normal *= np.where(normal @ up < 0, -1.0, 1.0)[:, None]
    collinear = evals[:, 1] <= 1e-10 * np.maximum(evals[:, 2], 1e-300)
    good = ok & has_hyp & (cnt >= 3) & ~collinear
    final = np.abs(np.einsum("nk,nk->n", P - mean[owner], normal[owner])) < inlier_dist
    final &= good[owner]
    idx = order[final]
    normals = normal[owner[final]]
    srt = np.argsort(idx, kind="stable")
    return idx[srt], normals[srt]


# ------------------------------------------------------------------------------ PCA


@dataclass
class PcaResult:
    """Per-point neighbourhood eigen-analysis (structure of arrays)."""

    eigenvalues: np.ndarray  # (N, 3), descending
    primary: np.ndarray
    middle: np.ndarray
    normal: np.ndarray
    linearity: np.ndarray
    planarity: np.ndarray
    curvature: np.ndarray
    count: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.count)


def covariance_from_neighbors(xyz, idx, centers=None):
    """Covariance (1/|N| normalisation) of padded neighbour index lists; ``idx == len(xyz)`` marks padding.
    Row ``i`` of ``idx`` belongs to ``centers[i]`` (default: ``xyz[i]``)."""
    n = len(xyz)
    centers = xyz if centers is None else centers
    m_rows = len(idx)
    mask = idx < n
    cnt = mask.sum(axis=1)
    safe = np.maximum(cnt, 1).astype(np.float64)
    # centre on the query point to keep the moment form well conditioned
    pad = np.vstack([xyz, np.zeros((1, 3))]).T.copy()
    d = [np.where(mask, pad[a][idx] - centers[:, a, None], 0.0) for a in range(3)]
    m = [da.sum(axis=1) / safe for da in d]
    C = np.empty((m_rows, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            C[:, a, b] = C[:, b, a] = np.einsum("ij,ij->i", d[a], d[b]) / safe - m[a] * m[b]
    return C, cnt.astype(np.int64)


def eigh3(C, tol: float = 1e-12):
    """Batched symmetric 3x3 eigendecomposition, ascending like ``np.linalg.eigh``.

    Closed-form eigenvalues with cross-product eigenvectors; matrices whose
    result fails an ``||CV - VL||`` / orthonormality check are redone by LAPACK.
    """
    C = np.asarray(C, dtype=np.float64)
    n = len(C)
    q = np.trace(C, axis1=1, axis2=2) / 3.0
    off = C[:, 0, 1] ** 2 + C[:, 0, 2] ** 2 + C[:, 1, 2] ** 2
    p2 = ((C[:, 0, 0] - q) ** 2 + (C[:, 1, 1] - q) ** 2 + (C[:, 2, 2] - q) ** 2 + 2.0 * off) / 6.0
    p = np.sqrt(p2)
    ps = np.where(p > 0, p, 1.0)
    B = (C - q[:, None, None] * np.eye(3)) / ps[:, None, None]
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    w3 = q + 2.0 * p * np.cos(phi)
    w1 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    w = np.stack([w1, 3.0 * q - w1 - w3, w3], axis=1)
    V = np.empty((n, 3, 3))
    for j in (0, 2):
        M = C - w[:, j, None, None] * np.eye(3)
        cands = np.stack([np.cross(M[:, 0], M[:, 1]), np.cross(M[:, 0], M[:, 2]), np.cross(M[:, 1], M[:, 2])], axis=1)
        nn = (cands * cands).sum(axis=2)
        best = nn.argmax(axis=1)
        v = cands[np.arange(n), best]
        V[:, :, j] = v / np.sqrt(np.maximum(nn[np.arange(n), best], 1e-300))[:, None]
    V[:, :, 1] = np.cross(V[:, :, 2], V[:, :, 0])
    scale = np.maximum(np.abs(w).max(axis=1), 1e-300)
    res = np.abs(np.matmul(C, V) - V * w[:, None, :]).max(axis=(1, 2)) / scale
    orth = np.abs(np.matmul(V.transpose(0, 2, 1), V) - np.eye(3)).max(axis=(1, 2))
    bad = ~((res <= tol * 10) & (orth <= tol * 10)) | (p == 0)
    if bad.any():
        w[bad], V[bad] = np.linalg.eigh(C[bad])
    return w, V


def pca_neighborhood(xyz, k: int = 25, radius: float = 1.0, k_min: int = 8, tree: cKDTree | None = None, sensor_origin=(0.0, 0.0, 0.0),
                     query=None) -> PcaResult:
    """PCA over the nearest ``k`` points inside ``radius`` (the query point included).

    ``query`` optionally restricts evaluation to a subset of point indices.
    """
    if k < 3 or radius <= 0:
        raise ValueError("need k >= 3 and radius > 0")
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    if n == 0:
        z = np.zeros((0, 3))
        e = np.zeros(0)
        return PcaResult(z, z, z, z, e, e, e, np.zeros(0, np.int64), np.zeros(0, bool))
    tree = kdtree(xyz) if tree is None else tree
    centers = xyz if query is None else xyz[np.asarray(query)]
    _, idx = tree.query(centers, k=min(k, n), distance_upper_bound=inclusive(radius))
    idx = np.asarray(idx).reshape(len(centers), -1)
    C, cnt = covariance_from_neighbors(xyz, idx, centers)
    w, V = eigh3(C)
    w = np.clip(w[:, ::-1], 0.0, None)
    V = V[:, :, ::-1]
    l1, l2, l3 = w[:, 0], w[:, 1], w[:, 2]
    valid = (cnt >= k_min) & (l1 > 0.0)
    s1 = np.where(valid, l1, 1.0)
    lin = np.where(valid, (l1 - l2) / s1, 0.0)
    pla = np.where(valid, (l2 - l3) / s1, 0.0)
    tot = np.where(valid, l1 + l2 + l3, 1.0)
    curv = np.where(valid, l3 / tot, 0.0)
    primary = _canonical_primary(V[:, :, 0])
    normal = V[:, :, 2]
    toward = np.asarray(sensor_origin, dtype=float) - centers
    normal = normal * np.where(np.einsum("ni,ni->n", normal, toward) < 0, -1.0, 1.0)[:, None]
    return PcaResult(w, primary, V[:, :, 1], normal, lin, pla, curv, cnt, valid)


def _canonical_primary(v):
    # nonnegative z; near-horizontal vectors get nonnegative x (then y)
    v = v.copy()
    key = np.where(np.abs(v[:, 2]) > 1e-6, v[:, 2], np.where(np.abs(v[:, 0]) > 1e-6, v[:, 0], v[:, 1]))
    v[key < 0] *= -1.0
    return v


# ------------------------------------------------------------------- classification


def classify(pca: PcaResult, height, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Label per point (FeatureClass value or UNCLASSIFIED). Linear beats planar beats vertex."""
    cfg = cfg or FeatureConfig()
    height = np.asarray(height, dtype=float)
    cz = np.cos(np.radians(cfg.vertical_deg))
    sz = np.sin(np.radians(cfg.vertical_deg))
    vz = np.abs(pca.primary[:, 2])
    nz = np.abs(pca.normal[:, 2])
    labels = np.full(len(pca), UNCLASSIFIED, dtype=np.int8)
    linear = pca.valid & (pca.linearity > cfg.linearity_min)
    planar = pca.valid & (pca.planarity > cfg.planarity_min)
    free = labels == UNCLASSIFIED
    for mask, cls in (
        (linear & (vz > cz), FeatureClass.PILLAR),
        (linear & (vz < sz), FeatureClass.BEAM),
        (planar & (nz < sz), FeatureClass.FACADE),
        (planar & (nz > cz) & (height > cfg.roof_height_min), FeatureClass.ROOF),
        (pca.valid & (pca.curvature > cfg.curvature_min), FeatureClass.VERTEX),
    ):
        hit = mask & free
        labels[hit] = cls
        free &= ~hit
    return labels


# ------------------------------------------------------------------ NMS / voxels


def nms(xyz, score, radius: float) -> np.ndarray:
    """Keep points whose score is a strict local maximum within ``radius``
    (ties resolved toward the lower index). Kept points are pairwise farther
    apart than ``radius``."""
    xyz = np.asarray(xyz, dtype=np.float64)
    keep = np.ones(len(xyz), dtype=bool)
    if len(xyz) < 2 or radius <= 0:
        return keep
    pairs = kdtree(xyz).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return keep
    i, j = pairs[:, 0], pairs[:, 1]
    s = np.asarray(score)
    i_wins = (s[i] > s[j]) | ((s[i] == s[j]) & (i < j))
    keep[np.where(i_wins, j, i)] = False
    return keep


def voxel_downsample(xyz, voxel: float, score=None) -> np.ndarray:
    """Indices (ascending) of one representative per voxel: the highest score,
    ties toward the lower index."""
    xyz = np.asarray(xyz, dtype=np.float64)
    n = len(xyz)
    if n == 0 or voxel <= 0:
        return np.arange(n)
    key = np.floor(xyz / voxel).astype(np.int64)
    key -= key.min(axis=0)
    dims = key.max(axis=0) + 1
    lin = (key[:, 0] * dims[1] + key[:, 1]) * dims[2] + key[:, 2]
    score = np.zeros(n) if score is None else np.asarray(score, dtype=float)
    order = np.lexsort((np.arange(n), -score, lin))
    first = np.ones(n, dtype=bool)
    first[1:] = lin[order][1:] != lin[order][:-1]
    return np.sort(order[first])


def nms_downsample(frame: FeatureCloud, nms_radius=0.25, voxel_dense: float = 0.3, voxel_sparse: float = 0.9,
                   ground_voxel_dense: float = 0.8, ground_voxel_sparse: float = 1.6) -> tuple[FeatureCloud, FeatureCloud]:
    """Per-class NMS (not for ground) followed by dense then sparse voxel downsampling.

    ``nms_radius`` may be a float or a per-class mapping. The sparse cloud is a
    subset of the dense one.
    """
    dense, sparse = FeatureCloud(), FeatureCloud()
    for c, s in frame.items():
        if c == FeatureClass.GROUND:
            vd, vs = ground_voxel_dense, ground_voxel_sparse
            kept = s
        else:
            vd, vs = voxel_dense, voxel_sparse
            r = nms_radius.get(c, 0.0) if isinstance(nms_radius, dict) else nms_radius
            kept = s.subset(nms(s.xyz, s.score, r))
        d = kept.subset(voxel_downsample(kept.xyz, vd, kept.score))
        dense[c] = d
        sparse[c] = d.subset(voxel_downsample(d.xyz, vs, d.score))
    return dense, sparse


# ----------------------------------------------------------------------------- NCC


def encode_ncc(vertices: FeatureSet, cloud: FeatureCloud, radius: float = 3.0, intensity_max: float = 255.0, height_max: float = 30.0) -> np.ndarray:
    """Descriptor rows ``[F, P, B, R ratios, mean intensity / I_max, height / h_max]``.

    The neighbourhood is every feature point of ``cloud`` within ``radius`` of
    the vertex, excluding points coincident with it. An empty neighbourhood
    falls back to the vertex's own intensity.
    """
    if radius <= 0 or intensity_max <= 0 or height_max <= 0:
        raise ValueError("radius, intensity_max and height_max must be positive")
    m = len(vertices)
    out = np.zeros((m, 6))
    if m == 0:
        return out
    pts, labels = cloud.merged()
    own_i = vertices.intensity / intensity_max
    out[:, 4] = own_i
    out[:, 5] = vertices.height / height_max
    if len(pts):
        pairs = kdtree(vertices.xyz).sparse_distance_matrix(kdtree(pts.xyz), radius, output_type="ndarray")
        # coincident points report distance 0 and are excluded with it
        pairs = pairs[pairs["v"] > 0]
        vi, pj = pairs["i"], pairs["j"]
        total = np.bincount(vi, minlength=m).astype(float)
        has = total > 0
        lab = labels[pj]
        for col, c in enumerate((FeatureClass.FACADE, FeatureClass.PILLAR, FeatureClass.BEAM, FeatureClass.ROOF)):
            out[has, col] = np.bincount(vi, weights=(lab == c).astype(float), minlength=m)[has] / total[has]
        out[has, 4] = np.bincount(vi, weights=pts.intensity[pj], minlength=m)[has] / total[has] / intensity_max
    return np.clip(out, 0.0, 1.0)


# ------------------------------------------------------------------------ pipeline


def height_above_ground(split: GroundSplit, ground_idx) -> np.ndarray:
    """Height of every point over the refined ground of its cell; cells without
    ground use the median ground height."""
    h = split.height
    if len(ground_idx) == 0:
        return h - h.min()
    level = np.full(len(split.cell_min), np.nan)
    gcell = split.cell_id[ground_idx]
    tmp = np.full(len(split.cell_min), np.inf)
    np.minimum.at(tmp, gcell, h[ground_idx])
    has = np.isfinite(tmp)
    level[has] = tmp[has]
    fallback = float(np.median(h[ground_idx]))
    lv = level[split.cell_id]
    return h - np.where(np.isnan(lv), fallback, lv)


def extract_features(cloud: PointCloud, cfg: RunConfig | None = None, reference_plane: Pose | None = None,
                     with_ncc: bool = True) -> FeatureFrame:
    cfg = cfg or RunConfig()
    g: GroundConfig = cfg.ground
    f: FeatureConfig = cfg.features
    t0 = time.perf_counter()
    xyz = cloud.xyz.astype(np.float64)
    rng = np.random.default_rng(f.seed)  # identical scans give identical features
    rel = xyz - cloud.sensor_origin
    r = np.linalg.norm(rel, axis=1)
    sel = np.flatnonzero((r >= f.min_range) & (r <= f.max_range))
    xyz, inten = xyz[sel], cloud.intensity[sel].astype(np.float64)
    fid = cloud.frame_id
    if len(xyz) == 0:
        empty = FeatureCloud()
        return FeatureFrame(empty, FeatureCloud(), fid)

    split = ground_filter(xyz, g.grid_size, g.delta_h1, g.delta_h2, reference_plane)
    up = np.array([0.0, 0.0, 1.0]) if reference_plane is None else reference_plane.R[:, 2]
    rg = split.rough_ground
    g_local, g_normals = refine_ground(xyz[rg], split.cell_id[rg], g.ransac_iters, g.inlier_dist, rng, g.min_points, up)
    g_idx = rg[g_local]
    hag = height_above_ground(split, g_idx)
    ground = FeatureSet(xyz[g_idx], g_normals, inten[g_idx], np.ones(len(g_idx)), hag[g_idx], np.full(len(g_idx), fid, np.int64))
    t1 = time.perf_counter()

    ng = split.nonground
    if len(ng) > f.nonground_max_points:
        ng = np.sort(rng.choice(ng, f.nonground_max_points, replace=False))
    pca = pca_neighborhood(xyz[ng], f.pca_k, f.pca_radius, f.pca_k_min, sensor_origin=cloud.sensor_origin)
    labels = classify(pca, hag[ng], f)
    raw = FeatureCloud({FeatureClass.GROUND: ground})
    score_of = {
        FeatureClass.FACADE: pca.planarity, FeatureClass.ROOF: pca.planarity,
        FeatureClass.PILLAR: pca.linearity, FeatureClass.BEAM: pca.linearity,
        FeatureClass.VERTEX: pca.curvature,
    }
    for c in NONGROUND:
        m = labels == c
        if c in LINEAR:
            d = pca.primary[m]
        elif c in PLANAR:
            d = pca.normal[m]
        else:
            d = np.zeros((int(m.sum()), 3))
        p = ng[m]
        raw[c] = FeatureSet(xyz[p], d, inten[p], score_of[c][m], hag[p], np.full(len(p), fid, np.int64))
    dense, sparse = nms_downsample(raw, f.nms_radius, f.voxel_dense, f.voxel_sparse, g.voxel_dense, g.voxel_sparse)
    t2 = time.perf_counter()
    if with_ncc:
        ncc = encode_ncc(dense[FeatureClass.VERTEX], dense, f.ncc_radius, f.intensity_max, f.height_max)
    else:
        ncc = np.zeros((0, 6))
    t3 = time.perf_counter()
    timing = {"ground": (t1 - t0) * 1e3, "nonground": (t2 - t1) * 1e3, "ncc": (t3 - t2) * 1e3}
    return FeatureFrame(dense, sparse, fid, ncc, timing)
