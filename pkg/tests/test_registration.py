import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import consistent_scene, nonlinear_oracle, qr_oracle, random_correspondences, random_rigid, unit, pose_error
from mulls.config import RegistrationConfig, RunConfig
from mulls.core import Pose, from_tangent
from mulls.features import FeatureClass, FeatureCloud, FeatureSet, extract_features
from mulls.registration import (
    Correspondences,
    DegeneracyError,
    FeatureIndex,
    Metric,
    RegistrationError,
    UnderdeterminedError,
    _Linearizer,
    accumulate,
    assign_weights,
    associate,
    build_rows,
    evaluate_quality,
    irls_weight_residual,
    mulls_icp,
    normal_equations,
    overlap_ratio,
    solve_normal_equations,
    solve_step,
    stacked_rows,
    weight_balanced,
    weight_intensity,
    weight_residual,
    write_trace_csv,
)
from mulls.synthetic import generate_scene, structured_scene


# -------------------------------------------------------------------------- rows


def test_build_rows_examples():
    A, b = build_rows(Metric.POINT, [1, 2, 3], [1, 2, 3])
    np.testing.assert_array_equal(b, 0)
    A, b = build_rows(Metric.PLANE, [1, 2, 0], [1, 2, 0.5], [0, 0, 1])
    np.testing.assert_allclose(A, [[0, 0, 1, 2, -1, 0]], atol=0)
    np.testing.assert_allclose(b, [0.5], atol=0)
    A, b = build_rows(Metric.LINE, [1, 0, 0], [1, 0.2, 0], [0, 0, 1])
    np.testing.assert_allclose(b, [-0.2, 0, 0], atol=1e-15)


def test_stacked_rows_match_per_pair_rows():
    c = random_correspondences(np.random.default_rng(0), 60)
    A, b, w = stacked_rows(c)
    rows = {m: [build_rows(m, c.p[i], c.q[i], c.direction[i]) for i in np.flatnonzero(c.metric == m)] for m in Metric}
    A_ref = np.vstack([r[0] for m in (Metric.POINT, Metric.PLANE, Metric.LINE) for r in rows[m]])
    b_ref = np.concatenate([r[1] for m in (Metric.POINT, Metric.PLANE, Metric.LINE) for r in rows[m]])
    np.testing.assert_allclose(A, A_ref, atol=1e-15)
    np.testing.assert_allclose(b, b_ref, atol=1e-15)
    assert len(w) == c.n_rows()


@pytest.mark.parametrize("metric", list(Metric))
def test_rows_are_first_order_in_the_exact_residual(metric):
    # A xi - b must agree with the residual of the exactly moved point up to O(|xi|^2)
    rng = np.random.default_rng(int(metric))
    ratios = []
    for _ in range(50):
        p, q = rng.normal(size=3) * 5, rng.normal(size=3) * 5
        v = unit(rng.normal(size=3))
        A, b = build_rows(metric, p, q, v)
        for scale in (1e-3, 1e-4):
            xi = rng.normal(size=6) * scale
            r = from_tangent(xi).apply(p) - q
            exact = {Metric.POINT: r, Metric.PLANE: np.array([v @ r]), Metric.LINE: np.cross(v, r)}[metric]
            ratios.append(np.abs(A @ xi - b - exact).max() / (xi @ xi))
    assert max(ratios) < 50.0


# ----------------------------------------------------------------------- weights


def test_weight_examples():
    assert weight_residual(0.3, 0.1, 2) == 1.0
    assert weight_residual(0.0, 0.1, 1) == 0.0
    assert weight_residual(0.1, 0.1, 1) == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    counts = {FeatureClass.FACADE: 100, FeatureClass.PILLAR: 10, FeatureClass.BEAM: 20, FeatureClass.GROUND: 50}
    assert weight_balanced(FeatureClass.FACADE, counts) == 1.0
    assert weight_balanced(FeatureClass.GROUND, counts) == pytest.approx(1.0, abs=1e-15)
    assert weight_balanced(FeatureClass.GROUND, {FeatureClass.BEAM: 50, FeatureClass.GROUND: 50}) == 0.1
    assert weight_intensity(0.0, 255.0) == 1.0
    assert weight_intensity(255.0, 255.0) == pytest.approx(np.exp(-1), abs=1e-15)
    assert np.all(np.diff(weight_intensity(np.linspace(0, 500, 50), 255.0)) < 0)
    with pytest.raises(ValueError):
        weight_residual(0.1, 0.0)


@pytest.mark.parametrize("kappa", [0.0, 1.0, 2.0, -1.0, 4.0])
def test_weight_residual_continuous_and_irls_form(kappa):
    # refining the grid tenfold shrinks the largest jump tenfold: no discontinuity
    jump = lambda n: np.abs(np.diff(weight_residual(np.linspace(0, 5, n), 1.0, kappa) * np.ones(n))).max()
    assert jump(200001) <= 0.11 * jump(20001) + 1e-15
    eps = np.linspace(0, 5, 20001)
    w = weight_residual(eps, 1.0, kappa) * np.ones_like(eps)
    irls = irls_weight_residual(eps, 1.0, kappa) * np.ones_like(eps)
    nz = eps > 0
    if kappa != 2:
        np.testing.assert_allclose(irls[nz] * eps[nz], w[nz], rtol=1e-12)
    assert irls[0] == 1.0


def test_assign_weights_product():
    rng = np.random.default_rng(1)
    c = random_correspondences(rng, 30)
    c.dI = rng.uniform(0, 100, 30)
    cfg = RegistrationConfig()
    w = assign_weights(c, cfg)
    ref = irls_weight_residual(c.d, cfg.inlier_noise, cfg.kappa)
    if cfg.use_intensity_weight:
        ref = ref * weight_intensity(c.dI, 255.0)
    if cfg.use_balanced_weight:
        ref = ref * weight_balanced(c.cls, c.class_counts())
    np.testing.assert_allclose(w, ref, rtol=1e-15)


# ------------------------------------------------------------------------- solve


def test_zero_residual_gives_zero_step():
    c = random_correspondences(np.random.default_rng(2), 30)
    c.q = c.p.copy()
    xi, _ = solve_step(c)
    np.testing.assert_array_equal(xi, 0)


def test_three_orthogonal_planes_recover_translation():
    rng = np.random.default_rng(3)
    t = np.array([0.1, -0.2, 0.3])
    parts = []
    for axis in range(3):
        p = rng.uniform(1, 5, (30, 3))
        p[:, axis] = 0.0
        n = np.zeros(3)
        n[axis] = 1.0
        parts.append(Correspondences.build(p, p + t, Metric.PLANE, np.tile(n, (30, 1))))
    xi, _ = solve_step(Correspondences.concat(parts))
    np.testing.assert_allclose(xi[:3], t, atol=1e-9)
    np.testing.assert_allclose(xi[3:], 0, atol=1e-9)


def test_solve_step_matches_qr():
    rng = np.random.default_rng(4)
    for _ in range(20):
        c = random_correspondences(rng, int(rng.integers(10, 300)))
        xi, _ = solve_step(c)
        ref = qr_oracle(c)
        assert np.linalg.norm(xi - ref) <= 1e-9 * np.linalg.norm(ref)


def test_one_step_matches_nonlinear_minimiser():
    rng = np.random.default_rng(5)
    xi_true = np.r_[0.05, -0.03, 0.08, unit(rng.normal(size=3)) * 0.008]
    c = consistent_scene(rng, xi_true, extent=2.0)
    xi, _ = solve_step(c)
    nl = nonlinear_oracle(c)
    assert np.abs(nl - xi_true).max() < 1e-6
    assert np.abs(xi - xi_true).max() < 1e-4


def test_degenerate_single_plane_names_direction():
    rng = np.random.default_rng(6)
    p = np.c_[rng.uniform(-5, 5, (50, 2)), np.zeros(50)]
    c = Correspondences.build(p, p + [0, 0, 0.1], Metric.PLANE, np.tile([0, 0, 1.0], (50, 1)))
    with pytest.raises(DegeneracyError, match="unobservable") as err:
        solve_step(c)
    assert err.value.direction is not None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_chunked_accumulation_matches_sequential(seed, chunk):
    rng = np.random.default_rng(seed)
    A, b, w = rng.normal(size=(200, 6)), rng.normal(size=200), rng.uniform(0, 2, 200)
    a = accumulate(A, b, w)
    c = accumulate(A, b, w, chunk)
    np.testing.assert_allclose(c.ATA, a.ATA, rtol=0, atol=1e-10 * np.abs(a.ATA).max())
    np.testing.assert_allclose(c.ATb, a.ATb, rtol=0, atol=1e-10 * np.abs(a.ATb).max())
    np.testing.assert_array_equal(c.ATA, c.ATA.T)
    assert np.linalg.eigvalsh(c.ATA).min() >= -1e-10 * np.abs(c.ATA).max()


def test_objective_non_increasing_on_fixed_pairs():
    rng = np.random.default_rng(7)
    xi_true = np.r_[0.3, -0.2, 0.1, 0.05, -0.04, 0.06]
    c = consistent_scene(rng, xi_true, extent=5.0)
    c.q = c.q + rng.normal(size=c.q.shape) * 0.01
    T = Pose.identity()
    costs = []
    for _ in range(6):
        moved = Correspondences.build(T.apply(c.p), c.q, c.metric, c.direction)
        costs.append(normal_equations(moved).bPb)
        xi, _ = solve_step(moved)
        T = from_tangent(xi) @ T
    assert all(b <= a * (1 + 1e-12) for a, b in zip(costs, costs[1:]))


# ----------------------------------------------------------------------- quality


def test_quality_hand_computed():
    rng = np.random.default_rng(8)
    A, b, w = rng.normal(size=(7, 6)), rng.normal(size=7), rng.uniform(0.5, 2, 7)
    neq = accumulate(A, b, w)
    xi = solve_normal_equations(neq)
    r = A @ xi - b
    sigma, info = evaluate_quality(neq, xi)
    assert abs(sigma - np.sqrt(r @ (w * r) / 1)) < 1e-12
    np.testing.assert_allclose(info, (A.T * w) @ A / sigma**2, rtol=1e-12)


def test_quality_perfect_fit_and_errors():
    A = np.random.default_rng(9).normal(size=(10, 6))
    neq = accumulate(A, np.zeros(10), np.ones(10))
    sigma, info = evaluate_quality(neq, np.zeros(6), sigma_floor=1e-4)
    assert sigma == 1e-4
    np.testing.assert_allclose(info, neq.ATA / 1e-8, rtol=1e-15)
    with pytest.raises(RegistrationError):
        evaluate_quality(accumulate(A[:6], np.zeros(6), np.ones(6)), np.zeros(6))


def test_information_invariant_to_weight_scale():
    rng = np.random.default_rng(10)
    A, b, w = rng.normal(size=(15, 6)), rng.normal(size=15), rng.uniform(0.5, 2, 15)
    neq = accumulate(A, b, w)
    s1, I1 = evaluate_quality(neq, solve_normal_equations(neq))
    neq4 = accumulate(A, b, 4 * w)
    s4, I4 = evaluate_quality(neq4, solve_normal_equations(neq4))
    assert abs(s4 - 2 * s1) < 1e-12
    np.testing.assert_allclose(I4, I1, rtol=1e-9)


# ------------------------------------------------------------- association / overlap


def small_cloud(rng, n=40, offset=0.0):
    fc = FeatureCloud()
    fc[FeatureClass.FACADE] = FeatureSet.build(rng.uniform(0, 10, (n, 3)) + offset, np.tile([1.0, 0, 0], (n, 1)))
    fc[FeatureClass.PILLAR] = FeatureSet.build(rng.uniform(0, 10, (n, 3)) + offset, np.tile([0, 0, 1.0], (n, 1)))
    fc[FeatureClass.GROUND] = FeatureSet.build(rng.uniform(0, 10, (n, 3)) + offset, np.tile([0, 0, 1.0], (n, 1)))
    return fc


def test_associate_identical_frames():
    fc = small_cloud(np.random.default_rng(11))
    c = associate(fc, fc, 1.0)
    assert len(c) == fc.total()
    np.testing.assert_array_equal(c.d, 0)
    np.testing.assert_array_equal(c.p, c.q)


def test_associate_direction_and_class_checks():
    src = FeatureCloud({FeatureClass.FACADE: FeatureSet.build([[0, 0, 0]], [[1, 0, 0]])})
    tgt = FeatureCloud({FeatureClass.FACADE: FeatureSet.build([[0.1, 0, 0]], [[0, 1, 0]]),
                        FeatureClass.PILLAR: FeatureSet.build([[0, 0, 0]], [[1, 0, 0]])})
    with pytest.raises(UnderdeterminedError):
        associate(src, tgt, 1.0)
    assert len(associate(src, tgt, 1.0, require_rows=0)) == 0
    with pytest.raises(ValueError):
        associate(src, tgt, 0.0)


def test_fused_linearizer_matches_generic_path():
    rng = np.random.default_rng(12)
    tgt = small_cloud(rng, 200)
    T = Pose.from_rotvec([0.01, -0.02, 0.03], [0.1, 0.05, -0.1])
    tgt[FeatureClass.VERTEX] = FeatureSet.build(rng.uniform(0, 10, (50, 3)))
    src = tgt.transformed(T.inverse())
    idx = FeatureIndex(tgt)
    sys = _Linearizer(src, idx, list(FeatureClass), np.cos(np.radians(30)))(T, 0.8)
    fused = accumulate(sys.A, sys.b, np.ones(len(sys.b)))
    generic = normal_equations(associate(src.transformed(T), idx, 0.8))
    np.testing.assert_allclose(fused.ATA, generic.ATA, rtol=1e-10)
    np.testing.assert_allclose(fused.ATb, generic.ATb, atol=1e-10)


def test_overlap_examples():
    rng = np.random.default_rng(13)
    fc = small_cloud(rng)
    assert overlap_ratio(fc, fc) == 1.0
    assert overlap_ratio(fc.transformed(Pose(np.eye(3), [100, 0, 0])), fc) == 0.0
    half = FeatureCloud({FeatureClass.FACADE: fc[FeatureClass.FACADE],
                         FeatureClass.PILLAR: fc[FeatureClass.PILLAR].transformed(Pose(np.eye(3), [0, 0, 50]))})
    assert overlap_ratio(half, fc, 0.5) == 0.5
    assert overlap_ratio(FeatureCloud(), fc) == 0.0


# --------------------------------------------------------------------------- ICP


@pytest.fixture(scope="module")
def scene_features():
    scene = structured_scene()
    cloud, _ = generate_scene(scene, 0)
    return extract_features(cloud)


def test_icp_identity(scene_features):
    f = scene_features
    r = mulls_icp(f.dense, f.dense)
    assert r.iterations == 1 and r.converged
    assert r.transform.allclose(Pose.identity(), 1e-12)
    assert r.overlap == 1.0
    np.testing.assert_allclose(r.information, r.information.T)


def test_icp_recovers_known_transform(scene_features, tmp_path):
    f = scene_features
    rng = np.random.default_rng(14)
    axis = unit(rng.normal(size=3))
    T = Pose.from_rotvec(axis * np.radians(2), unit(rng.normal(size=3)) * 0.3)
    r = mulls_icp(f.dense.transformed(T.inverse()), f.dense)
    dt, dr = pose_error(r.transform, T)
    assert dt < 1e-3 and dr < 0.01 and r.iterations <= 30
    assert np.linalg.eigvalsh(r.information).min() > 0
    write_trace_csv(r, tmp_path / "trace.csv")
    assert (tmp_path / "trace.csv").read_text().startswith("iteration,xi_norm,residual")


def test_icp_conjugation_invariance(scene_features):
    f = scene_features
    T = Pose.from_rotvec([0.0, 0.02, 0.03], [0.2, -0.1, 0.05])
    G = random_rigid(np.random.default_rng(15), 40, 20)
    src, tgt = f.sparse.transformed(T.inverse()), f.dense
    a = mulls_icp(src, tgt).transform
    b = mulls_icp(src.transformed(G), tgt.transformed(G)).transform
    dt, dr = pose_error(G @ a @ G.inverse(), b)
    assert dt < 1e-6 and np.radians(dr) < 1e-6


def test_icp_underdetermined_at_start():
    fc = FeatureCloud({FeatureClass.FACADE: FeatureSet.build([[0, 0, 0]], [[1, 0, 0]])})
    with pytest.raises(UnderdeterminedError):
        mulls_icp(fc, fc.transformed(Pose(np.eye(3), [50, 0, 0])))


def test_icp_literal_weight_form_still_converges(scene_features):
    cfg = RunConfig().registration
    cfg.residual_weight_form = "literal"
    T = Pose.from_rotvec([0.0, 0.0, 0.02], [0.2, 0.0, 0.0])
    r = mulls_icp(scene_features.dense.transformed(T.inverse()), scene_features.dense, cfg=cfg)
    dt, dr = pose_error(r.transform, T)
    assert dt < 0.01 and dr < 0.05
