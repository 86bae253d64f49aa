import itertools
import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import room_contour

from gridmerge.errors import DegenerateInput, ResolutionMismatch, TooFewMatches, TooFewPoints
from gridmerge.features import FeatureMatch
from gridmerge.gridmap import OccupancyGrid
from gridmerge.motion import Motion2D, wrap_angle
from gridmerge.pairwise import (
    MapFeatures,
    PSI_TIE_TOL,
    PairwiseParams,
    TricpConfig,
    _trim,
    estimate_rigid,
    occupancy_conflict,
    pairwise_merge,
    ransac_initial_motion,
    tricp,
)
from gridmerge.synth import SynthParams, generate_synthetic


def objective(theta, t, src, dst):
    c, s = np.cos(theta), np.sin(theta)
    x = c * src[:, 0] - s * src[:, 1] + t[0] - dst[:, 0]
    y = s * src[:, 0] + c * src[:, 1] + t[1] - dst[:, 1]
    return float(np.sum(x * x + y * y))


def test_rigid_identity():
    src = np.array([[0.0, 0.0], [3.0, 1.0], [1.0, 4.0]])
    m = estimate_rigid(src, src)
    assert abs(m.theta) < 1e-12 and abs(m.tx) < 1e-12 and abs(m.ty) < 1e-12


def test_rigid_quarter_turn():
    src = np.array([[1.0, 0.0], [0.0, 2.0], [-3.0, 1.0]])
    dst = src @ np.array([[0.0, 1.0], [-1.0, 0.0]])
    m = estimate_rigid(src, dst)
    assert m.theta == pytest.approx(math.pi / 2, abs=1e-12)
    assert abs(m.tx) < 1e-12 and abs(m.ty) < 1e-12


def test_rigid_errors():
    with pytest.raises(DegenerateInput):
        estimate_rigid([[1.0, 1.0], [1.0, 1.0]], [[0.0, 0.0], [2.0, 0.0]])
    with pytest.raises(ValueError):
        estimate_rigid([[1.0, 1.0]], [[0.0, 0.0]])


def grid_search(src, dst, step=1e-3):
    """Exhaustive scan over theta (full circle) and a translation lattice.

    The objective is a convex quadratic in t for fixed theta, so the lattice
    only needs to cover a few steps around the per-theta optimum.
    """
    thetas = np.arange(-math.pi, math.pi, step)
    c, s = np.cos(thetas)[:, None], np.sin(thetas)[:, None]
    rx = c * src[:, 0] - s * src[:, 1]
    ry = s * src[:, 0] + c * src[:, 1]
    t_center = np.column_stack([(dst[:, 0] - rx).mean(axis=1), (dst[:, 1] - ry).mean(axis=1)])
    lattice = np.round(t_center / step)[:, None, :] + np.array(list(itertools.product(range(-3, 4), repeat=2)))[None]
    best = (math.inf, None)
    for k in range(len(thetas)):
        for t in lattice[k] * step:
            f = objective(thetas[k], t, src, dst)
            if f < best[0]:
                best = (f, (thetas[k], t))
    return best


@pytest.mark.parametrize("seed", range(3))
def test_rigid_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-10, 10, size=(10, 2))
    truth = Motion2D(0.7, 3.0, -2.0)
    dst = truth.apply(src) + rng.normal(0, 0.01, size=src.shape)
    m = estimate_rigid(src, dst)
    f_est = objective(m.theta, (m.tx, m.ty), src, dst)
    f_grid, (theta, t) = grid_search(src, dst)
    neighbours = [
        objective(theta + a * 1e-3, t + np.array([b, c]) * 1e-3, src, dst)
        for a, b, c in itertools.product((-1, 0, 1), repeat=3)
    ]
    assert f_est <= f_grid + 1e-12
    assert f_grid - f_est <= max(neighbours) - f_grid


motion_st = st.builds(Motion2D, st.floats(-math.pi, math.pi), st.floats(-100, 100), st.floats(-100, 100))


@given(motion_st, st.integers(0, 2**32 - 1))
def test_rigid_exact_recovery(truth, seed):
    src = np.random.default_rng(seed).uniform(-50, 50, size=(10, 2))
    m = estimate_rigid(src, truth.apply(src))
    assert abs(wrap_angle(m.theta - truth.theta)) < 1e-12
    assert math.hypot(m.tx - truth.tx, m.ty - truth.ty) < 1e-10
    r = m.rotation()
    assert np.allclose(r.T @ r, np.eye(2), atol=1e-12)


def _matched(src, dst):
    matches = [FeatureMatch(i, i, 0.0) for i in range(len(src))]
    return matches, src, dst


def test_ransac_exact():
    rng = np.random.default_rng(4)
    src = rng.uniform(0, 100, size=(6, 2))
    truth = Motion2D(-1.1, 12.0, 5.0)
    matches, kp_p, kp_q = _matched(src, truth.apply(src))
    m, count = ransac_initial_motion(matches, kp_p, kp_q, 2.0, 200, 0)
    assert count == 6
    assert abs(m.theta - truth.theta) < 1e-9 and math.hypot(m.tx - truth.tx, m.ty - truth.ty) < 1e-8


def test_ransac_with_outliers():
    truth = Motion2D(0.4, -7.0, 3.0)
    failures = 0
    for run in range(100):
        rng = np.random.default_rng(1000 + run)
        src = rng.uniform(0, 100, size=(8, 2))
        dst = truth.apply(src)
        dst[4:] = rng.uniform(0, 100, size=(4, 2))
        matches, kp_p, kp_q = _matched(src, dst)
        m, count = ransac_initial_motion(matches, kp_p, kp_q, 2.0, 200, run)
        ok = count == 4 and abs(m.theta - truth.theta) < 1e-9
        failures += not ok
    # analytic failure probability per run is (1 - (4/8)(3/7))^200 < 1e-20
    assert failures == 0


def test_ransac_deterministic():
    rng = np.random.default_rng(9)
    src = rng.uniform(0, 50, size=(12, 2))
    dst = rng.uniform(0, 50, size=(12, 2))
    matches, kp_p, kp_q = _matched(src, dst)
    a = ransac_initial_motion(matches, kp_p, kp_q, 2.0, 50, 17)
    b = ransac_initial_motion(matches, kp_p, kp_q, 2.0, 50, 17)
    assert a == b


def test_ransac_too_few():
    with pytest.raises(TooFewMatches):
        ransac_initial_motion([FeatureMatch(0, 0, 0.0)], np.zeros((1, 2)), np.zeros((1, 2)))


def brute_trim(sq, n_min, lam):
    n_p = len(sq)
    s = np.sort(sq)
    psis = {n: s[:n].sum() / (n * (n / n_p) ** (1 + lam)) for n in range(n_min, n_p + 1)}
    low = min(psis.values())
    n = max(k for k, v in psis.items() if v <= low + PSI_TIE_TOL)
    return n, psis[n]


@given(st.lists(st.floats(0, 100), min_size=1, max_size=40), st.floats(0.05, 1.0), st.floats(0, 4))
def test_trim_matches_brute_force(values, xi_min, lam):
    sq = np.array(values)
    n_min = max(1, math.ceil(xi_min * len(sq) - 1e-9))
    n, psi, _ = _trim(sq, n_min, lam)
    n_ref, psi_ref = brute_trim(sq, n_min, lam)
    assert psi == pytest.approx(psi_ref, rel=1e-9, abs=1e-12)
    assert n == n_ref or abs(psi - psi_ref) <= 2 * PSI_TIE_TOL


def test_tricp_identity():
    p = room_contour()
    res = tricp(p, p, Motion2D.identity())
    assert abs(res.motion.theta) < 1e-12 and math.hypot(res.motion.tx, res.motion.ty) < 1e-12
    assert res.overlap == 1.0
    assert res.objective < 1e-12


def test_tricp_exact_transform():
    p = room_contour()
    truth = Motion2D(0.2, 4.0, 1.0)
    init = Motion2D(0.2 + 0.08, 4.0 - 1.5, 1.0 + 1.2)
    res = tricp(p, truth.apply(p), init)
    assert abs(res.motion.theta - truth.theta) < 1e-6
    assert math.hypot(res.motion.tx - truth.tx, res.motion.ty - truth.ty) < 1e-4


def test_tricp_fixed_point():
    p = room_contour(seed=2)
    truth = Motion2D(-0.9, 10.0, -3.0)
    res = tricp(p, truth.apply(p), truth)
    delta = truth.inverse() @ res.motion
    assert abs(delta.theta) < 1e-9 and math.hypot(delta.tx, delta.ty) < 1e-9


def partial_overlap_case(seed):
    rng = np.random.default_rng(seed)
    q = room_contour(seed=seed)
    truth = Motion2D(rng.uniform(-math.pi, math.pi), *rng.uniform(-30, 30, size=2))
    # P sees 70% of the contour plus 30% structure from elsewhere
    keep = q[:140]
    stray = room_contour(60, seed + 50) * 0.5 + np.array([150.0, 150.0])
    p = truth.inverse().apply(np.vstack([keep, stray]))
    init = Motion2D(truth.theta + rng.uniform(-0.1, 0.1), truth.tx + rng.uniform(-1.4, 1.4), truth.ty + rng.uniform(-1.4, 1.4))
    return p, q, truth, init


@pytest.mark.parametrize("seed", range(5))
def test_tricp_partial_overlap(seed):
    p, q, truth, init = partial_overlap_case(seed)
    res = tricp(p, q, init)
    assert 0.6 <= res.overlap <= 0.8
    assert abs(wrap_angle(res.motion.theta - truth.theta)) < 0.01
    assert math.hypot(res.motion.tx - truth.tx, res.motion.ty - truth.ty) < 0.2
    assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))


def test_tricp_brute_force_correspondences():
    p, q, truth, init = partial_overlap_case(7)
    res = tricp(p, q, init, TricpConfig(max_iterations=1))
    # one iteration from init: recompute with brute-force nearest neighbours
    moved = init.apply(p)
    d2 = ((moved[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
    nn = d2.argmin(axis=1)
    n, _, order = _trim(d2.min(axis=1), math.ceil(0.2 * len(p)), 2.0)
    keep = order[:n]
    expected = estimate_rigid(p[keep], q[nn[keep]])
    assert res.motion.theta == pytest.approx(expected.theta, abs=1e-12)
    assert (res.motion.tx, res.motion.ty) == pytest.approx((expected.tx, expected.ty), abs=1e-9)


def test_tricp_errors():
    with pytest.raises(TooFewPoints):
        tricp(np.zeros((5, 2)), room_contour(), Motion2D.identity())


def test_tricp_config_validation():
    for bad in (dict(lam=-1), dict(xi_min=0), dict(xi_min=1.5), dict(max_iterations=0), dict(epsilon=0)):
        with pytest.raises(ValueError):
            TricpConfig(**bad)


@pytest.fixture(scope="module")
def world():
    return generate_synthetic(seed=0)


def test_pairwise_identical(world):
    _, maps = world
    est = pairwise_merge(maps[1], maps[1], 0, 1)
    assert est is not None
    assert abs(est.motion.theta) < 1e-3 and math.hypot(est.motion.tx, est.motion.ty) < 0.1
    assert est.overlap > 0.95
    assert est.inliers >= 4


def test_pairwise_recovers_truth(world):
    w, maps = world
    feats = [MapFeatures.from_grid(m) for m in maps]
    checked = 0
    for i, j in itertools.combinations(range(len(maps)), 2):
        est = pairwise_merge(maps[i], maps[j], i, j, feats_p=feats[i], feats_q=feats[j])
        truth = w.motions[i].inverse() @ w.motions[j]
        if est is None:
            continue
        delta = truth.inverse() @ est.motion
        assert abs(delta.theta) < 0.01
        assert math.hypot(delta.tx, delta.ty) < 1.0
        assert est.overlap >= TricpConfig().xi_min
        checked += 1
    assert checked >= len(maps) - 1


def test_pairwise_order_independent(world):
    _, maps = world
    a = pairwise_merge(maps[0], maps[1], 0, 1)
    b = pairwise_merge(maps[1], maps[0], 0, 1)
    assert a is not None and b is not None
    delta = a.motion.inverse() @ b.motion.inverse()
    assert abs(delta.theta) < 1e-9 and math.hypot(delta.tx, delta.ty) < 1e-6


def test_pairwise_disjoint():
    params = SynthParams(n_maps=2, world_size=260, room_count=7, window_size=110, min_overlap=0.3)
    absent = 0
    for seed in range(20):
        _, a = generate_synthetic(params, seed)
        _, b = generate_synthetic(params, seed + 1000)
        diag = {}
        est = pairwise_merge(a[0], b[1], 0, 1, diagnostics=diag)
        absent += est is None
        if est is None:
            assert diag["stage"]
    assert absent == 20


def test_pairwise_resolution_mismatch():
    a = OccupancyGrid(np.zeros((20, 20)), 0.05)
    b = OccupancyGrid(np.zeros((20, 20)), 0.1)
    with pytest.raises(ResolutionMismatch):
        pairwise_merge(a, b, 0, 1)


def test_pairwise_featureless():
    a = OccupancyGrid(np.ones((40, 40)), 0.05)
    diag = {}
    assert pairwise_merge(a, a, 0, 1, diagnostics=diag) is None
    assert diag["stage"].startswith("ransac")


def test_conflict_identical(world):
    _, maps = world
    assert occupancy_conflict(maps[2], maps[2], Motion2D.identity()) == 0.0


def test_alignment_not_worse_than_identity(world):
    _, maps = world
    est = pairwise_merge(maps[0], maps[1], 0, 1)
    p = MapFeatures.from_grid(maps[1]).edges
    q = MapFeatures.from_grid(maps[0]).edges
    from scipy.spatial import cKDTree

    tree = cKDTree(q)
    k = math.ceil(est.overlap * len(p))
    aligned = np.sort(tree.query(est.motion.apply(p))[0])[:k].mean()
    raw = np.sort(tree.query(p)[0])[:k].mean()
    assert aligned <= raw


def test_tricp_runtime():
    p, q, _, init = partial_overlap_case(3)
    start = time.perf_counter()
    tricp(p, q, init)
    assert time.perf_counter() - start < 0.5


def test_params_default():
    prm = PairwiseParams()
    assert prm.ransac_iterations == 200 and prm.min_inliers == 4 and prm.d_thr_feat == 2.0
