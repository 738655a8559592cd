"""Cost terms against quadrature/brute-force oracles, engine consistency."""

import numpy as np
import pytest

from primtrack import kernels
from primtrack.costs import (CostEngine, CostWeights, PotentialParams,
                             chain_rule, chain_rule_batch, collision,
                             cost_supervision, decode_raw_batch, goal,
                             jerk_gram_matrix, smooth_l1, smooth_l1_grad,
                             smoothness, total_loss)
from primtrack.environment import PointCloud, build_esdf
from primtrack.primitives import LatticeConfig, PredictionVector, \
    build_library
from primtrack.trajectory import Trajectory


def _gauss_integral(f, a, b, n=8):
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (b - a) * x + 0.5 * (a + b)
    return 0.5 * (b - a) * np.sum(w * f(t))


def _engine(grid, rng, mode="tracking", use_kernel=True):
    cfg = LatticeConfig()
    d_F = np.column_stack([rng.uniform([0, -2, 0.5], [2, 2, 2]),
                           rng.normal(size=3), rng.normal(size=3)])
    eng = CostEngine(grid, d_F, 1.25, cfg, 1.0, 8.0, 6.0,
                     goal_p=d_F[:, 0] + np.array([6.0, 0.5, 0.2]),
                     mode=mode, position=d_F[:, 0], use_kernel=use_kernel)
    anchors = build_library(cfg)
    eng.set_anchors([a.theta for a in anchors], [a.phi for a in anchors],
                    [a.r for a in anchors])
    return eng


def _grid(rng):
    pts = rng.uniform([-1, -4, -1], [9, 4, 4], size=(20, 3))
    return build_esdf(PointCloud(pts), (-2, -5, -2), (48, 40, 28), 0.25)


# -- smoothness ------------------------------------------------------------------

def test_jerk_gram_matrix_matches_quadrature():
    for T in (0.7, 1.25, 2.5):
        Q = jerk_gram_matrix(T)
        for i in range(6):
            ci = i * (i - 1) * (i - 2)
            for j in range(6):
                cj = j * (j - 1) * (j - 2)
                ref = _gauss_integral(
                    lambda t: ci * t**max(i - 3, 0) * cj * t**max(j - 3, 0),
                    0.0, T) if ci and cj else 0.0
                assert np.isclose(Q[i, j], ref, rtol=1e-12, atol=1e-12)


def test_smoothness_matches_sampled_jerk_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d_F = rng.normal(size=(3, 3))
        d_P = rng.normal(size=(3, 3)) * 2
        T = float(rng.uniform(0.5, 3.0))
        J, _ = smoothness(d_F, d_P, T)
        traj = Trajectory.from_boundary(d_F, d_P, T)
        ref = _gauss_integral(
            lambda ts: np.array([np.sum(traj.sample(t, 3)**2) for t in ts]),
            0.0, T)
        assert np.isclose(J, ref, rtol=1e-9)


def test_smoothness_zero_for_straight_constant_velocity():
    d_F = np.array([[0.0, 1.0, 0.0]] * 3)
    d_P = np.array([[2.0, 1.0, 0.0]] * 3)  # jerk-free linear motion
    J, g = smoothness(d_F, d_P, 2.0)
    assert abs(J) < 1e-9
    assert np.allclose(g, 0.0, atol=1e-9)


def test_smoothness_batched_matches_loop():
    rng = np.random.default_rng(1)
    d_F = rng.normal(size=(3, 3))
    d_P = rng.normal(size=(5, 3, 3))
    J, g = smoothness(d_F, d_P, 1.25)
    assert J.shape == (5,) and g.shape == (5, 3, 3)
    for k in range(5):
        Jk, gk = smoothness(d_F, d_P[k], 1.25)
        assert np.isclose(J[k], Jk) and np.allclose(g[k], gk)


# -- collision -------------------------------------------------------------------

def test_collision_matches_brute_force_sum():
    rng = np.random.default_rng(2)
    grid = _grid(rng)
    pot = PotentialParams(dt=1.25 / 20.0)
    for _ in range(10):
        d_F = np.column_stack([rng.uniform([0, -2, 0], [2, 2, 2]),
                               rng.normal(size=3), rng.normal(size=3)])
        d_P = np.column_stack([rng.uniform([2, -3, 0], [7, 3, 3]),
                               rng.normal(size=3), rng.normal(size=3)])
        J, _ = collision(d_F, d_P, 1.25, grid, pot)
        traj = Trajectory.from_boundary(d_F, d_P, 1.25)
        ref = 0.0
        for k in range(21):
            d, _, _ = grid.query(traj.sample(k * pot.dt))
            if d < pot.cutoff:
                ref += np.exp((pot.d_safe - d) / pot.falloff) * pot.dt
        assert np.isclose(J, ref, rtol=1e-9)


def test_collision_requires_divisible_dt():
    rng = np.random.default_rng(3)
    grid = _grid(rng)
    with pytest.raises(ValueError):
        collision(np.zeros((3, 3)), np.eye(3), 1.25, grid,
                  PotentialParams(dt=0.3))


def test_potential_value_and_slope():
    pot = PotentialParams()
    d = np.array([0.1, 1.0, 1.99, 2.5])
    c, s = pot.value_and_slope(d)
    ref = np.exp(-(d - pot.d_safe) / pot.falloff)
    ref[d >= pot.cutoff] = 0.0
    assert np.allclose(c, ref)
    assert np.allclose(s[:3], -c[:3] / pot.falloff) and s[3] == 0.0


# -- goal ------------------------------------------------------------------------

def test_goal_tracking_quadratic():
    p = np.array([1.0, 2.0, 3.0])
    g = np.array([4.0, 6.0, 3.0])
    J, grad = goal(p, g)
    assert np.isclose(J, 25.0)
    assert np.allclose(grad, 2 * (p - g))


def test_goal_navigation_rescales_to_radius():
    origin = np.array([1.0, 0.0, 0.0])
    g = origin + np.array([40.0, 0.0, 0.0])
    p = origin + np.array([5.0, 0.0, 0.0])
    J, _ = goal(p, g, mode="navigation", radius=5.0, origin=origin)
    assert np.isclose(J, 0.0)  # endpoint at the rescaled goal exactly
    with pytest.raises(ValueError):
        goal(p, g, mode="navigation")  # radius required
    with pytest.raises(ValueError):
        goal(p, origin, mode="navigation", radius=5.0, origin=origin)


# -- chain rule --------------------------------------------------------------------

def test_chain_rule_matches_finite_differences_no_grid():
    rng = np.random.default_rng(4)
    eng = _engine(None, rng, use_kernel=False)
    raw = rng.normal(size=(15, 9)) * 0.5
    total, _, ga = eng.evaluate(raw)
    h = 1e-5
    for i in (0, 7, 14):
        fd = np.zeros(9)
        for d in range(9):
            rp, rm = raw[i].copy(), raw[i].copy()
            rp[d] += h
            rm[d] -= h
            fp = eng.evaluate(rp[None], with_grad=False, idx=np.array([i]))[0][0]
            fm = eng.evaluate(rm[None], with_grad=False, idx=np.array([i]))[0][0]
            fd[d] = (fp - fm) / (2 * h)
        assert np.linalg.norm(ga[i] - fd) / max(np.linalg.norm(ga[i]), 1e-9) \
            < 1e-6


def test_chain_rule_single_matches_batch():
    rng = np.random.default_rng(5)
    cfg = LatticeConfig()
    anchors = build_library(cfg)
    a = anchors[4]
    grad_dP = rng.normal(size=(3, 3))
    raw = rng.normal(size=9) * 0.5
    pred = PredictionVector(raw[0], raw[1], raw[2], raw[3:6], raw[6:9])
    g1 = chain_rule(grad_dP, pred, a, cfg, 1.0, 8.0, 6.0)
    g2 = chain_rule_batch(grad_dP[None], raw[None], [a.theta], [a.phi],
                          [a.r], cfg, 1.0, 8.0, 6.0)[0]
    assert np.allclose(g1, g2, atol=1e-12)


def test_decode_raw_batch_zero_offsets_hit_anchors():
    cfg = LatticeConfig()
    anchors = build_library(cfg)
    raw = np.zeros((len(anchors), 9))
    d_P, (th, ph, rr) = decode_raw_batch(
        raw, [a.theta for a in anchors], [a.phi for a in anchors],
        [a.r for a in anchors], cfg, 1.0, 8.0, 6.0)
    for k, a in enumerate(anchors):
        assert np.allclose(d_P[k, :, 0], a.endpoint, atol=1e-12)
    assert np.allclose(d_P[:, :, 1:], 0.0)
    assert np.allclose(rr, cfg.r)


# -- engine consistency ---------------------------------------------------------

def test_engine_matches_modular_functions():
    rng = np.random.default_rng(6)
    grid = _grid(rng)
    eng = _engine(grid, rng, use_kernel=False)
    raw = rng.normal(size=(15, 9)) * 0.6
    total, parts, grad = eng.evaluate(raw)
    d_P = eng.decode(raw)
    J_s, g_s = smoothness(eng.d_F, d_P, eng.horizon_T)
    J_c, g_c = collision(eng.d_F, d_P, eng.horizon_T, grid, eng.potential)
    J_g, g_g = goal(d_P[:, :, 0], eng.goal_p)
    w = eng.weights
    assert np.allclose(parts["J_s"], J_s, rtol=1e-12)
    assert np.allclose(parts["J_c"], J_c, rtol=1e-12)
    assert np.allclose(parts["J_g"], J_g, rtol=1e-12)
    assert np.allclose(total,
                       w.lambda_s * J_s + w.lambda_c * J_c + w.lambda_g * J_g,
                       rtol=1e-12)
    grad_dP = w.lambda_s * g_s + w.lambda_c * g_c
    grad_dP[:, :, 0] += w.lambda_g * g_g
    ref = chain_rule_batch(grad_dP, raw, eng.thetas, eng.phis, eng.radii,
                           eng.cfg, eng.alpha, eng.v_max, eng.a_max,
                           eng.rotation)
    assert np.allclose(grad, ref, rtol=1e-10, atol=1e-12)


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba unavailable")
def test_kernel_matches_numpy_path():
    rng = np.random.default_rng(7)
    grid = _grid(rng)
    for mode in ("tracking", "navigation"):
        eng_k = _engine(grid, np.random.default_rng(8), mode=mode,
                        use_kernel=True)
        eng_n = _engine(grid, np.random.default_rng(8), mode=mode,
                        use_kernel=False)
        raw = rng.normal(size=(15, 9)) * 0.6
        tk, pk, gk = eng_k.evaluate(raw)
        tn, pn, gn = eng_n.evaluate(raw)
        assert np.allclose(tk, tn, rtol=1e-10, atol=1e-12)
        for key in pk:
            assert np.allclose(pk[key], pn[key], rtol=1e-10, atol=1e-12)
        assert np.allclose(gk, gn, rtol=1e-9, atol=1e-11)
        tk2, _, g2 = eng_k.evaluate(raw, with_grad=False)
        assert np.allclose(tk2, tk) and g2 is None


def test_engine_subset_evaluation():
    rng = np.random.default_rng(9)
    eng = _engine(_grid(rng), rng)
    raw = rng.normal(size=(15, 9)) * 0.5
    full, _, gfull = eng.evaluate(raw)
    idx = np.array([2, 9, 14])
    sub, _, gsub = eng.evaluate(raw[idx], idx=idx)
    assert np.allclose(sub, full[idx], rtol=1e-12)
    assert np.allclose(gsub, gfull[idx], rtol=1e-10, atol=1e-12)


def test_engine_navigation_rescales_goal():
    rng = np.random.default_rng(10)
    eng = _engine(None, rng, mode="navigation")
    assert np.isclose(np.linalg.norm(eng.goal_p - eng.position), eng.cfg.r)


# -- losses ----------------------------------------------------------------------

def test_smooth_l1_values_and_gradient():
    x = np.array([-3.0, -0.5, 0.0, 0.5, 3.0])
    assert np.allclose(smooth_l1(x), [2.5, 0.125, 0.0, 0.125, 2.5])
    h = 1e-7
    fd = (smooth_l1(x + h) - smooth_l1(x - h)) / (2 * h)
    assert np.allclose(smooth_l1_grad(x), fd, atol=1e-6)


def test_cost_supervision_modes():
    w = CostWeights()
    target_track = w.lambda_s * 1.0 + w.lambda_c * 2.0
    assert np.isclose(cost_supervision(target_track, 1.0, 2.0, 9.0,
                                       "tracking", w), 0.0)
    target_nav = target_track + w.lambda_g * 9.0
    assert np.isclose(cost_supervision(target_nav, 1.0, 2.0, 9.0,
                                       "navigation", w), 0.0)
    with pytest.raises(ValueError):
        cost_supervision(0.0, 0.0, 0.0, 0.0, "other")


def test_total_loss_label_weighting():
    w = CostWeights()
    entry = {"J_s": 1.0, "J_c": 2.0, "J_g": 3.0, "L_cost": 0.5,
             "L_tgt": 0.7, "L_obj": 0.9}
    traj = w.lambda_s * 1.0 + w.lambda_c * 2.0
    pos = total_loss([dict(entry, label="positive")], "tracking", w)
    assert np.isclose(pos, traj + w.lambda_g * 3.0 + 0.5 + 0.7 + 0.9)
    ign = total_loss([dict(entry, label="ignored")], "tracking", w)
    assert np.isclose(ign, w.lambda_1 * (traj + 0.5))
    neg = total_loss([dict(entry, label="negative")], "tracking", w)
    assert np.isclose(neg, w.lambda_1 * (traj + 0.5) + w.lambda_2 * 0.9)
    nav = total_loss([entry], "navigation", w)
    assert np.isclose(nav, traj + w.lambda_g * 3.0 + 0.5)
    with pytest.raises(ValueError):
        total_loss([dict(entry, label="bogus")], "tracking", w)


def test_cost_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(lambda_s=-0.1)
