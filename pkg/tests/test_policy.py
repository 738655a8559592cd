"""Refiner descent, the prediction head, labels, losses, state sampling."""

import numpy as np
import pytest

from primtrack.camera import CameraModel, anchor_to_cell
from primtrack.costs import CostEngine, CostWeights, smooth_l1
from primtrack.environment import PointCloud, build_esdf
from primtrack.policy import (FrustumFeatures, HeadOptimizer, PolicyHead,
                              StateSampler, assign_samples, backward_and_step,
                              compute_features, decode_target,
                              detection_losses, frame_loss_and_grad,
                              load_head, refine, refiner_predictions,
                              sample_training_state, save_head)
from primtrack.primitives import LatticeConfig, PredictionVector, \
    build_library


def _engine(grid, goal, use_kernel=True, mode="tracking", weights=None):
    cfg = LatticeConfig()
    d_F = np.column_stack([np.array([0.0, 0.0, 1.5]),
                           np.array([1.0, 0.0, 0.0]), np.zeros(3)])
    eng = CostEngine(grid, d_F, 1.25, cfg, 1.0, 8.0, 6.0, np.asarray(goal),
                     mode=mode, position=d_F[:, 0], use_kernel=use_kernel,
                     weights=weights or CostWeights())
    anchors = build_library(cfg)
    eng.set_anchors([a.theta for a in anchors], [a.phi for a in anchors],
                    [a.r for a in anchors])
    return eng


def _obstacle_grid():
    pts = np.array([[3.0, y, z] for y in np.arange(-0.6, 0.61, 0.2)
                    for z in np.arange(0.0, 3.01, 0.2)])
    return build_esdf(PointCloud(pts), (-2, -5, -0.5), (40, 40, 20), 0.25)


# -- refiner ----------------------------------------------------------------------

def test_refine_empty_map_reaches_goal():
    # drop smoothness so the goal term alone defines the optimum
    goal = np.array([4.0, 0.5, 1.5])
    eng = _engine(None, goal, weights=CostWeights(lambda_s=0.0))
    raw, total, parts = refine(eng, steps=200)
    # at least one candidate ends essentially on the goal
    assert float(np.min(parts["J_g"])) < 1e-3
    assert np.all(np.isfinite(total))


def test_refine_never_increases_cost():
    eng = _engine(_obstacle_grid(), np.array([6.0, 0.0, 1.5]))
    raw0 = np.zeros((15, 9))
    t0, _, _ = eng.evaluate(raw0, with_grad=False)
    raw, total, _ = refine(eng, raw0=raw0)
    assert np.all(total <= t0 + 1e-9)
    assert np.any(total < t0 - 1e-6)  # and it actually makes progress


def test_refine_improves_clearance_near_obstacle():
    # no goal attraction: the collision potential must push paths clear
    grid = _obstacle_grid()
    eng = _engine(grid, np.array([6.0, 0.0, 1.5]),
                  weights=CostWeights(lambda_g=0.0))
    raw0 = np.zeros((15, 9))
    _, p0, _ = eng.evaluate(raw0, with_grad=False)
    raw, _, parts = refine(eng, raw0=raw0)
    k = 7  # center anchor points straight at the wall
    assert parts["J_c"][k] < p0["J_c"][k]


def test_refine_warm_start_and_step_validation():
    eng = _engine(None, np.array([4.0, 0.0, 1.5]))
    raw, total, _ = refine(eng, steps=5)
    raw2, total2, _ = refine(eng, steps=5, raw0=raw)
    assert np.all(total2 <= total + 1e-9)
    with pytest.raises(ValueError):
        refine(eng, steps=0)


def test_refiner_predictions_carry_realized_cost():
    eng = _engine(None, np.array([4.0, 0.0, 1.5]))
    results = refiner_predictions(eng, eng.cfg, steps=5)
    assert len(results) == 15
    w = eng.weights
    for pred, bd in results:
        assert np.isclose(pred.y_c, bd.weighted(w), rtol=1e-9)


# -- head forward/backward ---------------------------------------------------------

def test_head_forward_matches_manual_matmul():
    head = PolicyHead.create(hidden=(5,), in_dim=3, out_dim=2, seed=1)
    x = np.random.default_rng(2).normal(size=(4, 3))
    y = head.forward(x)
    ref = np.maximum(x @ head.weights[0] + head.biases[0], 0.0) \
        @ head.weights[1] + head.biases[1]
    assert np.allclose(y, ref, atol=1e-12)
    with pytest.raises(ValueError):
        head.forward(np.zeros((4, 7)))


def test_head_weight_sharing_across_rows():
    head = PolicyHead.create(seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(15, 9))
    perm = rng.permutation(15)
    assert np.allclose(head.forward(x)[perm], head.forward(x[perm]),
                       atol=1e-12)


def test_head_backward_matches_finite_differences():
    head = PolicyHead.create(hidden=(6,), in_dim=4, out_dim=3, seed=5)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 4))
    C = rng.normal(size=(5, 3))  # loss = sum(C * y), so dL/dy = C

    def loss():
        return float(np.sum(C * head.forward(x)))

    _, cache = head.forward(x, keep_cache=True)
    gw, gb = head.backward(cache, C)
    h = 1e-6
    for params, grads in ((head.weights, gw), (head.biases, gb)):
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            for i in range(0, flat.size, max(1, flat.size // 5)):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss()
                flat[i] = orig - h
                fm = loss()
                flat[i] = orig
                assert np.isclose(g.reshape(-1)[i], (fp - fm) / (2 * h),
                                  atol=1e-5)


def test_head_save_load_round_trip(tmp_path):
    head = PolicyHead.create(seed=7)
    save_head(tmp_path / "h.bin", head)
    back = load_head(tmp_path / "h.bin")
    assert back.layer_sizes == head.layer_sizes
    x = np.random.default_rng(8).normal(size=(15, 9))
    # float32 checkpoint: agreement to storage precision
    assert np.allclose(back.forward(x), head.forward(x), atol=1e-4)
    (tmp_path / "bad.bin").write_bytes(b"NOTAHEAD")
    with pytest.raises(ValueError):
        load_head(tmp_path / "bad.bin")


def test_optimizer_methods_descend():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(20, 9))
    y_t = rng.normal(size=(20, 14))
    for method in ("sgd", "momentum", "adam"):
        head = PolicyHead.create(hidden=(16,), seed=10)
        opt = HeadOptimizer(learning_rate=1e-3, method=method)
        losses = []
        for _ in range(200):
            out, cache = head.forward(x, keep_cache=True)
            losses.append(float(np.sum((out - y_t)**2)))
            gw, gb = head.backward(cache, 2 * (out - y_t))
            opt.step(head, gw, gb)
        assert losses[-1] < 0.5 * losses[0], method
    with pytest.raises(ValueError):
        HeadOptimizer(method="bogus").step(head, gw, gb)


# -- features -----------------------------------------------------------------------

def test_compute_features_empty_map():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    feats = compute_features(None, cam, cfg, np.array([0.5, 0.0, 0.0]),
                             np.zeros(3))
    assert feats.values.shape == (cfg.n_cells, 9)
    # free space everywhere: both depth summaries saturate at the radius
    assert np.allclose(feats.values[:, 0], 1.0)
    assert np.allclose(feats.values[:, 1], 1.0)
    assert np.all(feats.values[:, 2] == -1.0)  # no target sentinel


def test_compute_features_sees_obstacle_and_target():
    cfg = LatticeConfig()
    grid = _obstacle_grid()
    cam = CameraModel.for_lattice(cfg).with_pose(np.eye(3),
                                                 np.array([0.0, 0.0, 1.5]))
    target = np.array([2.0, 0.0, 1.5])
    feats = compute_features(grid, cam, cfg, np.zeros(3), np.zeros(3),
                             target_world=target).values
    center = 7  # flat index of the central cell
    assert feats[center, 0] < 0.8  # wall at 3 m cuts the forward rays short
    assert np.isclose(feats[center, 2], np.linalg.norm(target
                                                       - cam.position) / cfg.r)
    assert np.all(np.delete(feats[:, 2], center) == -1.0)


def test_compute_features_state_rows_rotate_per_cell():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    v = np.array([0.7, -0.2, 0.1])
    feats = compute_features(None, cam, cfg, v, np.zeros(3)).values
    # rotation preserves the norm in every cell frame
    assert np.allclose(np.linalg.norm(feats[:, 3:6], axis=1),
                       np.linalg.norm(v), atol=1e-12)
    assert not np.allclose(feats[0, 3:6], feats[14, 3:6])


# -- labels and detection losses ------------------------------------------------------

def test_assign_samples_geometry():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    target = np.array([4.0, 0.0, 0.0])  # optical axis: the center cell
    asg = assign_samples(target, cam, cfg)
    assert asg.positive == 7
    assert asg.labels[7] == "positive"
    ring = [k for k, l in enumerate(asg.labels) if l == "ignored"]
    assert len(ring) == 8  # full Chebyshev-1 ring around the center
    assert asg.labels.count("negative") == cfg.n_cells - 9
    assert asg.label_of(7) == "positive"


def test_assign_samples_no_target_or_hidden():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    for tgt in (None, np.array([-4.0, 0.0, 0.0])):
        asg = assign_samples(tgt, cam, cfg)
        assert asg.positive is None
        assert set(asg.labels) == {"negative"}
    # occluded behind the wall on the privileged map
    cam = cam.with_pose(np.eye(3), np.array([0.0, 0.0, 1.5]))
    asg = assign_samples(np.array([4.5, 0.0, 1.5]), cam, cfg,
                         grid=_obstacle_grid(), occupancy_threshold=0.3)
    assert asg.positive is None


def test_decode_target_pixel_inside_cell():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    pred = PredictionVector(y_du=0.3, y_dv=-2.0, y_d=3.0)
    (u, v), world = decode_target(pred, (2, 1), cam)
    assert 2 * cam.ds < u < 3 * cam.ds
    assert 1 * cam.ds < v < 2 * cam.ds
    assert world is not None
    uu, vv, depth = cam.project_world(world)
    assert np.isclose(uu, u) and np.isclose(vv, v) and np.isclose(depth, 3.0)
    (_, _), none_world = decode_target(PredictionVector(y_d=-1.0), (2, 1), cam)
    assert none_world is None


def test_detection_losses_match_duplicate_formula():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    pred = PredictionVector(y_o=0.4, y_du=0.2, y_dv=-0.3, y_d=3.5)
    target_cam = np.array([3.4, 0.2, -0.1])
    cell = anchor_to_cell(2, 1, cfg)
    l_tgt, l_obj = detection_losses(pred, "positive", target_cam, cam, cell)
    (u, v), _ = decode_target(pred, cell, cam)
    ref_tgt = float(np.sum(smooth_l1(cam.unproject_camera(u, v, pred.y_d)
                                     - target_cam)))
    p = 1.0 / (1.0 + np.exp(-pred.y_o))
    assert np.isclose(l_tgt, ref_tgt)
    assert np.isclose(l_obj, -np.log(p))
    _, l_neg = detection_losses(pred, "negative", None, cam, cell)
    assert np.isclose(l_neg, -np.log(1 - p))
    assert detection_losses(pred, "ignored", None, cam, cell) == (0.0, 0.0)
    with pytest.raises(ValueError):
        detection_losses(pred, "positive", None, cam, cell)


# -- state sampling -----------------------------------------------------------------

def test_sampler_forward_velocity_bounded():
    sampler = StateSampler()
    rng = np.random.default_rng(11)
    v, a = sample_training_state(sampler, rng, size=5000)
    assert v.shape == (5000, 3) and a.shape == (5000, 3)
    assert np.all(v[:, 0] < sampler.v_m)
    # lateral/vertical stds roughly match the configuration
    assert abs(np.std(v[:, 1]) - sampler.lateral_std) < 0.1 * sampler.lateral_std
    v1, a1 = sample_training_state(sampler, rng)
    assert v1.shape == (3,) and a1.shape == (3,)


def test_sampler_pdf_integrates_to_one():
    sampler = StateSampler(sigma=0.6, v_m=8.8)
    v = np.linspace(sampler.v_m - 60.0, sampler.v_m - 1e-9, 400000)
    mass = np.trapezoid(sampler.forward_pdf(v), v)
    assert abs(mass - 1.0) < 1e-3
    assert np.all(sampler.forward_pdf(np.array([sampler.v_m + 1.0])) == 0.0)


def test_sampler_matches_empirical_histogram():
    sampler = StateSampler()
    rng = np.random.default_rng(12)
    v, _ = sample_training_state(sampler, rng, size=200000)
    hist, edges = np.histogram(v[:, 0], bins=30,
                               range=(sampler.v_m - 12, sampler.v_m),
                               density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    assert np.max(np.abs(hist - sampler.forward_pdf(centers))) < 0.02


def test_sampler_validation():
    with pytest.raises(ValueError):
        StateSampler(v_m=0.0)
    s = StateSampler.for_limits(8.0, 6.0)
    assert np.isclose(s.v_m, 8.8) and np.isclose(s.acc_std, 1.8)


# -- end-to-end gradient -------------------------------------------------------------

def test_frame_loss_grad_matches_finite_differences():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg).with_pose(np.eye(3),
                                                 np.array([0.0, 0.0, 1.5]))
    target = np.array([4.0, 0.3, 1.6])
    eng = _engine(None, target, use_kernel=False)
    asg = assign_samples(target, cam, cfg)
    rng = np.random.default_rng(13)
    y = rng.normal(size=(15, 14)) * 0.5
    loss, dLdy = frame_loss_and_grad(y, eng, cfg, cam, asg,
                                     target_world=target, mode="tracking")
    h = 1e-6
    for k in (asg.positive, 0, 14):
        for d in range(14):
            yp, ym = y.copy(), y.copy()
            yp[k, d] += h
            ym[k, d] -= h
            fp, _ = frame_loss_and_grad(yp, eng, cfg, cam, asg,
                                        target_world=target, mode="tracking")
            fm, _ = frame_loss_and_grad(ym, eng, cfg, cam, asg,
                                        target_world=target, mode="tracking")
            assert np.isclose(dLdy[k, d], (fp - fm) / (2 * h),
                              rtol=1e-4, atol=1e-6)


def test_frame_loss_grad_navigation_mode():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    eng = _engine(None, np.array([10.0, 0.0, 1.5]), use_kernel=False,
                  mode="navigation")
    rng = np.random.default_rng(14)
    y = rng.normal(size=(15, 14)) * 0.5
    loss, dLdy = frame_loss_and_grad(y, eng, cfg, cam, None,
                                     mode="navigation")
    assert np.isfinite(loss)
    # detection slots carry no gradient without detection supervision
    assert np.all(dLdy[:, 10:] == 0.0)
    h = 1e-6
    for d in (0, 5, 9):
        yp, ym = y.copy(), y.copy()
        yp[3, d] += h
        ym[3, d] -= h
        fp, _ = frame_loss_and_grad(yp, eng, cfg, cam, None, mode="navigation")
        fm, _ = frame_loss_and_grad(ym, eng, cfg, cam, None, mode="navigation")
        assert np.isclose(dLdy[3, d], (fp - fm) / (2 * h), rtol=1e-4,
                          atol=1e-6)


def test_backward_and_step_reduces_toy_loss():
    cfg = LatticeConfig()
    cam = CameraModel.for_lattice(cfg)
    eng = _engine(None, np.array([10.0, 0.0, 1.5]), mode="navigation")
    feats = compute_features(None, cam, cfg, np.array([0.3, 0.0, 0.0]),
                             np.zeros(3))
    frames = [{"features": FrustumFeatures(feats.values), "engine": eng,
               "cfg": cfg, "cam": cam, "assignment": None,
               "mode": "navigation"}]
    head = PolicyHead.create(hidden=(16,), seed=15)
    opt = HeadOptimizer(learning_rate=1e-3, method="adam")
    losses = [backward_and_step(head, frames, opt) for _ in range(80)]
    assert losses[-1] < losses[0]
