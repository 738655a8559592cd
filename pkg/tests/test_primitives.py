"""Anchor lattice geometry and the tanh offset / derivative decoding."""

import numpy as np
import pytest

from primtrack.primitives import (LatticeConfig, PredictionVector,
                                  build_library, decode_derivatives,
                                  decode_offsets, horizon, spherical_endpoint,
                                  spherical_jacobian)


def test_spherical_endpoint_known_points():
    assert np.allclose(spherical_endpoint(0.0, 0.0, 5.0), [5, 0, 0])
    assert np.allclose(spherical_endpoint(np.pi / 2, 0.0, 2.0), [0, 0, 2])
    assert np.allclose(spherical_endpoint(0.0, np.pi / 2, 3.0), [0, 3, 0])


def test_spherical_endpoint_norm_is_radius():
    rng = np.random.default_rng(0)
    th = rng.uniform(-1.2, 1.2, 100)
    ph = rng.uniform(-np.pi, np.pi, 100)
    r = rng.uniform(0.1, 8.0, 100)
    p = spherical_endpoint(th, ph, r)
    assert np.allclose(np.linalg.norm(p, axis=-1), r, atol=1e-12)


def test_spherical_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(100):
        th, ph = rng.uniform(-1.2, 1.2), rng.uniform(-np.pi, np.pi)
        r = rng.uniform(0.5, 6.0)
        J = spherical_jacobian(th, ph, r)
        fd = np.column_stack([
            (spherical_endpoint(th + h, ph, r)
             - spherical_endpoint(th - h, ph, r)) / (2 * h),
            (spherical_endpoint(th, ph + h, r)
             - spherical_endpoint(th, ph - h, r)) / (2 * h),
            (spherical_endpoint(th, ph, r + h)
             - spherical_endpoint(th, ph, r - h)) / (2 * h)])
        assert np.allclose(J, fd, atol=1e-6)


def test_lattice_defaults():
    cfg = LatticeConfig()
    assert cfg.n_cells == 15
    assert np.isclose(cfg.fov_h, np.deg2rad(90.0))
    # vertical FOV follows a 16:9 aspect of the horizontal
    assert np.isclose(cfg.fov_v, 2 * np.arctan(np.tan(cfg.fov_h / 2) * 9 / 16))
    # offset ranges are 1.25x the angular half-pitch
    assert np.isclose(cfg.d_phi, 1.25 * cfg.fov_h / (2 * cfg.m_phi))
    assert np.isclose(cfg.d_theta, 1.25 * cfg.fov_v / (2 * cfg.m_theta))


def test_lattice_cell_centers():
    cfg = LatticeConfig()
    az = cfg.azimuths()
    po = cfg.polars()
    assert len(az) == cfg.m_phi and len(po) == cfg.m_theta
    # symmetric about the optical axis, strictly inside the FOV
    assert np.allclose(az, -az[::-1], atol=1e-12)
    assert np.allclose(po, -po[::-1], atol=1e-12)
    assert np.all(np.abs(az) < cfg.fov_h / 2)
    assert np.all(np.abs(po) < cfg.fov_v / 2)
    pitch = cfg.fov_h / cfg.m_phi
    assert np.allclose(np.diff(az), pitch, atol=1e-12)


def test_lattice_validation():
    with pytest.raises(ValueError):
        LatticeConfig(m_phi=0)
    with pytest.raises(ValueError):
        LatticeConfig(fov_h=0.0)
    with pytest.raises(ValueError):
        LatticeConfig(r=-1.0)
    with pytest.raises(ValueError):
        LatticeConfig(d_phi=1e-6)  # below the half-pitch: cells cannot overlap


def test_build_library_layout():
    cfg = LatticeConfig()
    anchors = build_library(cfg)
    assert len(anchors) == cfg.n_cells
    for a in anchors:
        i, j = a.grid_index
        assert np.isclose(a.phi, cfg.azimuths()[i])
        assert np.isclose(a.theta, cfg.polars()[j])
        assert a.flat_index(cfg) == i * cfg.m_theta + j
        assert np.allclose(a.endpoint,
                           spherical_endpoint(a.theta, a.phi, cfg.r))
    assert sorted(a.flat_index(cfg) for a in anchors) == list(range(15))


def test_decode_offsets_bounded():
    cfg = LatticeConfig()
    anchor = build_library(cfg)[7]
    rng = np.random.default_rng(2)
    for _ in range(200):
        pred = PredictionVector(*rng.normal(size=3) * 2)
        p = decode_offsets(anchor, pred, cfg)
        r = np.linalg.norm(p)
        assert 0.0 < r < 2.0 * anchor.r
        th = np.arcsin(p[2] / r)
        ph = np.arctan2(p[1], p[0])
        assert abs(th - anchor.theta) <= cfg.d_theta + 1e-9
        assert abs(ph - anchor.phi) <= cfg.d_phi + 1e-9


def test_decode_offsets_zero_is_anchor():
    cfg = LatticeConfig()
    for anchor in build_library(cfg):
        p = decode_offsets(anchor, PredictionVector(), cfg)
        assert np.allclose(p, anchor.endpoint, atol=1e-12)


def test_decode_derivatives_bounds_and_scaling():
    rng = np.random.default_rng(3)
    alpha, v_max, a_max = 1.3, 8.0, 6.0
    for _ in range(100):
        pred = PredictionVector(y_v=rng.normal(size=3) * 5,
                                y_a=rng.normal(size=3) * 5)
        vel, acc = decode_derivatives(pred, alpha, v_max, a_max)
        assert np.all(np.abs(vel) < alpha * v_max)
        assert np.all(np.abs(acc) < alpha**2 * a_max)
        assert np.allclose(vel, np.tanh(pred.y_v) * alpha * v_max)
    with pytest.raises(ValueError):
        decode_derivatives(PredictionVector(), 0.0, v_max, a_max)


def test_horizon_formula():
    cfg = LatticeConfig()
    assert np.isclose(horizon(cfg, 1.0, 8.0), 2 * cfg.r / 8.0)
    assert np.isclose(horizon(cfg, 2.0, 4.0), 2 * cfg.r / 8.0)
    with pytest.raises(ValueError):
        horizon(cfg, -1.0, 8.0)


def test_prediction_vector_array_round_trip():
    rng = np.random.default_rng(4)
    y = rng.normal(size=14)
    pred = PredictionVector.from_array(y)
    assert np.allclose(pred.as_array(), y, atol=1e-15)
    assert pred.y_c == y[9] and pred.y_o == y[10] and pred.y_d == y[13]
    with pytest.raises(ValueError):
        PredictionVector.from_array(np.zeros(13))
