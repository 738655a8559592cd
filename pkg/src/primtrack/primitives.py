"""Spherical state-lattice anchors over the camera FOV and offset decoding.

Anchors are trajectory endpoints placed at grid-cell-center angles on a
sphere of radius r in the camera frame (x forward, y left, z up). Raw
predictions refine an anchor by tanh-bounded angular/radial offsets and
carry denormalized end derivatives, a cost, an objectness logit, and a
target detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LatticeConfig",
    "PrimitiveAnchor",
    "PredictionVector",
    "build_library",
    "decode_offsets",
    "decode_derivatives",
    "horizon",
    "spherical_endpoint",
    "spherical_jacobian",
]


def spherical_endpoint(theta: float, phi: float, r: float) -> np.ndarray:
    """Camera-frame point (r cos(theta)cos(phi), r cos(theta)sin(phi), r sin(theta))."""
    theta, phi, r = np.broadcast_arrays(np.asarray(theta, float), phi, r)
    ct = np.cos(theta)
    return np.asarray(r)[..., None] * np.stack(
        [ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


def spherical_jacobian(theta, phi, r) -> np.ndarray:
    """d endpoint / d (theta, phi, r), shape (..., 3, 3), columns in that order."""
    theta, phi, r = np.broadcast_arrays(np.asarray(theta, float), phi, r)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    J = np.empty(theta.shape + (3, 3))
    J[..., 0, 0] = -r * st * cp
    J[..., 1, 0] = -r * st * sp
    J[..., 2, 0] = r * ct
    J[..., 0, 1] = -r * ct * sp
    J[..., 1, 1] = r * ct * cp
    J[..., 2, 1] = 0.0
    J[..., 0, 2] = ct * cp
    J[..., 1, 2] = ct * sp
    J[..., 2, 2] = st
    return J


@dataclass(frozen=True)
class LatticeConfig:
    """Anchor lattice geometry: grid counts, FOV, planning radius, offset ranges.

    d_theta / d_phi default to 1.25x the angular half-pitch of the grid so
    neighboring cells overlap slightly at their shared boundary.
    """

    m_phi: int = 5
    m_theta: int = 3
    fov_h: float = np.deg2rad(90.0)
    fov_v: float = 2.0 * np.arctan(np.tan(np.deg2rad(45.0)) * 9.0 / 16.0)
    r: float = 5.0
    d_theta: float = field(default=None)  # type: ignore[assignment]
    d_phi: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.m_phi < 1 or self.m_theta < 1:
            raise ValueError("grid counts must be >= 1")
        if not (0.0 < self.fov_h < np.pi and 0.0 < self.fov_v < np.pi):
            raise ValueError("FOV angles must lie in (0, pi)")
        if not self.r > 0:
            raise ValueError("planning radius must be positive")
        if self.d_phi is None:
            object.__setattr__(self, "d_phi", 1.25 * self.fov_h / (2 * self.m_phi))
        if self.d_theta is None:
            object.__setattr__(self, "d_theta", 1.25 * self.fov_v / (2 * self.m_theta))
        if self.d_phi <= self.fov_h / (2 * self.m_phi) or \
                self.d_theta <= self.fov_v / (2 * self.m_theta):
            raise ValueError("offset ranges must exceed half the grid pitch")

    @property
    def n_cells(self) -> int:
        return self.m_phi * self.m_theta

    def azimuths(self) -> np.ndarray:
        """Cell-center azimuth angles, ascending (rightmost to leftmost)."""
        pitch = self.fov_h / self.m_phi
        return -self.fov_h / 2 + (np.arange(self.m_phi) + 0.5) * pitch

    def polars(self) -> np.ndarray:
        """Cell-center polar angles, ascending (lowest to highest)."""
        pitch = self.fov_v / self.m_theta
        return -self.fov_v / 2 + (np.arange(self.m_theta) + 0.5) * pitch


@dataclass(frozen=True)
class PrimitiveAnchor:
    """One lattice anchor: grid index, angles, radius, camera-frame endpoint."""

    grid_index: tuple[int, int]  # (i over azimuth, j over polar), zero-based
    theta: float
    phi: float
    r: float
    endpoint: np.ndarray

    def flat_index(self, cfg: LatticeConfig) -> int:
        i, j = self.grid_index
        return i * cfg.m_theta + j


@dataclass
class PredictionVector:
    """Raw 14-dimensional per-anchor outputs.

    Offsets (y_theta, y_phi, y_r), end derivatives (y_v, y_a: 3 each),
    trajectory cost y_c, objectness logit y_o, and the target detection
    (y_du, y_dv pixel logits, y_d depth in meters).
    """

    y_theta: float = 0.0
    y_phi: float = 0.0
    y_r: float = 0.0
    y_v: np.ndarray = None  # type: ignore[assignment]
    y_a: np.ndarray = None  # type: ignore[assignment]
    y_c: float = 0.0
    y_o: float = 0.0
    y_du: float = 0.0
    y_dv: float = 0.0
    y_d: float = 0.0

    def __post_init__(self):
        self.y_v = np.zeros(3) if self.y_v is None else np.asarray(self.y_v, float)
        self.y_a = np.zeros(3) if self.y_a is None else np.asarray(self.y_a, float)

    @classmethod
    def from_array(cls, y: np.ndarray) -> "PredictionVector":
        y = np.asarray(y, float)
        if y.shape != (14,):
            raise ValueError(f"expected 14 outputs, got shape {y.shape}")
        return cls(y[0], y[1], y[2], y[3:6], y[6:9], y[9], y[10], y[11], y[12], y[13])

    def as_array(self) -> np.ndarray:
        return np.concatenate([
            [self.y_theta, self.y_phi, self.y_r], self.y_v, self.y_a,
            [self.y_c, self.y_o, self.y_du, self.y_dv, self.y_d]])


def build_library(cfg: LatticeConfig) -> list[PrimitiveAnchor]:
    """All M_phi * M_theta anchors at grid-cell-center angles."""
    anchors = []
    for i, phi in enumerate(cfg.azimuths()):
        for j, theta in enumerate(cfg.polars()):
            anchors.append(PrimitiveAnchor(
                (i, j), float(theta), float(phi), cfg.r,
                spherical_endpoint(theta, phi, cfg.r)))
    return anchors


def decode_offsets(anchor: PrimitiveAnchor, pred: PredictionVector,
                   cfg: LatticeConfig) -> np.ndarray:
    """Refined camera-frame endpoint from tanh-bounded offsets."""
    theta = anchor.theta + np.tanh(pred.y_theta) * cfg.d_theta
    phi = anchor.phi + np.tanh(pred.y_phi) * cfg.d_phi
    r = anchor.r + np.tanh(pred.y_r) * anchor.r
    return spherical_endpoint(theta, phi, r)


def decode_derivatives(pred: PredictionVector, alpha: float, v_max: float,
                       a_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Denormalized end velocity and acceleration (camera frame)."""
    if not (alpha > 0 and v_max > 0 and a_max > 0):
        raise ValueError("scales must be positive")
    vel = np.tanh(pred.y_v) * alpha * v_max
    acc = np.tanh(pred.y_a) * alpha ** 2 * a_max
    return vel, acc


def horizon(cfg: LatticeConfig, alpha: float, v_max: float) -> float:
    """Fixed execution time T = 2 r / (alpha v_max)."""
    if not (alpha > 0 and v_max > 0):
        raise ValueError("scales must be positive")
    return 2.0 * cfg.r / (alpha * v_max)
