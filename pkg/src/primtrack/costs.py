"""Differentiable trajectory costs with closed-form end-state gradients.

Smoothness penalizes the integral of squared jerk, collision integrates an
exponential potential of the ESDF distance along the trajectory, and the
goal cost is the squared endpoint-to-goal distance. Gradients are taken
w.r.t. the free end state d_P and chain-ruled through the anchor decoding
(tanh offset bounds, spherical endpoint map, denormalization) down to the
raw prediction variables.

All functions accept either a single candidate or a batch: d_P of shape
(3, 3) or (N, 3, 3) with rows = axes and columns = (pos, vel, acc).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .environment import EsdfGrid
from .primitives import LatticeConfig, PredictionVector, PrimitiveAnchor, \
    spherical_jacobian, spherical_endpoint
from .trajectory import hermite_matrix, power_row

__all__ = [
    "CostWeights",
    "PotentialParams",
    "CostBreakdown",
    "smoothness",
    "collision",
    "goal",
    "chain_rule",
    "total_loss",
    "cost_supervision",
    "smooth_l1",
    "CostEngine",
]


@dataclass(frozen=True)
class CostWeights:
    """Weights balancing the trajectory costs and the sample groups.

    lambda_s/c/g are tuned defaults sized for the desk-scale suite;
    lambda_1 and lambda_2 balance non-positive and negative samples.
    """

    lambda_s: float = 0.1
    lambda_c: float = 1.0
    lambda_g: float = 1.0
    lambda_1: float = 0.2
    lambda_2: float = 0.5

    def __post_init__(self):
        if min(self.lambda_s, self.lambda_c, self.lambda_g,
               self.lambda_1, self.lambda_2) < 0:
            raise ValueError("weights must be nonnegative")


@dataclass(frozen=True)
class PotentialParams:
    """Exponential obstacle potential c(d) = exp(-(d - d_safe)/s), cut off
    beyond `cutoff`; the trajectory is sampled every dt seconds.
    """

    d_safe: float = 0.4
    falloff: float = 0.4
    cutoff: float = 2.0
    dt: float = 0.1

    def __post_init__(self):
        if not self.falloff > 0:
            raise ValueError("falloff must be positive")

    def value_and_slope(self, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(c(d), c'(d)) with the cutoff applied."""
        c = np.exp(-(d - self.d_safe) / self.falloff)
        mask = d < self.cutoff
        c = np.where(mask, c, 0.0)
        return c, np.where(mask, -c / self.falloff, 0.0)


@dataclass
class CostBreakdown:
    """Per-candidate cost terms and the gradient w.r.t. the end state."""

    J_s: float
    J_c: float
    J_g: float
    grad_dP: np.ndarray  # (3, 3): [axis, (pos, vel, acc)]

    def weighted(self, w: CostWeights) -> float:
        return w.lambda_s * self.J_s + w.lambda_c * self.J_c + w.lambda_g * self.J_g


@lru_cache(maxsize=64)
def jerk_gram_matrix(horizon_T: float) -> np.ndarray:
    """Q with Q[i, j] = integral over [0, T] of d3(t^i) * d3(t^j) dt."""
    T = float(horizon_T)
    Q = np.zeros((6, 6))
    for i in range(3, 6):
        ci = i * (i - 1) * (i - 2)
        for j in range(3, 6):
            cj = j * (j - 1) * (j - 2)
            p = i + j - 5
            Q[i, j] = ci * cj * T ** p / p
    Q.setflags(write=False)
    return Q


@lru_cache(maxsize=64)
def _hermite_gram(horizon_T: float) -> np.ndarray:
    """B = M^T Q M mapping boundary derivatives to the jerk integral."""
    M = hermite_matrix(horizon_T)
    B = M.T @ jerk_gram_matrix(horizon_T) @ M
    B.setflags(write=False)
    return B


def _stack_d(d_F: np.ndarray, d_P: np.ndarray) -> tuple[np.ndarray, bool]:
    """Concatenate to (N, 3, 6); returns (array, was_batched)."""
    d_F = np.asarray(d_F, float)
    d_P = np.asarray(d_P, float)
    batched = d_P.ndim == 3
    if not batched:
        d_P = d_P[None]
    d_F = np.broadcast_to(d_F, d_P.shape)
    return np.concatenate([d_F, d_P], axis=2), batched


def smoothness(d_F, d_P, horizon_T: float):
    """Integral of squared jerk and its gradient w.r.t. d_P.

    Returns (J_s, grad) with J_s scalar (or (N,)) summed over axes and grad
    of shape (3, 3) (or (N, 3, 3)).
    """
    d, batched = _stack_d(d_F, d_P)
    B = _hermite_gram(horizon_T)
    J = np.einsum("nai,ij,naj->n", d, B, d)
    grad = 2.0 * np.einsum("nai,ij->naj", d, B)[:, :, 3:]
    if not batched:
        return float(J[0]), grad[0]
    return J, grad


def _coefficients(d_F, d_P, horizon_T: float) -> np.ndarray:
    d, _ = _stack_d(d_F, d_P)
    return d @ hermite_matrix(horizon_T).T  # (N, 3, 6)


@lru_cache(maxsize=64)
def _sample_rows(horizon_T: float, dt: float):
    """Cached (powers (K, 6), powers @ M[:, 3:] (K, 3)) at the sample times."""
    n_steps = horizon_T / dt
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise ValueError(f"dt={dt} does not divide horizon {horizon_T}")
    K = int(round(n_steps)) + 1
    powers = np.stack([power_row(k * dt, 0) for k in range(K)])
    P = powers @ hermite_matrix(horizon_T)[:, 3:]
    powers.setflags(write=False)
    P.setflags(write=False)
    return powers, P


def collision(d_F, d_P, horizon_T: float, grid: EsdfGrid,
              params: PotentialParams, need_grad: bool = True):
    """Time integral of the obstacle potential and its d_P gradient.

    The trajectory is sampled at multiples of params.dt (which must divide
    the horizon); out-of-bounds samples use clamped field queries. With
    need_grad=False the gradient is skipped (returned as None).
    """
    powers, P = _sample_rows(float(horizon_T), float(params.dt))
    coeffs = _coefficients(d_F, d_P, horizon_T)  # (N, 3, 6)
    batched = np.asarray(d_P).ndim == 3
    pos = np.einsum("nac,kc->nka", coeffs, powers)  # (N, K, 3)
    dist, grad_d, _ = grid.query(pos, with_grad=need_grad)
    c, c_slope = params.value_and_slope(dist)
    J = c.sum(axis=1) * params.dt
    if not need_grad:
        return (J, None) if batched else (float(J[0]), None)
    # dJ/dd_P[axis, comp] = sum_k c'(d) * dd/dx_axis * (T_k . L_P)[comp] dt
    dcdx = c_slope[..., None] * grad_d  # (N, K, 3)
    grad = np.einsum("nka,kc->nac", dcdx, P) * params.dt
    if not batched:
        return float(J[0]), grad[0]
    return J, grad


def goal(d_P_position, goal_p, mode: str = "tracking",
         radius: float | None = None, origin=None):
    """Squared endpoint-to-goal distance and its gradient.

    In navigation mode the goal is replaced by a fixed-length direction
    vector of length `radius` from `origin` toward the goal; in tracking
    mode the raw target position is used unscaled.
    """
    p = np.asarray(d_P_position, float)
    g = np.asarray(goal_p, float)
    if mode == "navigation":
        if radius is None:
            raise ValueError("navigation mode requires the lattice radius")
        o = np.zeros(3) if origin is None else np.asarray(origin, float)
        delta = g - o
        norm = np.linalg.norm(delta)
        if norm < 1e-9:
            raise ValueError("goal coincides with the current position")
        g = o + delta / norm * radius
    elif mode != "tracking":
        raise ValueError(f"unknown goal mode {mode!r}")
    diff = p - g
    J = np.sum(diff * diff, axis=-1)
    grad = 2.0 * diff
    if p.ndim == 1:
        return float(J), grad
    return J, grad


# -- chain rule to raw prediction variables --------------------------------

RAW_DIM = 9  # (y_theta, y_phi, y_r, y_v[3], y_a[3])


def decode_raw_batch(raw: np.ndarray, thetas, phis, radii,
                     cfg: LatticeConfig, alpha: float, v_max: float,
                     a_max: float, rotation=None, position=None):
    """Decode raw (N, 9) trajectory variables into world end states (N, 3, 3).

    thetas/phis/radii are per-candidate anchor parameters; rotation/position
    place the camera in the world (identity/origin when omitted).
    """
    raw = np.atleast_2d(np.asarray(raw, float))
    y = np.tanh(raw)
    th = np.asarray(thetas, float) + y[:, 0] * cfg.d_theta
    ph = np.asarray(phis, float) + y[:, 1] * cfg.d_phi
    rr = np.asarray(radii, float) * (1.0 + y[:, 2])
    ct = np.cos(th)
    p_cam = np.empty((len(raw), 3))
    p_cam[:, 0] = rr * ct * np.cos(ph)
    p_cam[:, 1] = rr * ct * np.sin(ph)
    p_cam[:, 2] = rr * np.sin(th)
    d_P = np.empty((len(raw), 3, 3))
    if rotation is None:
        d_P[:, :, 0] = p_cam
        d_P[:, :, 1] = y[:, 3:6] * (alpha * v_max)
        d_P[:, :, 2] = y[:, 6:9] * (alpha ** 2 * a_max)
    else:
        R = np.asarray(rotation, float)
        d_P[:, :, 0] = p_cam @ R.T
        d_P[:, :, 1] = (y[:, 3:6] * (alpha * v_max)) @ R.T
        d_P[:, :, 2] = (y[:, 6:9] * (alpha ** 2 * a_max)) @ R.T
    if position is not None:
        d_P[:, :, 0] += np.asarray(position, float)
    return d_P, (th, ph, rr)


def chain_rule_batch(grad_dP: np.ndarray, raw: np.ndarray, thetas, phis,
                     radii, cfg: LatticeConfig, alpha: float, v_max: float,
                     a_max: float, rotation=None) -> np.ndarray:
    """Gradient w.r.t. raw variables, shape (N, 9), from d_P gradients."""
    raw = np.atleast_2d(np.asarray(raw, float))
    grad_dP = np.asarray(grad_dP, float).reshape(len(raw), 3, 3)
    R = np.eye(3) if rotation is None else np.asarray(rotation, float)
    th = np.asarray(thetas, float) + np.tanh(raw[:, 0]) * cfg.d_theta
    ph = np.asarray(phis, float) + np.tanh(raw[:, 1]) * cfg.d_phi
    rr = np.asarray(radii, float) * (1.0 + np.tanh(raw[:, 2]))
    J_sph = spherical_jacobian(th, ph, rr)  # (N, 3, 3), cols (theta, phi, r)
    g_pos_cam = grad_dP[:, :, 0] @ R  # world -> camera
    g_angles = np.einsum("na,nae->ne", g_pos_cam, J_sph)  # (N, 3)
    sech2 = 1.0 - np.tanh(raw[:, :3]) ** 2
    out = np.empty((len(raw), RAW_DIM))
    out[:, 0] = g_angles[:, 0] * sech2[:, 0] * cfg.d_theta
    out[:, 1] = g_angles[:, 1] * sech2[:, 1] * cfg.d_phi
    out[:, 2] = g_angles[:, 2] * sech2[:, 2] * np.asarray(radii, float)
    g_vel_cam = grad_dP[:, :, 1] @ R
    g_acc_cam = grad_dP[:, :, 2] @ R
    out[:, 3:6] = g_vel_cam * (1.0 - np.tanh(raw[:, 3:6]) ** 2) * alpha * v_max
    out[:, 6:9] = g_acc_cam * (1.0 - np.tanh(raw[:, 6:9]) ** 2) * alpha ** 2 * a_max
    return out


def chain_rule(grad_dP: np.ndarray, pred: PredictionVector,
               anchor: PrimitiveAnchor, cfg: LatticeConfig, alpha: float,
               v_max: float, a_max: float, rotation=None) -> np.ndarray:
    """Single-candidate chain rule: gradient w.r.t. the raw 9 variables."""
    raw = np.concatenate([[pred.y_theta, pred.y_phi, pred.y_r],
                          pred.y_v, pred.y_a])[None]
    return chain_rule_batch(grad_dP[None], raw, [anchor.theta], [anchor.phi],
                            [anchor.r], cfg, alpha, v_max, a_max, rotation)[0]


# -- losses -----------------------------------------------------------------

def smooth_l1(x, beta: float = 1.0):
    """Elementwise smooth-L1 (Huber-style) with quadratic zone |x| < beta."""
    x = np.abs(np.asarray(x, float))
    return np.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta)


def smooth_l1_grad(x, beta: float = 1.0):
    x = np.asarray(x, float)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def cost_supervision(y_c: float, J_s: float, J_c: float, J_g: float,
                     mode: str, weights: CostWeights | None = None) -> float:
    """Smooth-L1 loss between the predicted and the realized trajectory cost.

    The target excludes the goal term in tracking mode, where a target may
    not exist.
    """
    w = weights or CostWeights()
    target = w.lambda_s * J_s + w.lambda_c * J_c
    if mode == "navigation":
        target += w.lambda_g * J_g
    elif mode != "tracking":
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.sum(smooth_l1(y_c - target)))


def total_loss(per_anchor: list[dict], mode: str,
               weights: CostWeights | None = None) -> float:
    """Assemble the training loss over anchors.

    Each entry carries J_s, J_c, J_g, L_cost and, for tracking, a label in
    {"positive", "negative", "ignored"} plus L_tgt / L_obj where defined.
    Navigation treats every anchor as positive and drops the detection terms.
    """
    w = weights or CostWeights()
    total = 0.0
    for entry in per_anchor:
        traj = w.lambda_s * entry["J_s"] + w.lambda_c * entry["J_c"]
        l_cost = entry.get("L_cost", 0.0)
        if mode == "navigation":
            total += traj + w.lambda_g * entry["J_g"] + l_cost
            continue
        label = entry.get("label")
        if label == "positive":
            total += (traj + w.lambda_g * entry["J_g"] + l_cost
                      + entry.get("L_tgt", 0.0) + entry.get("L_obj", 0.0))
        elif label == "ignored":
            total += w.lambda_1 * (traj + l_cost)
        elif label == "negative":
            total += w.lambda_1 * (traj + l_cost) + w.lambda_2 * entry.get("L_obj", 0.0)
        else:
            raise ValueError(f"anchor missing a valid label: {label!r}")
    return float(total)


# -- batched engine ----------------------------------------------------------

@dataclass
class CostEngine:
    """Batched trajectory-cost evaluation for a fixed frame context.

    Holds everything that is constant across candidates of one planning
    cycle: the start state, horizon, field, goal, and decode parameters.
    """

    grid: EsdfGrid | None
    d_F: np.ndarray  # (3, 3) world start state
    horizon_T: float
    cfg: LatticeConfig
    alpha: float
    v_max: float
    a_max: float
    goal_p: np.ndarray
    mode: str = "tracking"  # goal scaling mode
    weights: CostWeights = field(default_factory=CostWeights)
    potential: PotentialParams | None = None
    rotation: np.ndarray = None  # type: ignore[assignment]  # world-from-camera
    position: np.ndarray = None  # type: ignore[assignment]
    use_kernel: bool = True  # compiled hot loop when numba is present

    def __post_init__(self):
        self.d_F = np.asarray(self.d_F, float)
        if self.rotation is None:
            self.rotation = np.eye(3)
        if self.position is None:
            self.position = np.zeros(3)
        if self.potential is None:
            self.potential = PotentialParams(dt=self.horizon_T / 20.0)
        self.goal_p = np.asarray(self.goal_p, float)
        if self.mode == "navigation":
            delta = self.goal_p - self.position
            norm = np.linalg.norm(delta)
            if norm < 1e-9:
                raise ValueError("navigation goal coincides with position")
            self.goal_p = self.position + delta / norm * self.cfg.r
        T = float(self.horizon_T)
        self._B = _hermite_gram(T)
        self._Mt = hermite_matrix(T).T
        self._powers, self._P = _sample_rows(T, float(self.potential.dt))
        self._vel_scale = self.alpha * self.v_max
        self._acc_scale = self.alpha ** 2 * self.a_max
        if self.grid is not None:
            g = self.grid
            nx, ny, nz = g.dims
            self._grid_args = (True, g._flat, nx, ny, nz,
                               g.origin, float(g.resolution))
        else:
            self._grid_args = (False, np.zeros(8), 2, 2, 2, np.zeros(3), 1.0)

    def set_anchors(self, thetas, phis, radii) -> None:
        self.thetas = np.asarray(thetas, float)
        self.phis = np.asarray(phis, float)
        self.radii = np.asarray(radii, float)

    def decode(self, raw: np.ndarray, idx=None) -> np.ndarray:
        th, ph, rr = self.thetas, self.phis, self.radii
        if idx is not None:
            th, ph, rr = th[idx], ph[idx], rr[idx]
        d_P, _ = decode_raw_batch(raw, th, ph, rr,
                                  self.cfg, self.alpha, self.v_max, self.a_max,
                                  self.rotation, self.position)
        return d_P

    def evaluate(self, raw: np.ndarray, with_grad: bool = True, idx=None):
        """Weighted cost per candidate and, optionally, raw-space gradients.

        idx restricts the evaluation to a subset of the configured anchors
        (raw rows must match). Returns (total (N,), parts dict, grad (N, 9)
        or None). This is a fused fast path; it matches the composable
        smoothness/collision/goal/chain_rule functions exactly.
        """
        raw = np.atleast_2d(np.asarray(raw, float))
        n = len(raw)
        anchor_th, anchor_ph, anchor_rr = self.thetas, self.phis, self.radii
        if idx is not None:
            anchor_th = anchor_th[idx]
            anchor_ph = anchor_ph[idx]
            anchor_rr = anchor_rr[idx]
        if self.use_kernel and kernels.HAVE_NUMBA:
            w = self.weights
            pot = self.potential
            total = np.empty(n)
            J_s = np.empty(n)
            J_c = np.empty(n)
            J_g = np.empty(n)
            grad_raw = np.empty((n, RAW_DIM)) if with_grad else np.empty((0, RAW_DIM))
            kernels.eval_batch(
                np.ascontiguousarray(raw), anchor_th, anchor_ph, anchor_rr,
                self.cfg.d_theta, self.cfg.d_phi, self.d_F, self._B, self._Mt,
                self._powers, self._P, self.rotation, self.position,
                self.goal_p, self._vel_scale, self._acc_scale,
                w.lambda_s, w.lambda_c, w.lambda_g,
                pot.d_safe, pot.falloff, pot.cutoff, pot.dt,
                *self._grid_args, with_grad,
                total, J_s, J_c, J_g, grad_raw)
            parts = {"J_s": J_s, "J_c": J_c, "J_g": J_g}
            return total, parts, grad_raw if with_grad else None
        y = np.tanh(raw)
        th = anchor_th + y[:, 0] * self.cfg.d_theta
        ph = anchor_ph + y[:, 1] * self.cfg.d_phi
        rr = anchor_rr * (1.0 + y[:, 2])
        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(ph), np.sin(ph)
        p_cam = np.empty((n, 3))
        p_cam[:, 0] = rr * ct * cp
        p_cam[:, 1] = rr * ct * sp
        p_cam[:, 2] = rr * st
        R = self.rotation
        d = np.empty((n, 3, 6))
        d[:, :, :3] = self.d_F
        d[:, :, 3] = p_cam @ R.T + self.position
        d[:, :, 4] = (y[:, 3:6] * self._vel_scale) @ R.T
        d[:, :, 5] = (y[:, 6:9] * self._acc_scale) @ R.T
        # squared-jerk quadratic form
        dB = d @ self._B
        J_s = np.einsum("nai,nai->n", dB, d)
        # obstacle potential along the sampled path
        pot = self.potential
        if self.grid is not None:
            coeffs = d @ self._Mt  # (n, 3, 6)
            pos = np.ascontiguousarray(
                (coeffs @ self._powers.T).swapaxes(1, 2))  # (n, K, 3)
            dist, grad_d, _ = self.grid.query(pos, with_grad=with_grad)
            near = dist < pot.cutoff
            c = np.zeros_like(dist)
            c[near] = np.exp((pot.d_safe - dist[near]) / pot.falloff)
            J_c = c.sum(axis=1) * pot.dt
        else:
            J_c = np.zeros(n)
        diff = d[:, :, 3] - self.goal_p
        J_g = np.einsum("na,na->n", diff, diff)
        w = self.weights
        total = w.lambda_s * J_s + w.lambda_c * J_c + w.lambda_g * J_g
        parts = {"J_s": J_s, "J_c": J_c, "J_g": J_g}
        if not with_grad:
            return total, parts, None
        grad_dP = (2.0 * w.lambda_s) * dB[:, :, 3:]
        if self.grid is not None:
            dcdx = (-w.lambda_c * pot.dt / pot.falloff) \
                * c[..., None] * grad_d  # (n, K, 3)
            grad_dP += dcdx.swapaxes(1, 2) @ self._P
        grad_dP[:, :, 0] += (2.0 * w.lambda_g) * diff
        # chain rule through the world placement, spherical decode, and tanh
        gp = grad_dP[:, :, 0] @ R  # world -> camera
        g_th = rr * (ct * gp[:, 2] - st * (cp * gp[:, 0] + sp * gp[:, 1]))
        g_ph = rr * ct * (cp * gp[:, 1] - sp * gp[:, 0])
        g_r = ct * (cp * gp[:, 0] + sp * gp[:, 1]) + st * gp[:, 2]
        sech2 = 1.0 - y * y
        grad_raw = np.empty((n, 9))
        grad_raw[:, 0] = g_th * sech2[:, 0] * self.cfg.d_theta
        grad_raw[:, 1] = g_ph * sech2[:, 1] * self.cfg.d_phi
        grad_raw[:, 2] = g_r * sech2[:, 2] * anchor_rr
        grad_raw[:, 3:6] = (grad_dP[:, :, 1] @ R) \
            * sech2[:, 3:6] * self._vel_scale
        grad_raw[:, 6:9] = (grad_dP[:, :, 2] @ R) \
            * sech2[:, 6:9] * self._acc_scale
        return total, parts, grad_raw
