"""Trajectory-prediction backends and their training machinery.

Two interchangeable backends produce per-anchor 14-dimensional predictions:

* a per-frame gradient-descent refiner that optimizes the raw trajectory
  variables directly against the cost engine (the classical path), and
* a small shared-weight head over privileged per-frustum depth features,
  trained by back-propagating the trajectory-cost gradients plus the
  detection losses through the raw outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, anchor_to_cell, cell_to_anchor
from .costs import (CostEngine, CostBreakdown, CostWeights, chain_rule_batch,
                    smooth_l1, smooth_l1_grad)
from .environment import EsdfGrid, raycast
from .primitives import LatticeConfig, PredictionVector, build_library, \
    spherical_endpoint

__all__ = [
    "FrustumFeatures",
    "PolicyHead",
    "SampleAssignment",
    "StateSampler",
    "refine",
    "assign_samples",
    "decode_target",
    "detection_losses",
    "sample_training_state",
    "compute_features",
    "frame_loss_and_grad",
    "backward_and_step",
    "save_head",
    "load_head",
]

FEATURE_DIM = 9
OUTPUT_DIM = 14
TARGET_SENTINEL = -1.0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, float)))


# -- refiner backend ---------------------------------------------------------

def refine(engine: CostEngine, steps: int = 30, step_size: float = 0.1,
           armijo: float = 1e-4, max_backtracks: int = 8,
           raw0: np.ndarray | None = None, grad_tol: float = 1e-5,
           ftol: float = 1e-7):
    """Per-anchor gradient descent on the raw trajectory variables.

    The engine must have anchors set. A backtracking line search keeps every
    candidate's cost non-increasing; candidates whose gradient norm falls
    below grad_tol, whose per-step improvement falls below ftol, or whose
    line search stalls, drop out of the remaining iterations. Returns
    (raw, total, parts) with raw of shape (N, 9); candidates whose cost is
    NaN are flagged infeasible by a NaN total.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = len(engine.thetas)
    raw = np.zeros((n, 9)) if raw0 is None else np.array(raw0, float)
    total, _, grad = engine.evaluate(raw)
    gnorm2 = np.sum(grad * grad, axis=1)
    active = np.isfinite(total) & (gnorm2 > grad_tol ** 2)
    step_mem = np.full(n, step_size)
    halvings = 0.5 ** np.arange(max_backtracks)
    for _ in range(steps):
        if not active.any():
            break
        idx = np.where(active)[0]
        m = len(idx)
        # all line-search trials of every active candidate in one batch
        trials = step_mem[idx, None] * halvings  # (m, B)
        cand = raw[idx, None, :] - trials[:, :, None] * grad[idx, None, :]
        idx_rep = np.repeat(idx, max_backtracks)
        f, _, _ = engine.evaluate(cand.reshape(-1, 9), with_grad=False,
                                  idx=idx_rep)
        f = f.reshape(m, max_backtracks)
        ok = np.isfinite(f) & \
            (f <= total[idx, None] - armijo * trials * gnorm2[idx, None])
        any_ok = ok.any(axis=1)
        first = np.argmax(ok, axis=1)
        moved = idx[any_ok]
        if len(moved):
            pick = first[any_ok]
            raw[moved] = cand[any_ok, pick]
            # re-expand the accepted step a little for the next iteration
            step_mem[moved] = np.minimum(
                trials[any_ok, pick] * 2.0, step_size)
            tot2, _, grad2 = engine.evaluate(raw[moved], idx=moved)
            improvement = total[moved] - tot2
            total[moved] = tot2
            grad[moved] = grad2
            gnorm2[moved] = np.sum(grad2 * grad2, axis=1)
            active[moved[improvement < ftol]] = False
        active[idx[~any_ok]] = False
        active &= gnorm2 > grad_tol ** 2
    total, parts, _ = engine.evaluate(raw, with_grad=False)
    return raw, total, parts


def refiner_predictions(engine: CostEngine, cfg: LatticeConfig, **kw):
    """Run the refiner and wrap results in the common prediction contract.

    The predicted cost slot carries the realized weighted cost so downstream
    selection treats both backends identically.
    """
    raw, total, parts = refine(engine, **kw)
    results = []
    for k in range(len(raw)):
        pred = PredictionVector(
            y_theta=raw[k, 0], y_phi=raw[k, 1], y_r=raw[k, 2],
            y_v=raw[k, 3:6], y_a=raw[k, 6:9], y_c=float(total[k]))
        bd = CostBreakdown(float(parts["J_s"][k]), float(parts["J_c"][k]),
                           float(parts["J_g"][k]), np.zeros((3, 3)))
        results.append((pred, bd))
    return results


# -- privileged frustum features ---------------------------------------------

def _cell_rotation(theta: float, phi: float) -> np.ndarray:
    """Camera-to-cell-local rotation; local x points at the grid center."""
    cp, sp = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    rz = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[ct, 0.0, -st], [0.0, 1.0, 0.0], [st, 0.0, ct]])
    return rz @ ry  # columns are the local axes in the camera frame


@dataclass(frozen=True)
class FrustumFeatures:
    """Per-cell feature rows (n_cells, 9): min/mean frustum depth (scaled by
    the planning radius), target distance or sentinel, and the normalized
    velocity/acceleration expressed in the cell-local frame."""

    values: np.ndarray


def compute_features(grid: EsdfGrid | None, cam: CameraModel,
                     cfg: LatticeConfig, velocity_n, acceleration_n,
                     target_world=None, occupancy_threshold: float = 0.15,
                     rays_per_axis: int = 3) -> FrustumFeatures:
    """Privileged depth features plus state inputs for every grid cell.

    A small bundle of rays is marched through the distance field per cell
    frustum; min and mean hit distances summarize free space ahead.
    """
    anchors = build_library(cfg)
    v_n = np.asarray(velocity_n, float)
    a_n = np.asarray(acceleration_n, float)
    pitch_p = cfg.fov_h / cfg.m_phi
    pitch_t = cfg.fov_v / cfg.m_theta
    offs = (np.arange(rays_per_axis) - (rays_per_axis - 1) / 2) / rays_per_axis
    dirs = []
    for a in anchors:
        for ot in offs:
            for op in offs:
                dirs.append(spherical_endpoint(a.theta + ot * pitch_t,
                                               a.phi + op * pitch_p, 1.0))
    dirs_world = np.asarray(dirs) @ cam.rotation.T  # (n_cells*B, 3)
    n_bundle = rays_per_axis ** 2
    step = (grid.resolution / 2) if grid is not None else 0.1
    n_s = max(2, int(np.ceil(cfg.r / step)) + 1)
    s = np.linspace(0.0, cfg.r, n_s)
    if grid is not None:
        pts = cam.position + dirs_world[:, None, :] * s[None, :, None]
        dist, _, _ = grid.query(pts)
        hit = dist < occupancy_threshold
        first = np.where(hit.any(axis=1), s[np.argmax(hit, axis=1)], cfg.r)
    else:
        first = np.full(len(dirs_world), cfg.r)
    first = first.reshape(cfg.n_cells, n_bundle)
    feats = np.empty((cfg.n_cells, FEATURE_DIM))
    feats[:, 0] = first.min(axis=1) / cfg.r
    feats[:, 1] = first.mean(axis=1) / cfg.r
    feats[:, 2] = TARGET_SENTINEL
    if target_world is not None:
        p_c = cam.world_to_camera(target_world)
        if cam.in_frustum(p_c):
            u, v, _ = cam.project_camera(p_c)
            col, row = cam.pixel_to_cell(u, v)
            i, j = cell_to_anchor(int(col), int(row), cfg)
            feats[i * cfg.m_theta + j, 2] = np.linalg.norm(p_c) / cfg.r
    for k, a in enumerate(anchors):
        R = _cell_rotation(a.theta, a.phi)
        feats[k, 3:6] = v_n @ R
        feats[k, 6:9] = a_n @ R
    return FrustumFeatures(feats)


# -- trainable head ------------------------------------------------------------

@dataclass
class PolicyHead:
    """Shared-weight fully connected map from features to the 14 outputs.

    Equivalent to 1x1 convolutions over the grid: the identical parameters
    are applied to every cell row independently.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def create(cls, hidden=(64, 64), in_dim: int = FEATURE_DIM,
               out_dim: int = OUTPUT_DIM, seed: int = 0) -> "PolicyHead":
        rng = np.random.default_rng(seed)
        sizes = [in_dim, *hidden, out_dim]
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, features: np.ndarray,
                keep_cache: bool = False):
        """Outputs (n_cells, 14); optionally returns the activation cache."""
        x = np.atleast_2d(np.asarray(features, float))
        if x.shape[1] != self.weights[0].shape[0]:
            raise ValueError(
                f"feature dim {x.shape[1]} != head input {self.weights[0].shape[0]}")
        cache = [x]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if k < len(self.weights) - 1:
                x = np.maximum(x, 0.0)
            cache.append(x)
        if keep_cache:
            return x, cache
        return x

    def backward(self, cache: list[np.ndarray], dLdy: np.ndarray):
        """Parameter gradients from dL/doutput, summed over cells."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = np.asarray(dLdy, float)
        for k in range(len(self.weights) - 1, -1, -1):
            grads_w[k] = cache[k].T @ delta
            grads_b[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k].T) * (cache[k] > 0)
        return grads_w, grads_b


@dataclass
class HeadOptimizer:
    """Plain gradient descent with optional momentum or Adam."""

    learning_rate: float = 1e-3
    method: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _state: dict = field(default_factory=dict)
    _t: int = 0

    def step(self, head: PolicyHead, grads_w, grads_b) -> None:
        params = head.weights + head.biases
        grads = list(grads_w) + list(grads_b)
        self._t += 1
        for idx, (p, g) in enumerate(zip(params, grads)):
            if self.method == "sgd":
                p -= self.learning_rate * g
            elif self.method == "momentum":
                v = self._state.setdefault(("v", idx), np.zeros_like(p))
                v *= self.momentum
                v += g
                p -= self.learning_rate * v
            elif self.method == "adam":
                m = self._state.setdefault(("m", idx), np.zeros_like(p))
                v = self._state.setdefault(("v2", idx), np.zeros_like(p))
                m *= self.momentum
                m += (1 - self.momentum) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mh = m / (1 - self.momentum ** self._t)
                vh = v / (1 - self.beta2 ** self._t)
                p -= self.learning_rate * mh / (np.sqrt(vh) + self.eps)
            else:
                raise ValueError(f"unknown optimizer {self.method!r}")


_HEAD_MAGIC = b"PTHEAD01"


def save_head(path, head: PolicyHead) -> None:
    """Binary checkpoint: magic, layer count, sizes (u32), then per layer the
    row-major float32 weight matrix followed by the bias, little-endian."""
    sizes = head.layer_sizes
    with open(path, "wb") as f:
        f.write(_HEAD_MAGIC)
        f.write(struct.pack("<I", len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for w, b in zip(head.weights, head.biases):
            f.write(w.astype("<f4").tobytes(order="C"))
            f.write(b.astype("<f4").tobytes())


def load_head(path) -> PolicyHead:
    with open(path, "rb") as f:
        if f.read(8) != _HEAD_MAGIC:
            raise ValueError("not a policy head checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        sizes = struct.unpack(f"<{n}I", f.read(4 * n))
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            ws.append(np.frombuffer(f.read(4 * a * b), dtype="<f4")
                      .astype(float).reshape(a, b))
            bs.append(np.frombuffer(f.read(4 * b), dtype="<f4").astype(float))
    return PolicyHead(ws, bs)


# -- detection decoding, labels, losses ----------------------------------------

def decode_target(pred: PredictionVector, cell: tuple[int, int],
                  cam: CameraModel):
    """Pixel center and world position of the predicted target.

    cell is (u_grid, v_grid) = (column, row). A nonpositive depth yields the
    pixel only (world position None).
    """
    u_grid, v_grid = cell
    u = (_sigmoid(pred.y_du) + u_grid) * cam.ds
    v = (_sigmoid(pred.y_dv) + v_grid) * cam.ds
    if pred.y_d <= 0:
        return (float(u), float(v)), None
    return (float(u), float(v)), cam.unproject(u, v, pred.y_d)


@dataclass(frozen=True)
class SampleAssignment:
    """Per-cell labels in anchor flat order plus the positive index, if any."""

    labels: tuple[str, ...]
    positive: int | None

    def label_of(self, flat_index: int) -> str:
        return self.labels[flat_index]


def assign_samples(target_world, cam: CameraModel, cfg: LatticeConfig,
                   grid: EsdfGrid | None = None,
                   occupancy_threshold: float = 0.1,
                   max_depth: float | None = None) -> SampleAssignment:
    """Positive / negative / ignored labels per grid cell.

    No target, target outside the frustum, or target occluded on the
    privileged map: every cell is negative. Otherwise the containing cell is
    positive, its Chebyshev-1 ring is ignored, and the rest are negative.
    """
    all_negative = SampleAssignment(("negative",) * cfg.n_cells, None)
    if target_world is None:
        return all_negative
    p_c = cam.world_to_camera(target_world)
    if not cam.in_frustum(p_c, max_depth=max_depth):
        return all_negative
    if grid is not None and not raycast(grid, cam.position, target_world,
                                        occupancy_threshold):
        return all_negative
    u, v, _ = cam.project_camera(p_c)
    col, row = cam.pixel_to_cell(u, v)
    i0, j0 = cell_to_anchor(int(col), int(row), cfg)
    labels = []
    for i in range(cfg.m_phi):
        for j in range(cfg.m_theta):
            cheb = max(abs(i - i0), abs(j - j0))
            labels.append("positive" if cheb == 0 else
                          "ignored" if cheb == 1 else "negative")
    return SampleAssignment(tuple(labels), i0 * cfg.m_theta + j0)


def detection_losses(pred: PredictionVector, label: str, target_cam,
                     cam: CameraModel, cell: tuple[int, int]):
    """(L_tgt, L_obj) for one cell given its label and camera-frame truth.

    L_tgt is a smooth-L1 on the camera-frame target position (positive cells
    only); L_obj is binary cross-entropy on the objectness score (positive
    and negative cells; ignored cells contribute neither).
    """
    l_tgt = 0.0
    if label == "positive":
        if target_cam is None:
            raise ValueError("positive cells require the ground-truth target")
        (u, v), _ = decode_target(pred, cell, cam)
        p_c = cam.unproject_camera(u, v, pred.y_d)
        l_tgt = float(np.sum(smooth_l1(p_c - np.asarray(target_cam, float))))
    if label == "ignored":
        return l_tgt, 0.0
    y_hat = 1.0 if label == "positive" else 0.0
    p = np.clip(_sigmoid(pred.y_o), 1e-12, 1 - 1e-12)
    l_obj = float(-(y_hat * np.log(p) + (1 - y_hat) * np.log(1 - p)))
    return l_tgt, l_obj


# -- training-state sampling ----------------------------------------------------

@dataclass(frozen=True)
class StateSampler:
    """Random state observations for training-time data augmentation.

    Forward velocity v is distributed so that (v_m - v) is log-normal; the
    lateral/vertical velocity and the acceleration are normal. All numeric
    defaults are toy-scale choices, not published values.
    """

    sigma: float = 0.6
    mu: float | None = None
    v_m: float = 5.5
    lateral_std: float = 1.5
    vertical_std: float = 1.5
    acc_std: float = 1.8

    def __post_init__(self):
        if not self.v_m > 0:
            raise ValueError("v_m must be positive")
        if self.mu is None:
            object.__setattr__(self, "mu", float(np.log(0.4 * self.v_m)))

    @classmethod
    def for_limits(cls, v_max: float, a_max: float) -> "StateSampler":
        return cls(v_m=1.1 * v_max, lateral_std=0.3 * v_max,
                   vertical_std=0.3 * v_max, acc_std=0.3 * a_max)

    def forward_pdf(self, v: np.ndarray) -> np.ndarray:
        """Density of the forward velocity on v < v_m."""
        v = np.asarray(v, float)
        gap = self.v_m - v
        out = np.zeros_like(gap)
        ok = gap > 0
        g = gap[ok]
        out[ok] = np.exp(-((np.log(g) - self.mu) ** 2) / (2 * self.sigma ** 2)) \
            / (g * self.sigma * np.sqrt(2 * np.pi))
        return out


def sample_training_state(sampler: StateSampler, rng: np.random.Generator,
                          size: int | None = None):
    """Velocity and acceleration samples; shapes (3,) or (size, 3)."""
    n = 1 if size is None else size
    v = np.column_stack([
        sampler.v_m - rng.lognormal(sampler.mu, sampler.sigma, n),
        rng.normal(0.0, sampler.lateral_std, n),
        rng.normal(0.0, sampler.vertical_std, n),
    ])
    a = rng.normal(0.0, sampler.acc_std, (n, 3))
    if size is None:
        return v[0], a[0]
    return v, a


# -- end-to-end training step ----------------------------------------------------

def frame_loss_and_grad(y: np.ndarray, engine: CostEngine, cfg: LatticeConfig,
                        cam: CameraModel, assignment: SampleAssignment | None,
                        target_world=None, mode: str = "tracking"):
    """Total per-frame loss and its gradient w.r.t. the raw outputs y (n, 14).

    Trajectory-cost gradients flow through the analytic chain rule; the
    supervision target for the predicted cost is treated as a constant.
    """
    w = engine.weights
    n = cfg.n_cells
    y = np.asarray(y, float)
    raw = y[:, :9]
    _, parts, _ = engine.evaluate(raw, with_grad=False)
    J_s, J_c, J_g = parts["J_s"], parts["J_c"], parts["J_g"]
    from .costs import smoothness as _smooth, collision as _coll
    d_P = engine.decode(raw)
    _, g_s = _smooth(engine.d_F, d_P, engine.horizon_T)
    if engine.grid is not None:
        _, g_c = _coll(engine.d_F, d_P, engine.horizon_T, engine.grid,
                       engine.potential)
    else:
        g_c = np.zeros_like(g_s)
    g_goal = 2.0 * (d_P[:, :, 0] - engine.goal_p)

    if mode == "navigation":
        traj_w = np.ones(n)
        goal_on = np.ones(n, bool)
        labels = ["positive"] * n
    else:
        labels = list(assignment.labels)
        traj_w = np.array([1.0 if l == "positive" else w.lambda_1
                           for l in labels])
        goal_on = np.array([l == "positive" for l in labels])

    y_c_hat = w.lambda_s * J_s + w.lambda_c * J_c
    if mode == "navigation":
        y_c_hat = y_c_hat + w.lambda_g * J_g
    resid = y[:, 9] - y_c_hat
    l_cost = smooth_l1(resid)
    # the supervision target depends on the same raw variables, so its
    # sensitivity flows back into the trajectory-variable gradient too
    coef = traj_w * (1.0 - smooth_l1_grad(resid))
    grad_dP = coef[:, None, None] * (w.lambda_s * g_s + w.lambda_c * g_c)
    goal_coef = np.where(goal_on, 1.0, 0.0)
    if mode == "navigation":
        goal_coef = coef
    grad_dP[:, :, 0] += (w.lambda_g * goal_coef)[:, None] * g_goal
    dLdy = np.zeros((n, OUTPUT_DIM))
    dLdy[:, :9] = chain_rule_batch(grad_dP, raw, engine.thetas, engine.phis,
                                   engine.radii, cfg, engine.alpha,
                                   engine.v_max, engine.a_max, engine.rotation)
    dLdy[:, 9] = traj_w * smooth_l1_grad(resid)

    traj_cost = w.lambda_s * J_s + w.lambda_c * J_c
    loss = float(np.sum(traj_w * (traj_cost + l_cost))
                 + np.sum(w.lambda_g * J_g[goal_on]))

    if mode == "navigation":
        return loss, dLdy

    # detection terms
    p_obj = np.clip(_sigmoid(y[:, 10]), 1e-12, 1 - 1e-12)
    target_cam = cam.world_to_camera(target_world) if target_world is not None else None
    for k, label in enumerate(labels):
        if label == "negative":
            loss += w.lambda_2 * float(-np.log(1 - p_obj[k]))
            dLdy[k, 10] = w.lambda_2 * p_obj[k]
        elif label == "positive":
            loss += float(-np.log(p_obj[k]))
            dLdy[k, 10] = p_obj[k] - 1.0
            i, j = divmod(k, cfg.m_theta)
            col, row = anchor_to_cell(i, j, cfg)
            sig_u, sig_v = _sigmoid(y[k, 11]), _sigmoid(y[k, 12])
            u = (sig_u + col) * cam.ds
            v = (sig_v + row) * cam.ds
            y_d = y[k, 13]
            p_c = cam.unproject_camera(u, v, y_d)
            resid_t = p_c - target_cam
            loss += float(np.sum(smooth_l1(resid_t)))
            g_pc = smooth_l1_grad(resid_t)  # (3,) camera frame
            # p_c = y_d * dir(u, v); derivatives via the optical-frame pinhole
            x_o = (u - cam.cx) / cam.fx
            y_o = (v - cam.cy) / cam.fy
            # camera frame: (x, y, z) = (y_d, -x_o*y_d, -y_o*y_d)
            dp_du = np.array([0.0, -y_d / cam.fx, 0.0])
            dp_dv = np.array([0.0, 0.0, -y_d / cam.fy])
            dp_dd = np.array([1.0, -x_o, -y_o])
            du_dyu = sig_u * (1 - sig_u) * cam.ds
            dv_dyv = sig_v * (1 - sig_v) * cam.ds
            dLdy[k, 11] = float(g_pc @ dp_du) * du_dyu
            dLdy[k, 12] = float(g_pc @ dp_dv) * dv_dyv
            dLdy[k, 13] = float(g_pc @ dp_dd)
    return loss, dLdy


def backward_and_step(head: PolicyHead, frames: list[dict],
                      optimizer: HeadOptimizer) -> float:
    """One optimizer step over a batch of frames; returns the mean loss.

    Each frame dict carries: features (FrustumFeatures or array), engine
    (CostEngine with anchors set), cfg, cam, assignment, target_world, mode.
    """
    acc_w = [np.zeros_like(w) for w in head.weights]
    acc_b = [np.zeros_like(b) for b in head.biases]
    total = 0.0
    for fr in frames:
        feats = fr["features"]
        feats = feats.values if isinstance(feats, FrustumFeatures) else feats
        y, cache = head.forward(feats, keep_cache=True)
        loss, dLdy = frame_loss_and_grad(
            y, fr["engine"], fr["cfg"], fr["cam"], fr.get("assignment"),
            fr.get("target_world"), fr.get("mode", "tracking"))
        gw, gb = head.backward(cache, dLdy)
        for a, g in zip(acc_w, gw):
            a += g / len(frames)
        for a, g in zip(acc_b, gb):
            a += g / len(frames)
        total += loss
    optimizer.step(head, acc_w, acc_b)
    return total / len(frames)
