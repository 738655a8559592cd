"""Runtime target-state maintenance and candidate selection.

A constant-velocity Kalman filter tracks the target; candidate detections
are gated by the position change a tentative update would cause, which
suppresses false positives without predicting the target's future path.
The executed trajectory is the minimum-predicted-cost candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "TargetEstimate",
    "SelectionResult",
    "predict",
    "gated_update",
    "select",
    "plan_yaw",
]

_H = np.hstack([np.eye(3), np.zeros((3, 3))])  # measurement matrix


def process_noise(q: float, dt: float) -> np.ndarray:
    """Exact discretization of continuous white acceleration with intensity q."""
    I3 = np.eye(3)
    return q * np.block([[dt ** 3 / 3 * I3, dt ** 2 / 2 * I3],
                         [dt ** 2 / 2 * I3, dt * I3]])


@dataclass(frozen=True)
class TargetEstimate:
    """Position/velocity state with covariance and gating parameters."""

    x: np.ndarray  # (6,): position, velocity
    P: np.ndarray  # (6, 6)
    q: float = 4.0  # process-noise intensity (m^2/s^3); deliberately large
    R_m: np.ndarray = None  # type: ignore[assignment]
    gate: float = 2.0  # max accepted position innovation (m)

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float))
        object.__setattr__(self, "P", np.asarray(self.P, float))
        if self.R_m is None:
            object.__setattr__(self, "R_m", 0.04 * np.eye(3))
        else:
            object.__setattr__(self, "R_m", np.asarray(self.R_m, float))

    @classmethod
    def from_position(cls, position, position_var: float = 1.0,
                      velocity_var: float = 4.0, **kw) -> "TargetEstimate":
        x = np.concatenate([np.asarray(position, float), np.zeros(3)])
        P = np.diag([position_var] * 3 + [velocity_var] * 3)
        return cls(x, P, **kw)

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[3:]

    def kalman_gain(self) -> np.ndarray:
        S = _H @ self.P @ _H.T + self.R_m
        return self.P @ _H.T @ np.linalg.inv(S)


def predict(est: TargetEstimate, dt: float) -> TargetEstimate:
    """Constant-velocity propagation; no future-trajectory extrapolation."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    F = np.eye(6)
    F[:3, 3:] = dt * np.eye(3)
    x = F @ est.x
    P = F @ est.P @ F.T + process_noise(est.q, dt)
    return replace(est, x=x, P=P)


def gated_update(est: TargetEstimate, detections):
    """Commit the most consistent in-gate detection, if any.

    Every detection is tentatively applied with the current Kalman gain; the
    position change it would cause is the inconsistency. Detections beyond
    the gate are rejected outright; among the rest the smallest-inconsistency
    one is committed. Returns (estimate, accepted index or None).
    """
    detections = [np.asarray(d, float) for d in detections]
    if not detections:
        return est, None
    K = est.kalman_gain()
    best, best_inc = None, est.gate
    for idx, z in enumerate(detections):
        innovation = z - _H @ est.x
        inconsistency = float(np.linalg.norm((K @ innovation)[:3]))
        if inconsistency <= best_inc:
            best, best_inc = idx, inconsistency
    if best is None:
        return est, None
    z = detections[best]
    x = est.x + K @ (z - _H @ est.x)
    I_KH = np.eye(6) - K @ _H
    P = I_KH @ est.P @ I_KH.T + K @ est.R_m @ K.T  # Joseph form
    return replace(est, x=x, P=P), best


@dataclass(frozen=True)
class SelectionResult:
    """Chosen candidate and the committed detection of one planning cycle."""

    chosen: int
    predicted_cost: float
    accepted_detection: int | None = None
    estimate: TargetEstimate | None = None
    lost: bool = False


def select(candidate_costs, mode: str = "tracking",
           objectness=None, detections=None,
           est: TargetEstimate | None = None,
           objectness_threshold: float = 0.5) -> SelectionResult:
    """Filter detections by objectness, gate them, and pick the best trajectory.

    candidate_costs are the predicted costs y_c; the trajectory choice is
    their argmin regardless of detection outcome (ties break to the lowest
    index). In tracking mode detections paired with objectness scores at or
    above the threshold are passed through the gated Kalman update.
    """
    costs = np.asarray(candidate_costs, float)
    if costs.size == 0:
        raise ValueError("candidate list is empty")
    chosen = int(np.argmin(costs))
    accepted = None
    if mode == "tracking" and est is not None and detections is not None:
        scores = _sigmoid(np.asarray(objectness, float))
        kept = [i for i in range(len(detections)) if scores[i] >= objectness_threshold]
        est, accepted_local = gated_update(est, [detections[i] for i in kept])
        accepted = kept[accepted_local] if accepted_local is not None else None
    return SelectionResult(chosen, float(costs[chosen]), accepted, est,
                           lost=accepted is None)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def plan_yaw(target_position, quad_position, current_yaw: float,
             dt: float, omega_max: float = 2.5,
             lost: bool = False, last_bearing: float | None = None) -> float:
    """Rate-limited yaw toward the estimated target (or the lost bearing)."""
    if lost and last_bearing is not None:
        desired = last_bearing
    else:
        delta = np.asarray(target_position, float) - np.asarray(quad_position, float)
        if np.hypot(delta[0], delta[1]) < 1e-9:
            return current_yaw
        desired = float(np.arctan2(delta[1], delta[0]))
    err = (desired - current_yaw + np.pi) % (2 * np.pi) - np.pi
    step = np.clip(err, -omega_max * dt, omega_max * dt)
    return float(current_yaw + step)
