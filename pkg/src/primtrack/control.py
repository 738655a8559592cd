"""Flatness-based command synthesis and the high-gain disturbance observer.

Desired acceleration plus yaw map to a desired attitude and collective
thrust; the observer recursively estimates the lumped disturbance (drag,
model mismatch, external forces) from measured velocity and the last
commanded thrust so it can be compensated in the command computation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["Command", "ObserverState", "flatness_commands", "observer_step",
           "GRAVITY"]

GRAVITY = 9.8  # m/s^2, world z up
_EZ = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Command:
    """Desired world-from-body attitude and collective thrust (newtons)."""

    attitude: np.ndarray  # (3, 3)
    thrust: float

    def __post_init__(self):
        object.__setattr__(self, "attitude", np.asarray(self.attitude, float))

    def acceleration(self, mass: float, d_hat=None) -> np.ndarray:
        """Translational acceleration this command produces (inverts the
        rigid-body dynamics; d_hat in newtons)."""
        d = np.zeros(3) if d_hat is None else np.asarray(d_hat, float)
        return (self.attitude @ _EZ) * self.thrust / mass \
            - GRAVITY * _EZ + d / mass


def flatness_commands(acc_des, yaw: float, d_hat, mass: float,
                      eps: float = 1e-6,
                      prev_body_y=None) -> Command:
    """Attitude and collective thrust realizing a desired acceleration.

    The thrust direction is the disturbance-compensated specific force;
    body y is built from the yaw heading. A nearly-free-fall command (thrust
    direction undefined) is an error the caller must clamp. When the thrust
    axis is parallel to the heading vector the previous body y, if supplied,
    breaks the singularity.
    """
    acc_des = np.asarray(acc_des, float)
    d_hat = np.asarray(d_hat, float)
    F = acc_des - d_hat / mass + GRAVITY * _EZ  # specific force, m/s^2
    norm_F = float(np.linalg.norm(F))
    if norm_F < eps:
        raise ValueError("degenerate (free-fall) thrust command")
    R_z = F / norm_F
    heading = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    y_axis = np.cross(R_z, heading)
    ny = float(np.linalg.norm(y_axis))
    if ny < eps:
        if prev_body_y is None:
            raise ValueError("thrust direction parallel to heading; "
                             "no previous body y to fall back on")
        y_axis = np.asarray(prev_body_y, float)
        y_axis = y_axis - (y_axis @ R_z) * R_z
        y_axis /= np.linalg.norm(y_axis)
    else:
        y_axis /= ny
    x_axis = np.cross(y_axis, R_z)
    R = np.column_stack([x_axis, y_axis, R_z])
    return Command(R, mass * norm_F)


@dataclass(frozen=True)
class ObserverState:
    """High-gain observer state: momentum and lumped-disturbance estimates."""

    z1_hat: np.ndarray  # kg m/s
    z2_hat: np.ndarray  # newtons (disturbance estimate)
    alpha1: float = 2.0
    alpha2: float = 1.0
    zeta: float = 0.05
    mass: float = 1.0
    stability_flag: bool = False

    def __post_init__(self):
        object.__setattr__(self, "z1_hat", np.asarray(self.z1_hat, float))
        object.__setattr__(self, "z2_hat", np.asarray(self.z2_hat, float))
        if not (0.0 < self.zeta < 1.0):
            raise ValueError("zeta must lie in (0, 1)")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("observer gains must be positive")

    @classmethod
    def initial(cls, velocity=None, mass: float = 1.0, **kw) -> "ObserverState":
        v = np.zeros(3) if velocity is None else np.asarray(velocity, float)
        return cls(mass * v, np.zeros(3), mass=mass, **kw)

    @property
    def disturbance(self) -> np.ndarray:
        return self.z2_hat


def observer_step(obs: ObserverState, v_meas, attitude, thrust: float,
                  dt: float) -> ObserverState:
    """Forward-Euler update from measured velocity and the last command.

    Momentum innovation drives both estimates with gains scaled by 1/zeta
    and 1/zeta^2. Steps larger than zeta/2 violate the stiff-integration
    margin and set the stability flag.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    z1 = obs.mass * np.asarray(v_meas, float)
    err = z1 - obs.z1_hat
    thrust_force = np.asarray(attitude, float) @ _EZ * thrust
    z1_dot = thrust_force - obs.mass * GRAVITY * _EZ + obs.z2_hat \
        + (obs.alpha1 / obs.zeta) * err
    z2_dot = (obs.alpha2 / obs.zeta ** 2) * err
    return replace(obs,
                   z1_hat=obs.z1_hat + dt * z1_dot,
                   z2_hat=obs.z2_hat + dt * z2_dot,
                   stability_flag=dt > obs.zeta / 2)


def telemetry_row(t: float, acc_des, cmd: Command, obs: ObserverState):
    """CSV row of the acceleration-domain curves: desired acceleration, the
    acceleration the attitude command produces, and the disturbance term."""
    att_acc = (cmd.attitude @ _EZ) * cmd.thrust / obs.mass - GRAVITY * _EZ
    dist_acc = obs.z2_hat / obs.mass
    vals = [t, *np.asarray(acc_des, float), *att_acc, *dist_acc]
    return ",".join(f"{v:.6f}" for v in vals)
