"""Vehicle models: continuous dynamics, RK4 discretisation, exact linearisation.

States and controls are plain numpy arrays. Every kernel accepts stacked
inputs with arbitrary leading batch axes (states ``(..., n)``, controls
``(..., m)``), so whole trajectories and rollout bundles are processed in one
call. Controls are held constant over each step (zero-order hold).

Two model families are provided:

* ``dubins``: planar unicycle at fixed forward speed, state ``(x, y, yaw)``,
  control ``(turn_rate,)``.
* ``bicycle``: kinematic bicycle, state ``(x, y, speed, yaw, steer)``,
  control ``(accel, steer_rate)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

State = np.ndarray
Control = np.ndarray

DUBINS = "dubins"
BICYCLE = "bicycle"


class DiscreteJacobians(NamedTuple):
    """Linearisation of one discrete step: dx' = A dx + B du."""

    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of a vehicle model.

    Attributes:
        name: Model family, one of ``"dubins"`` or ``"bicycle"``.
        state_dim: Length of the state vector.
        control_dim: Length of the control vector.
        dt: Integration step in seconds.
        control_lower: Elementwise lower control bounds, shape (control_dim,).
        control_upper: Elementwise upper control bounds, shape (control_dim,).
        footprint_radius: Radius of the disc that must stay inside the free
            space, in metres.
        speed: Fixed forward speed (dubins only).
        wheelbase: Axle separation (bicycle only).
    """

    name: str
    state_dim: int
    control_dim: int
    dt: float
    control_lower: np.ndarray
    control_upper: np.ndarray
    footprint_radius: float
    speed: float = 0.0
    wheelbase: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "control_lower", np.asarray(self.control_lower, dtype=float)
        )
        object.__setattr__(
            self, "control_upper", np.asarray(self.control_upper, dtype=float)
        )
        if self.name not in (DUBINS, BICYCLE):
            raise ConfigError(f"unknown model name: {self.name!r}")
        if not self.dt > 0.0:
            raise ConfigError("dt must be positive")
        expected = (self.control_dim,)
        if self.control_lower.shape != expected or self.control_upper.shape != expected:
            raise ConfigError("control bounds must have shape (control_dim,)")
        if np.any(self.control_lower >= self.control_upper):
            raise ConfigError("control_lower must lie strictly below control_upper")
        if self.footprint_radius < 0.0:
            raise ConfigError("footprint_radius must be nonnegative")
        if self.name == DUBINS and not self.speed > 0.0:
            raise ConfigError("dubins model needs a positive speed")
        if self.name == BICYCLE and not self.wheelbase > 0.0:
            raise ConfigError("bicycle model needs a positive wheelbase")


def dubins_model(
    speed: float = 0.7,
    turn_rate_limit: float = 1.0,
    dt: float = 0.05,
    footprint_radius: float = 0.15,
) -> ModelSpec:
    """Unicycle at fixed forward speed with bounded turn rate."""
    return ModelSpec(
        name=DUBINS,
        state_dim=3,
        control_dim=1,
        dt=dt,
        control_lower=np.array([-turn_rate_limit]),
        control_upper=np.array([turn_rate_limit]),
        footprint_radius=footprint_radius,
        speed=speed,
    )


def bicycle_model(
    wheelbase: float = 0.5,
    accel_limit: float = 0.5,
    steer_rate_limit: float = 0.8,
    dt: float = 0.05,
    footprint_radius: float = 0.1,
) -> ModelSpec:
    """Kinematic bicycle with bounded acceleration and steering rate."""
    return ModelSpec(
        name=BICYCLE,
        state_dim=5,
        control_dim=2,
        dt=dt,
        control_lower=np.array([-accel_limit, -steer_rate_limit]),
        control_upper=np.array([accel_limit, steer_rate_limit]),
        footprint_radius=footprint_radius,
        wheelbase=wheelbase,
    )


def continuous_derivative(model: ModelSpec, x: State, u: Control) -> np.ndarray:
    """Time derivative of the state under control u.

    Args:
        model: Model description.
        x: States, shape (..., state_dim).
        u: Controls, shape (..., control_dim); leading axes broadcast with x.

    Returns:
        dx/dt with the broadcast batch shape.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    xb = np.broadcast_to(x, batch + (model.state_dim,))
    ub = np.broadcast_to(u, batch + (model.control_dim,))
    out = np.empty(batch + (model.state_dim,))
    if model.name == DUBINS:
        yaw = xb[..., 2]
        out[..., 0] = model.speed * np.cos(yaw)
        out[..., 1] = model.speed * np.sin(yaw)
        out[..., 2] = ub[..., 0]
    else:
        v = xb[..., 2]
        yaw = xb[..., 3]
        steer = xb[..., 4]
        out[..., 0] = v * np.cos(yaw)
        out[..., 1] = v * np.sin(yaw)
        out[..., 2] = ub[..., 0]
        out[..., 3] = v * np.tan(steer) / model.wheelbase
        out[..., 4] = ub[..., 1]
    return out


def step_rk4(model: ModelSpec, x: State, u: Control) -> State:
    """One classical Runge-Kutta step of length model.dt with u held fixed."""
    dt = model.dt
    k1 = continuous_derivative(model, x, u)
    k2 = continuous_derivative(model, x + (0.5 * dt) * k1, u)
    k3 = continuous_derivative(model, x + (0.5 * dt) * k2, u)
    k4 = continuous_derivative(model, x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def continuous_jacobians(
    model: ModelSpec, x: State, u: Control
) -> tuple[np.ndarray, np.ndarray]:
    """Exact Jacobians of continuous_derivative w.r.t. state and control."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    n, m = model.state_dim, model.control_dim
    xb = np.broadcast_to(x, batch + (n,))
    J = np.zeros(batch + (n, n))
    G = np.zeros(batch + (n, m))
    if model.name == DUBINS:
        yaw = xb[..., 2]
        J[..., 0, 2] = -model.speed * np.sin(yaw)
        J[..., 1, 2] = model.speed * np.cos(yaw)
        G[..., 2, 0] = 1.0
    else:
        v = xb[..., 2]
        yaw = xb[..., 3]
        steer = xb[..., 4]
        cos_yaw = np.cos(yaw)
        sin_yaw = np.sin(yaw)
        tan_steer = np.tan(steer)
        J[..., 0, 2] = cos_yaw
        J[..., 0, 3] = -v * sin_yaw
        J[..., 1, 2] = sin_yaw
        J[..., 1, 3] = v * cos_yaw
        J[..., 3, 2] = tan_steer / model.wheelbase
        # d/dsteer of tan(steer) is sec^2 = 1 + tan^2.
        J[..., 3, 4] = v * (1.0 + tan_steer * tan_steer) / model.wheelbase
        G[..., 2, 0] = 1.0
        G[..., 4, 1] = 1.0
    return J, G


def jacobians(model: ModelSpec, x: State, u: Control) -> DiscreteJacobians:
    """Exact linearisation of step_rk4 via chain rule through the RK4 stages.

    Args:
        model: Model description.
        x: States, shape (..., state_dim).
        u: Controls, shape (..., control_dim).

    Returns:
        DiscreteJacobians with A of shape (..., n, n) and B of (..., n, m).
    """
    dt = model.dt
    k1 = continuous_derivative(model, x, u)
    x2 = x + (0.5 * dt) * k1
    k2 = continuous_derivative(model, x2, u)
    x3 = x + (0.5 * dt) * k2
    k3 = continuous_derivative(model, x3, u)
    x4 = x + dt * k3

    J1, G1 = continuous_jacobians(model, x, u)
    J2, G2 = continuous_jacobians(model, x2, u)
    J3, G3 = continuous_jacobians(model, x3, u)
    J4, G4 = continuous_jacobians(model, x4, u)

    eye = np.eye(model.state_dim)
    K1x, K1u = J1, G1
    K2x = J2 @ (eye + (0.5 * dt) * K1x)
    K2u = J2 @ ((0.5 * dt) * K1u) + G2
    K3x = J3 @ (eye + (0.5 * dt) * K2x)
    K3u = J3 @ ((0.5 * dt) * K2u) + G3
    K4x = J4 @ (eye + dt * K3x)
    K4u = J4 @ (dt * K3u) + G4

    A = eye + (dt / 6.0) * (K1x + 2.0 * K2x + 2.0 * K3x + K4x)
    B = (dt / 6.0) * (K1u + 2.0 * K2u + 2.0 * K3u + K4u)
    return DiscreteJacobians(A=A, B=B)


def clamp_control(model: ModelSpec, u: Control) -> Control:
    """Project controls onto the box [control_lower, control_upper]."""
    return np.clip(np.asarray(u, dtype=float), model.control_lower, model.control_upper)


def rollout(model: ModelSpec, x0: State, us: np.ndarray) -> np.ndarray:
    """Integrate an open-loop control sequence.

    Args:
        model: Model description.
        x0: Initial state, shape (state_dim,).
        us: Control sequence, shape (T, control_dim).

    Returns:
        States including x0, shape (T + 1, state_dim).
    """
    us = np.asarray(us, dtype=float)
    xs = np.empty((us.shape[0] + 1, model.state_dim))
    xs[0] = np.asarray(x0, dtype=float)
    for t in range(us.shape[0]):
        xs[t + 1] = step_rk4(model, xs[t], us[t])
    return xs
