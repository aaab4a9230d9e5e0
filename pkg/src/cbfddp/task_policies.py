"""Performance-oriented driving policies that the safety filters modify.

Two deliberately naive controllers: a turn-toward-the-goal law for the
turn-rate car and a cruise-plus-pure-pursuit law for the kinematic bicycle.
Both are pure functions of the state and are clamped to the control box, so
they can be handed to a filter or run open loop as a baseline.

The bicycle steering law has a switch: once the heading error to the
look-ahead point drops inside a deadband, the policy stops pursuing and
instead drives the steering angle back to zero. The switch makes the law
discontinuous at the deadband boundary by design; it is what creates the
corner-cutting behaviour the filters must clean up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import BICYCLE, DUBINS, Control, ModelSpec, State, clamp_control
from .errors import ConfigError

__all__ = [
    "TaskPolicyConfig",
    "bicycle_task",
    "dubins_task",
    "task_policy",
    "wrap_angle",
]


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:  # remainder returns [-pi, pi]; fold the low end
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class TaskPolicyConfig:
    """Gains and geometry for the task policies.

    Attributes:
        goal_point: Point the turn-rate car steers toward (meters).
        lookahead_distance: How far ahead of the bicycle the pursuit point
            sits (meters).
        reference_speed: Cruise speed held by the bicycle's speed loop (m/s).
        speed_feedback_gain: Proportional speed-error gain (1/s).
        steering_feedback_gain: Proportional heading/steering-error gain (1/s).
        road_center_y: Lateral position of the pursuit line (meters).
        heading_deadband: Heading-error magnitude below which the bicycle
            switches from pursuit to straightening the wheels (radians).
    """

    goal_point: np.ndarray = field(default_factory=lambda: np.array([4.0, 0.0]))
    lookahead_distance: float = 0.8
    reference_speed: float = 0.9
    speed_feedback_gain: float = 2.0
    steering_feedback_gain: float = 3.0
    road_center_y: float = 0.0
    heading_deadband: float = 0.1

    def __post_init__(self) -> None:
        goal = np.asarray(self.goal_point, dtype=float).reshape(2)
        object.__setattr__(self, "goal_point", goal)
        if not np.all(np.isfinite(goal)):
            raise ConfigError("goal_point must be finite")
        if self.lookahead_distance <= 0.0:
            raise ConfigError("lookahead_distance must be positive")
        if self.reference_speed <= 0.0:
            raise ConfigError("reference_speed must be positive")
        if self.speed_feedback_gain <= 0.0 or self.steering_feedback_gain <= 0.0:
            raise ConfigError("feedback gains must be positive")
        if self.heading_deadband < 0.0:
            raise ConfigError("heading_deadband must be nonnegative")


def dubins_task(state: State, config: TaskPolicyConfig, model: ModelSpec) -> Control:
    """Turn-rate command steering the car to face the goal point.

    Proportional in the wrapped bearing error; exactly at the goal the
    bearing is undefined and the command is zero.
    """
    x = np.asarray(state, dtype=float)
    dx = config.goal_point[0] - x[0]
    dy = config.goal_point[1] - x[1]
    if dx == 0.0 and dy == 0.0:
        return np.zeros(1)
    error = wrap_angle(math.atan2(dy, dx) - x[2])
    u = np.array([config.steering_feedback_gain * error])
    return clamp_control(model, u)


def bicycle_task(state: State, config: TaskPolicyConfig, model: ModelSpec) -> Control:
    """Cruise-speed and pursuit-steering command for the kinematic bicycle.

    Acceleration is proportional speed feedback toward the reference speed.
    Steering rate pursues a look-ahead point on the road center line; inside
    the heading deadband it straightens the wheels instead.
    """
    x = np.asarray(state, dtype=float)
    accel = config.speed_feedback_gain * (config.reference_speed - x[2])
    target_x = x[0] + config.lookahead_distance
    target_y = config.road_center_y
    heading_error = wrap_angle(math.atan2(target_y - x[1], target_x - x[0]) - x[3])
    if abs(heading_error) < config.heading_deadband:
        steer_rate = -config.steering_feedback_gain * x[4]
    else:
        # pure pursuit: curvature 2 sin(e) / d, converted to a wheel angle
        desired = math.atan2(
            2.0 * model.wheelbase * math.sin(heading_error),
            config.lookahead_distance,
        )
        steer_rate = config.steering_feedback_gain * (desired - x[4])
    return clamp_control(model, np.array([accel, steer_rate]))


def task_policy(model: ModelSpec, config: TaskPolicyConfig):
    """Bind the model-appropriate policy into a state -> control callable."""
    if model.name == DUBINS:
        return lambda state: dubins_task(state, config, model)
    if model.name == BICYCLE:
        return lambda state: bicycle_task(state, config, model)
    raise ConfigError(f"no task policy for model {model.name!r}")
