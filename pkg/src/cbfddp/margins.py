"""Safety and target margins over vehicle states.

The failure margin g(x) is positive exactly on the safe set. It is the
pointwise minimum of per-piece margins:

* obstacle discs: distance from the footprint edge to the disc edge,
* road bounds:    lateral room left between footprint and road edge,
* yaw bounds:     heading room left before the yaw limit.

The target margin l(x) is positive exactly on the target set. Two target
styles exist: a goal disc in position space, and a braking target where l is
the worst failure margin along a braking rollout (positive iff the vehicle
can come to a stop without ever leaving the safe set).

Margins are evaluated with value, gradient, and Hessian of the active piece
so trajectory optimisers can build local quadratic models. The braking target
has no closed form, so its quadratics come from central finite differences of
the scalar rollout minimum. An optional log-sum-exp smoothing of the piece
minimum is available; it lower-bounds the hard minimum, so it is conservative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import BICYCLE, DUBINS, ModelSpec, State, step_rk4
from .errors import ConfigError

# Step used for the finite-difference quadratics of the braking margin.
FD_STEP = 1e-4
# Speeds below this are treated as stopped in braking rollouts.
HALT_SPEED = 1e-9


@dataclass(frozen=True)
class Environment:
    """Static world description plus margin shaping knobs.

    Attributes:
        obstacles: Array of shape (K, 3); each row is (center_x, center_y,
            radius). May be empty.
        road_half_width: Half width of the drivable corridor around y = 0, or
            None for an unbounded road.
        yaw_bound: Symmetric bound on |yaw|, or None for no yaw constraint.
        goal: Target disc (center_x, center_y, radius) for reach problems, or
            None.
        stop_target: If True the target set is "can brake to a stop while
            staying safe". Mutually exclusive with goal.
        obstacle_scale: Multiplier applied to obstacle piece margins.
        road_scale: Multiplier applied to the road piece margin.
        yaw_scale: Multiplier applied to the yaw piece margin.
        soft_margin: Use a log-sum-exp smoothed minimum over pieces.
        soft_sharpness: Sharpness of the smoothed minimum (larger is closer
            to the hard minimum).
        stop_steer_gain: Proportional gain steering the wheels straight during
            braking rollouts.
        stop_max_steps: Hard cap on braking rollout length.
    """

    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    road_half_width: float | None = None
    yaw_bound: float | None = None
    goal: np.ndarray | None = None
    stop_target: bool = False
    obstacle_scale: float = 1.0
    road_scale: float = 1.0
    yaw_scale: float = 1.0
    soft_margin: bool = False
    soft_sharpness: float = 10.0
    stop_steer_gain: float = 2.0
    stop_max_steps: int = 200

    def __post_init__(self) -> None:
        obstacles = np.asarray(self.obstacles, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "obstacles", obstacles)
        if obstacles.shape[0] and np.any(obstacles[:, 2] <= 0.0):
            raise ConfigError("obstacle radii must be positive")
        if self.goal is not None:
            goal = np.asarray(self.goal, dtype=float).reshape(3)
            object.__setattr__(self, "goal", goal)
            if goal[2] <= 0.0:
                raise ConfigError("goal radius must be positive")
        if self.goal is not None and self.stop_target:
            raise ConfigError("goal and stop_target are mutually exclusive")
        if self.road_half_width is not None and self.road_half_width <= 0.0:
            raise ConfigError("road_half_width must be positive")
        if self.yaw_bound is not None and self.yaw_bound <= 0.0:
            raise ConfigError("yaw_bound must be positive")
        for name in ("obstacle_scale", "road_scale", "yaw_scale", "soft_sharpness"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.stop_max_steps < 1:
            raise ConfigError("stop_max_steps must be at least 1")
        if self.piece_count() == 0:
            raise ConfigError("environment defines no failure margin pieces")

    def piece_count(self) -> int:
        count = self.obstacles.shape[0]
        count += self.road_half_width is not None
        count += self.yaw_bound is not None
        return count

    def piece_labels(self) -> list[str]:
        labels = [f"obstacle_{k}" for k in range(self.obstacles.shape[0])]
        if self.road_half_width is not None:
            labels.append("road")
        if self.yaw_bound is not None:
            labels.append("yaw")
        return labels

    def has_target(self) -> bool:
        return self.goal is not None or self.stop_target


@dataclass(frozen=True)
class MarginEval:
    """Margin value with local quadratic model.

    Attributes:
        value: Margin value, positive inside the described set.
        active_index: Index of the piece attaining the minimum (for target
            margins of braking style, the piece active at the worst rollout
            step).
        grad: Gradient w.r.t. the state, or None if not requested.
        hess: Hessian w.r.t. the state, or None if not requested.
        degenerate: True when the state sits on a disc center, where the
            distance gradient is undefined and returned as zero.
    """

    value: float
    active_index: int
    grad: np.ndarray | None = None
    hess: np.ndarray | None = None
    degenerate: bool = False


def _yaw_index(model: ModelSpec) -> int:
    return 2 if model.name == DUBINS else 3


def piece_values(model: ModelSpec, env: Environment, xs: State) -> np.ndarray:
    """Raw per-piece failure margins, shape (..., piece_count)."""
    xs = np.asarray(xs, dtype=float)
    cols = []
    if env.obstacles.shape[0]:
        delta = xs[..., None, :2] - env.obstacles[:, :2]
        dist = np.sqrt(np.sum(delta * delta, axis=-1))
        reach = env.obstacles[:, 2] + model.footprint_radius
        cols.append(env.obstacle_scale * (dist - reach))
    if env.road_half_width is not None:
        room = env.road_half_width - model.footprint_radius - np.abs(xs[..., 1])
        cols.append(env.road_scale * room[..., None])
    if env.yaw_bound is not None:
        room = env.yaw_bound - np.abs(xs[..., _yaw_index(model)])
        cols.append(env.yaw_scale * room[..., None])
    return np.concatenate(cols, axis=-1)


def _combine(env: Environment, values: np.ndarray) -> np.ndarray:
    """Hard or smoothed minimum over the piece axis."""
    if not env.soft_margin:
        return np.min(values, axis=-1)
    k = env.soft_sharpness
    low = np.min(values, axis=-1, keepdims=True)
    # Shifted log-sum-exp, exact up to rounding and safe against overflow.
    return low[..., 0] - np.log(np.sum(np.exp(-k * (values - low)), axis=-1)) / k


def failure_values(
    model: ModelSpec, env: Environment, xs: State
) -> tuple[np.ndarray, np.ndarray]:
    """Batched failure margins.

    Returns:
        (values, active_indices), each of the batch shape of xs.
    """
    values = piece_values(model, env, xs)
    return _combine(env, values), np.argmin(values, axis=-1)


def _piece_quadratics(
    model: ModelSpec, env: Environment, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Values, gradients, Hessians, and degeneracy flags of every piece."""
    n = model.state_dim
    count = env.piece_count()
    values = np.empty(count)
    grads = np.zeros((count, n))
    hesses = np.zeros((count, n, n))
    degenerate = np.zeros(count, dtype=bool)
    i = 0
    for k in range(env.obstacles.shape[0]):
        center = env.obstacles[k, :2]
        reach = env.obstacles[k, 2] + model.footprint_radius
        delta = x[:2] - center
        dist = float(np.hypot(delta[0], delta[1]))
        values[i] = env.obstacle_scale * (dist - reach)
        if dist < 1e-9:
            degenerate[i] = True
        else:
            unit = delta / dist
            grads[i, :2] = env.obstacle_scale * unit
            hesses[i, :2, :2] = (
                env.obstacle_scale * (np.eye(2) - np.outer(unit, unit)) / dist
            )
        i += 1
    if env.road_half_width is not None:
        room = env.road_half_width - model.footprint_radius - abs(x[1])
        values[i] = env.road_scale * room
        grads[i, 1] = -env.road_scale * np.sign(x[1])
        i += 1
    if env.yaw_bound is not None:
        j = _yaw_index(model)
        values[i] = env.yaw_scale * (env.yaw_bound - abs(x[j]))
        grads[i, j] = -env.yaw_scale * np.sign(x[j])
        i += 1
    return values, grads, hesses, degenerate


def failure_margin(
    model: ModelSpec, env: Environment, x: State, order: int = 2
) -> MarginEval:
    """Failure margin g(x) with optional quadratic model.

    Args:
        model: Vehicle model (supplies footprint and yaw index).
        env: World description.
        x: Single state, shape (state_dim,).
        order: 0 for value only, 1 to add the gradient, 2 to add the Hessian.

    Returns:
        MarginEval for g at x.
    """
    x = np.asarray(x, dtype=float)
    values, grads, hesses, degenerate = _piece_quadratics(model, env, x)
    active = int(np.argmin(values))
    if not env.soft_margin:
        return MarginEval(
            value=float(values[active]),
            active_index=active,
            grad=grads[active].copy() if order >= 1 else None,
            hess=hesses[active].copy() if order >= 2 else None,
            degenerate=bool(degenerate[active]),
        )
    k = env.soft_sharpness
    shifted = np.exp(-k * (values - values[active]))
    weights = shifted / np.sum(shifted)
    value = values[active] - np.log(np.sum(shifted)) / k
    grad = hess = None
    if order >= 1:
        grad = weights @ grads
    if order >= 2:
        mean_outer = np.einsum("p,pi,pj->ij", weights, grads, grads)
        hess = np.einsum("p,pij->ij", weights, hesses)
        hess = hess - k * (mean_outer - np.outer(grad, grad))
    return MarginEval(
        value=float(value),
        active_index=active,
        grad=grad,
        hess=hess,
        degenerate=bool(np.any(degenerate & (weights > 1e-12))),
    )


def _require_speed_state(model: ModelSpec) -> None:
    if model.name != BICYCLE:
        raise ConfigError("braking target needs a model with a speed state")


def stopping_rollout(model: ModelSpec, env: Environment, x: State) -> np.ndarray:
    """States visited while braking to a stop from x.

    The braking policy applies maximum deceleration toward zero speed and
    steers the wheels straight with a proportional rate command. Speed is
    clamped to zero when it crosses, and the rollout halts there (the vehicle
    no longer moves, so later states add nothing to a margin minimum).

    Returns:
        Array of shape (steps + 1, state_dim) starting at x.
    """
    _require_speed_state(model)
    x = np.asarray(x, dtype=float).copy()
    states = [x.copy()]
    accel_cap = float(model.control_upper[0])
    for _ in range(env.stop_max_steps):
        if abs(x[2]) <= HALT_SPEED:
            break
        sign_before = np.sign(x[2])
        u = np.array(
            [
                -accel_cap * sign_before,
                np.clip(
                    -env.stop_steer_gain * x[4],
                    model.control_lower[1],
                    model.control_upper[1],
                ),
            ]
        )
        x = step_rk4(model, x, u)
        if x[2] * sign_before <= 0.0:
            x[2] = 0.0
        states.append(x.copy())
    return np.asarray(states)


def braking_margin_values(
    model: ModelSpec, env: Environment, xs: State
) -> np.ndarray:
    """Batched braking target margins: worst g along each braking rollout.

    Args:
        xs: States, shape (..., state_dim).

    Returns:
        Array of the batch shape with min_t g(rollout_t) per state.
    """
    _require_speed_state(model)
    x = np.asarray(xs, dtype=float).reshape(-1, model.state_dim).copy()
    best, _ = failure_values(model, env, x)
    accel_cap = float(model.control_upper[0])
    active = np.abs(x[:, 2]) > HALT_SPEED
    for _ in range(env.stop_max_steps):
        if not active.any():
            break
        sign_before = np.sign(x[:, 2])
        us = np.zeros((x.shape[0], 2))
        us[:, 0] = -accel_cap * sign_before
        us[:, 1] = np.clip(
            -env.stop_steer_gain * x[:, 4],
            model.control_lower[1],
            model.control_upper[1],
        )
        stepped = step_rk4(model, x, us)
        crossed = stepped[:, 2] * sign_before <= 0.0
        stepped[crossed, 2] = 0.0
        x = np.where(active[:, None], stepped, x)
        values, _ = failure_values(model, env, x)
        best = np.where(active, np.minimum(best, values), best)
        active = active & (np.abs(x[:, 2]) > HALT_SPEED)
    return best.reshape(np.asarray(xs, dtype=float).shape[:-1])


def target_values(model: ModelSpec, env: Environment, xs: State) -> np.ndarray:
    """Batched target margins (goal disc or braking style)."""
    xs = np.asarray(xs, dtype=float)
    if env.goal is not None:
        delta = xs[..., :2] - env.goal[:2]
        return env.goal[2] - np.sqrt(np.sum(delta * delta, axis=-1))
    if env.stop_target:
        return braking_margin_values(model, env, xs)
    raise ConfigError("environment defines no target set")


def _fd_points(x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference stencil around x: the point itself, axis pairs, and
    the four diagonal combinations per axis pair. Shape (stencil_size, n)."""
    n = x.size
    points = [x]
    for i in range(n):
        for s in (h, -h):
            p = x.copy()
            p[i] += s
            points.append(p)
    for i in range(n):
        for j in range(i + 1, n):
            for si, sj in ((h, h), (h, -h), (-h, h), (-h, -h)):
                p = x.copy()
                p[i] += si
                p[j] += sj
                points.append(p)
    return np.asarray(points)


def _fd_unpack(vals: np.ndarray, n: int, h: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Assemble value, gradient, Hessian from stencil evaluations."""
    f0 = float(vals[0])
    grad = np.empty(n)
    hess = np.empty((n, n))
    for i in range(n):
        fp, fm = vals[1 + 2 * i], vals[2 + 2 * i]
        grad[i] = (fp - fm) / (2.0 * h)
        hess[i, i] = (fp - 2.0 * f0 + fm) / (h * h)
    base = 1 + 2 * n
    idx = 0
    for i in range(n):
        for j in range(i + 1, n):
            fpp, fpm, fmp, fmm = vals[base + 4 * idx : base + 4 * idx + 4]
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h * h)
            idx += 1
    return f0, grad, hess


def _fd_quadratic(
    f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient, Hessian of a scalar map by central differences.

    f must accept a stacked batch (B, n) and return (B,); all perturbed
    points are evaluated in a single call.
    """
    return _fd_unpack(f(_fd_points(x, h)), x.size, h)


def braking_margin_quadratics(
    model: ModelSpec, env: Environment, xs: State
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Finite-difference quadratics of the braking margin at many states.

    All stencil points of all states are pushed through a single batched
    rollout, which is what keeps per-cycle solver times low.

    Args:
        xs: States, shape (S, state_dim).

    Returns:
        (values (S,), grads (S, n), hesses (S, n, n)).
    """
    xs = np.asarray(xs, dtype=float)
    count, n = xs.shape
    stencils = np.stack([_fd_points(xs[s].copy(), FD_STEP) for s in range(count)])
    flat = braking_margin_values(model, env, stencils.reshape(-1, n))
    per_state = flat.reshape(count, -1)
    values = np.empty(count)
    grads = np.empty((count, n))
    hesses = np.empty((count, n, n))
    for s in range(count):
        values[s], grads[s], hesses[s] = _fd_unpack(per_state[s], n, FD_STEP)
    return values, grads, hesses


def target_margin(
    model: ModelSpec, env: Environment, x: State, order: int = 2
) -> MarginEval:
    """Target margin l(x) with optional quadratic model.

    Goal-disc targets are differentiated in closed form. Braking targets are
    differentiated through the whole rollout minimum with central finite
    differences of step FD_STEP.
    """
    x = np.asarray(x, dtype=float)
    if env.goal is not None:
        delta = x[:2] - env.goal[:2]
        dist = float(np.hypot(delta[0], delta[1]))
        value = float(env.goal[2] - dist)
        if dist < 1e-9:
            return MarginEval(
                value=value,
                active_index=0,
                grad=np.zeros(model.state_dim) if order >= 1 else None,
                hess=np.zeros((model.state_dim,) * 2) if order >= 2 else None,
                degenerate=True,
            )
        grad = hess = None
        if order >= 1:
            grad = np.zeros(model.state_dim)
            grad[:2] = -delta / dist
        if order >= 2:
            unit = delta / dist
            hess = np.zeros((model.state_dim,) * 2)
            hess[:2, :2] = -(np.eye(2) - np.outer(unit, unit)) / dist
        return MarginEval(value=value, active_index=0, grad=grad, hess=hess)
    if not env.stop_target:
        raise ConfigError("environment defines no target set")
    states = stopping_rollout(model, env, x)
    values, actives = failure_values(model, env, states)
    worst = int(np.argmin(values))
    if order == 0:
        return MarginEval(value=float(values[worst]), active_index=int(actives[worst]))
    value, grad, hess = _fd_quadratic(
        lambda pts: braking_margin_values(model, env, pts), x.copy(), FD_STEP
    )
    if order == 1:
        hess = None
    return MarginEval(
        value=float(values[worst]),
        active_index=int(actives[worst]),
        grad=grad,
        hess=hess,
    )
