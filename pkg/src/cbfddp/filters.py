"""Minimum-deviation safety filtering built on the reach-avoid solver.

Three filters produce the same FilterDecision record:

- `cbf_ddp_step` treats the solver's value function as an implicit control
  barrier. Each cycle it values the current state, values the state the task
  control would reach, and, while the candidate value decays faster than
  gamma per step, nudges the control by the minimum-norm correction of the
  quadratic value model. If the repaired candidate still lands outside the
  safe set it executes the stored fallback policy instead.
- `lr_ddp_step` is the least-restrictive baseline: apply the task control
  unless the resulting state's value is negative, else apply the solver's
  own first control.
- `manual_cbf_step` is a handcrafted distance barrier around a single
  obstacle for the turn-rate car, enforced with the linear one-step program.

A `FallbackStore` keeps the time-indexed affine policy of the last accepted
solve; entries switch to the target policy at the first planned state inside
the target set and the store rotates forward one entry each time it is
executed.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass

import numpy as np

from .barrier_qcqp import (
    INFEASIBLE,
    SATISFIED_AT_ZERO,
    build_constraint,
    solve_linear_qp,
    solve_qcqp,
)
from .dynamics import (
    DUBINS,
    Control,
    ModelSpec,
    State,
    clamp_control,
    jacobians,
    step_rk4,
)
from .errors import ConfigError
from .margins import Environment, target_margin, target_values
from .reach_avoid_ilq import (
    AVOID_ONLY,
    REACH_AVOID,
    IlqSolution,
    SolverConfig,
    solve,
)
from .task_policies import wrap_angle

__all__ = [
    "CBF_DDP",
    "LR_DDP",
    "MANUAL_CBF",
    "NO_FILTER",
    "MODE_TASK",
    "MODE_FILTERED",
    "MODE_FALLBACK",
    "AffineEntry",
    "FallbackStore",
    "FilterConfig",
    "FilterDecision",
    "FilterStores",
    "braking_policy",
    "build_fallback",
    "cbf_ddp_step",
    "fallback_control",
    "filter_step",
    "lr_ddp_step",
    "manual_cbf_step",
    "rotate_store",
]

CBF_DDP = "cbf_ddp"
LR_DDP = "lr_ddp"
MANUAL_CBF = "manual_cbf"
NO_FILTER = "none"
_FILTER_MODES = (CBF_DDP, LR_DDP, MANUAL_CBF, NO_FILTER)

MODE_TASK = "task"
MODE_FILTERED = "filtered"
MODE_FALLBACK = "fallback"

TARGET_ENTRY = "target_policy"


@dataclass(frozen=True)
class FilterConfig:
    """Filter selection and barrier tuning.

    Attributes:
        mode: One of cbf_ddp, lr_ddp, manual_cbf, none.
        gamma: Per-step value decay floor, in (0, 1).
        lambda_scale: Over-scaling of the constraint offset between repair
            attempts, at least 1.
        max_qcqp_iterations: Repair attempts per cycle before giving up.
        manual_buffer: Extra clearance added to the handcrafted barrier's
            radius (meters).
    """

    mode: str = CBF_DDP
    gamma: float = 0.95
    lambda_scale: float = 1.25
    max_qcqp_iterations: int = 5
    manual_buffer: float = 0.2

    def __post_init__(self) -> None:
        if self.mode not in _FILTER_MODES:
            raise ConfigError(f"unknown filter mode {self.mode!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.lambda_scale < 1.0:
            raise ConfigError("lambda_scale must be at least 1")
        if self.max_qcqp_iterations < 1:
            raise ConfigError("max_qcqp_iterations must be at least 1")
        if self.manual_buffer < 0.0:
            raise ConfigError("manual_buffer must be nonnegative")


@dataclass(frozen=True)
class AffineEntry:
    """One stored step of the fallback policy: u + K (x - anchor) + k."""

    control: np.ndarray
    gains: np.ndarray
    feedforward: np.ndarray
    anchor_state: np.ndarray


@dataclass(frozen=True)
class FallbackStore:
    """Time-indexed fallback policy from the last accepted solve."""

    entries: tuple
    target_policy: object
    model: ModelSpec

    def __post_init__(self) -> None:
        if not self.entries:
            raise ConfigError("fallback store needs at least one entry")
        seen_target = False
        for entry in self.entries:
            if entry == TARGET_ENTRY:
                seen_target = True
            elif seen_target:
                raise ConfigError("affine entry after a target_policy entry")
            elif not isinstance(entry, AffineEntry):
                raise ConfigError("entries must be AffineEntry or target_policy")


@dataclass(frozen=True)
class FilterDecision:
    """What a filter did on one control cycle.

    v_current / v_next hold the safety values of the current state and the
    candidate next state (for the manual barrier, the barrier values). For
    the least-restrictive filter v_current is only evaluated on override
    cycles and is NaN otherwise.
    """

    u_exec: np.ndarray
    mode_applied: str
    v_current: float
    v_next: float
    qcqp_iterations_used: int
    delta_u_norm: float
    cycle_time: float


@dataclass
class FilterStores:
    """Mutable cross-cycle state owned by one filter instance.

    plan_controls seeds the next cycle's solve with the previously accepted
    control sequence; fallback is the stored safety policy (reach-avoid
    runs only).
    """

    fallback: FallbackStore | None = None
    plan_controls: np.ndarray | None = None


def braking_policy(model: ModelSpec, env: Environment):
    """Stop-then-hold target policy: brake to rest, steer the wheels straight.

    The deceleration command is sized so the final step lands exactly on
    v = 0 instead of overshooting; resting states are fixed points, so the
    policy also serves as the hold phase.
    """

    def policy(state: State) -> Control:
        x = np.asarray(state, dtype=float)
        accel = -math.copysign(
            min(model.control_upper[0], abs(x[2]) / model.dt), x[2]
        )
        steer = -env.stop_steer_gain * x[4]
        return clamp_control(model, np.array([accel, steer]))

    return policy


def build_fallback(
    ilq: IlqSolution, env: Environment, model: ModelSpec, target_policy
) -> FallbackStore:
    """Freeze an accepted solve into a fallback policy.

    Affine entries replay the solve with its feedback gains; from the first
    planned state inside the target set onward the entries defer to the
    target policy.
    """
    horizon = ilq.nominal_controls.shape[0]
    ell = target_values(model, env, ilq.nominal_states[:horizon])
    entries: list = []
    for t in range(horizon):
        if ell[t] >= 0.0:
            entries.extend([TARGET_ENTRY] * (horizon - t))
            break
        entries.append(
            AffineEntry(
                control=ilq.nominal_controls[t].copy(),
                gains=ilq.feedback_gains[t].copy(),
                feedforward=ilq.feedforward_gains[t].copy(),
                anchor_state=ilq.nominal_states[t].copy(),
            )
        )
    return FallbackStore(
        entries=tuple(entries), target_policy=target_policy, model=model
    )


def fallback_control(store: FallbackStore, state: State, index: int) -> Control:
    """Evaluate the stored policy at one step, clamped to the control box."""
    if not 0 <= index < len(store.entries):
        raise ConfigError(f"fallback index {index} outside the store")
    entry = store.entries[index]
    x = np.asarray(state, dtype=float)
    if entry == TARGET_ENTRY:
        u = store.target_policy(x)
    else:
        u = entry.control + entry.gains @ (x - entry.anchor_state) + entry.feedforward
    return clamp_control(store.model, u)


def rotate_store(store: FallbackStore) -> FallbackStore:
    """Shift every entry forward one step, repeating the final entry."""
    entries = store.entries[1:] + (store.entries[-1],)
    return FallbackStore(
        entries=entries, target_policy=store.target_policy, model=store.model
    )


def _shift_left(controls: np.ndarray) -> np.ndarray:
    return np.vstack([controls[1:], controls[-1:]])


def _rescue_seeds(
    model: ModelSpec, horizon: int, mode: str
) -> list[np.ndarray]:
    if mode == AVOID_ONLY:
        # straight ahead plus both constant extremes of the steering channel
        seeds = [np.zeros((horizon, model.control_dim))]
        for bound in (model.control_upper[-1], model.control_lower[-1]):
            seed = np.zeros((horizon, model.control_dim))
            seed[:, -1] = bound
            seeds.append(seed)
        return seeds
    # reach-avoid: brake and hold, the plan whose value the braking target
    # certifies directly
    seed = np.zeros((horizon, model.control_dim))
    seed[:, 0] = model.control_lower[0]
    return [seed]


def _solve_rescued(
    model: ModelSpec,
    env: Environment,
    config: SolverConfig,
    x: np.ndarray,
    warm: np.ndarray | None,
) -> IlqSolution:
    """Solve, retrying negative values from canonical seeds.

    A warm start inherited from a discarded correction can trap the solver
    in a basin that grossly under-reports what safe plans achieve, for
    example a hard-turn plan that runs off the road while straightening out
    would clear everything. When the warm-started value comes back negative
    the solve is repeated from constant seed plans and the best-valued
    solution wins: straight and extreme-steer arcs for avoid-only margins,
    brake-and-hold for reach-avoid ones (near rest its value matches the
    braking target, so safely stoppable states are never misreported as
    lost).
    """
    sol = solve(model, env, config, x, warm_start=warm)
    if sol.root_value.value >= 0.0:
        return sol
    for seed in _rescue_seeds(model, config.horizon, config.mode):
        candidate = solve(model, env, config, x, warm_start=seed)
        if candidate.root_value.value > sol.root_value.value:
            sol = candidate
    return sol


def cbf_ddp_step(
    state: State,
    task_control: Control,
    stores: FilterStores,
    env: Environment,
    model: ModelSpec,
    filter_config: FilterConfig,
    solver_config: SolverConfig,
) -> FilterDecision:
    """One barrier-filtered control cycle.

    Values the current state and the candidate next state, repairs the task
    control with minimum-norm corrections while the candidate value decays
    faster than gamma per step, and executes the fallback policy if the
    final candidate value is negative.
    """
    start = time.perf_counter()
    x = np.asarray(state, dtype=float)
    u_task = clamp_control(model, np.asarray(task_control, dtype=float))

    sol_current = _solve_rescued(
        model, env, solver_config, x, stores.plan_controls
    )
    v_current = sol_current.root_value.value
    u_p = u_task.copy()
    x1 = step_rk4(model, x, u_p)
    sol_next = _solve_rescued(
        model, env, solver_config, x1, _shift_left(sol_current.nominal_controls)
    )
    v_next = sol_next.root_value.value

    gamma = filter_config.gamma
    iterations = 0
    while v_next < gamma * v_current and iterations < filter_config.max_qcqp_iterations:
        # the sensitivity of the candidate state to the control we are repairing
        fu = jacobians(model, x, u_p).B
        params = build_constraint(
            sol_next.root_value, fu, v_current, gamma, filter_config.lambda_scale
        )
        if iterations > 0:
            # retries over-tighten the offset to accelerate feasibility
            params = dataclasses.replace(params, c=filter_config.lambda_scale * params.c)
        correction = solve_qcqp(params, u_p, model)
        iterations += 1
        if correction.status == INFEASIBLE or not np.any(correction.delta_u):
            # The local quadratic model sees no feasible correction, so jump
            # to a control whose feasibility does not rest on that model and
            # rebuild around it. Which control that is depends on where the
            # value comes from. When the braking margin already covers the
            # decay floor (gamma V <= l), one braking step keeps l from
            # shrinking, so the head of the braking policy is feasible; this
            # also covers converged-at-arrival solves whose planned controls
            # are meaningless. Otherwise the value rests on the continuation
            # plan, and by the receding-horizon argument its first control
            # carries that value across the step.
            anchor = None
            if solver_config.mode == REACH_AVOID:
                ell_now = target_margin(model, env, x, order=0).value
                if gamma * v_current <= ell_now:
                    anchor = braking_policy(model, env)(x)
            if anchor is None:
                anchor = clamp_control(model, sol_current.nominal_controls[0])
            if np.allclose(anchor, u_p, atol=1e-12):
                break
            u_p = anchor
            warm = _shift_left(sol_current.nominal_controls)
        else:
            u_p = clamp_control(model, u_p + correction.delta_u)
            warm = sol_next.nominal_controls
        x1 = step_rk4(model, x, u_p)
        sol_next = _solve_rescued(model, env, solver_config, x1, warm)
        v_next = sol_next.root_value.value

    deviation = u_p - u_task
    if v_next < 0.0:
        if stores.fallback is not None:
            u_exec = fallback_control(stores.fallback, x, 0)
            stores.fallback = rotate_store(stores.fallback)
        else:
            u_exec = clamp_control(model, sol_current.nominal_controls[0])
        mode = MODE_FALLBACK
        stores.plan_controls = _shift_left(sol_current.nominal_controls)
    else:
        if solver_config.mode == REACH_AVOID:
            stores.fallback = build_fallback(
                sol_next, env, model, braking_policy(model, env)
            )
        u_exec = u_p
        mode = MODE_TASK if not np.any(deviation) else MODE_FILTERED
        stores.plan_controls = sol_next.nominal_controls
    return FilterDecision(
        u_exec=u_exec,
        mode_applied=mode,
        v_current=v_current,
        v_next=v_next,
        qcqp_iterations_used=iterations,
        delta_u_norm=float(np.linalg.norm(deviation)),
        cycle_time=time.perf_counter() - start,
    )


def lr_ddp_step(
    state: State,
    task_control: Control,
    env: Environment,
    model: ModelSpec,
    solver_config: SolverConfig,
    stores: FilterStores | None = None,
) -> FilterDecision:
    """Least-restrictive switching cycle.

    Applies the task control whenever the state it reaches still has a
    nonnegative value; otherwise applies the first control of a solve at the
    current state. `stores` only carries the warm start and may be omitted.
    """
    start = time.perf_counter()
    x = np.asarray(state, dtype=float)
    u_task = clamp_control(model, np.asarray(task_control, dtype=float))
    # the stored plan is kept aligned with the state the cycle starts from
    warm = stores.plan_controls if stores is not None else None

    x1 = step_rk4(model, x, u_task)
    check_warm = _shift_left(warm) if warm is not None else None
    sol_next = _solve_rescued(model, env, solver_config, x1, check_warm)
    v_next = sol_next.root_value.value
    if v_next >= 0.0:
        u_exec = u_task
        mode = MODE_TASK
        v_current = math.nan
        # sol_next certifies the state we are entering; keep its plan whole
        # so an override next cycle starts from a plan known to be safe
        plan = sol_next.nominal_controls
    else:
        sol_safe = _solve_rescued(model, env, solver_config, x, warm)
        v_current = sol_safe.root_value.value
        u_exec = clamp_control(model, sol_safe.nominal_controls[0])
        mode = MODE_FALLBACK
        plan = _shift_left(sol_safe.nominal_controls)
    if stores is not None:
        stores.plan_controls = plan
    return FilterDecision(
        u_exec=u_exec,
        mode_applied=mode,
        v_current=v_current,
        v_next=v_next,
        qcqp_iterations_used=0,
        delta_u_norm=float(np.linalg.norm(u_exec - u_task)),
        cycle_time=time.perf_counter() - start,
    )


def manual_cbf_step(
    state: State,
    task_control: Control,
    env: Environment,
    model: ModelSpec,
    filter_config: FilterConfig,
) -> FilterDecision:
    """Handcrafted one-obstacle barrier for the turn-rate car.

    B(x) = squared center distance minus the squared effective radius
    (obstacle + footprint + buffer). Enforces B(next) >= gamma B(current) by
    linearizing B after one step in the control; when even the box-extreme
    correction cannot satisfy the constraint, steers hard away from the
    obstacle. v_current / v_next report barrier values.
    """
    if model.name != DUBINS:
        raise ConfigError("manual barrier baseline only covers the turn-rate car")
    if env.obstacles.shape[0] != 1:
        raise ConfigError("manual barrier baseline expects exactly one obstacle")
    start = time.perf_counter()
    x = np.asarray(state, dtype=float)
    u_task = clamp_control(model, np.asarray(task_control, dtype=float))
    center = env.obstacles[0, :2]
    r_eff = env.obstacles[0, 2] + model.footprint_radius + filter_config.manual_buffer

    def barrier(xs: np.ndarray) -> float:
        d = xs[:2] - center
        return float(d @ d - r_eff * r_eff)

    b_current = barrier(x)
    x1 = step_rk4(model, x, u_task)
    c = barrier(x1) - filter_config.gamma * b_current
    b_grad = np.array([2.0 * (x1[0] - center[0]), 2.0 * (x1[1] - center[1]), 0.0])
    p = b_grad @ jacobians(model, x, u_task).B
    correction = solve_linear_qp(p, c, u_task, model)

    if correction.status == INFEASIBLE:
        # box-extreme turn away from the obstacle
        bearing = math.atan2(center[1] - x[1], center[0] - x[0])
        relative = wrap_angle(bearing - x[2])
        sign = 1.0 if relative <= 0.0 else -1.0
        u_exec = clamp_control(model, np.array([sign * model.control_upper[0]]))
        mode = MODE_FALLBACK
    else:
        u_exec = clamp_control(model, u_task + correction.delta_u)
        mode = MODE_TASK if not np.any(correction.delta_u) else MODE_FILTERED
    return FilterDecision(
        u_exec=u_exec,
        mode_applied=mode,
        v_current=b_current,
        v_next=barrier(step_rk4(model, x, u_exec)),
        qcqp_iterations_used=0 if correction.status == SATISFIED_AT_ZERO else 1,
        delta_u_norm=float(np.linalg.norm(u_exec - u_task)),
        cycle_time=time.perf_counter() - start,
    )


def filter_step(
    state: State,
    task_control: Control,
    stores: FilterStores,
    env: Environment,
    model: ModelSpec,
    filter_config: FilterConfig,
    solver_config: SolverConfig,
) -> FilterDecision:
    """Dispatch one cycle to the configured filter."""
    if filter_config.mode == CBF_DDP:
        return cbf_ddp_step(
            state, task_control, stores, env, model, filter_config, solver_config
        )
    if filter_config.mode == LR_DDP:
        return lr_ddp_step(
            state, task_control, env, model, solver_config, stores=stores
        )
    if filter_config.mode == MANUAL_CBF:
        return manual_cbf_step(state, task_control, env, model, filter_config)
    start = time.perf_counter()
    u_exec = clamp_control(model, np.asarray(task_control, dtype=float))
    return FilterDecision(
        u_exec=u_exec,
        mode_applied=MODE_TASK,
        v_current=math.nan,
        v_next=math.nan,
        qcqp_iterations_used=0,
        delta_u_norm=0.0,
        cycle_time=time.perf_counter() - start,
    )
