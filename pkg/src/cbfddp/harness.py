"""Scenario files, closed-loop simulation, run metrics, and artifact output.

A scenario is a strict JSON document: every section mirrors one of the
package's config dataclasses, keys carry explicit units in their names, and
unknown keys are rejected so a typo cannot silently fall back to a default.
Loaded scenarios are fully resolved (defaults filled in), and the resolved
form can be echoed back to disk for reproducibility.

``run_simulation`` closes the loop: task policy, safety filter, vehicle step,
one ``StepRecord`` per control cycle, until the success criterion is met, the
safety margin goes negative, or the step budget runs out. Runs are
deterministic; the only field that varies between repeats is the measured
``cycle_time``.

``compute_metrics`` is a pure function of the record list (plus the scenario
for the success criterion), so metrics recomputed from a written log match
the emitted ones exactly. Logs are comma-separated text with floats printed
at 17 significant digits, which round-trips IEEE doubles bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dynamics import (
    BICYCLE,
    DUBINS,
    ModelSpec,
    State,
    bicycle_model,
    dubins_model,
    step_rk4,
)
from .errors import CbfDdpError, ConfigError, SolverNumericError
from .filters import (
    CBF_DDP,
    LR_DDP,
    MANUAL_CBF,
    FilterConfig,
    FilterStores,
    filter_step,
)
from .margins import Environment, failure_margin, target_margin
from .reach_avoid_ilq import REACH_AVOID, SolverConfig
from .task_policies import TaskPolicyConfig, task_policy

__all__ = [
    "GOAL_DISC",
    "PROGRESS_X",
    "Metrics",
    "Scenario",
    "SimulationAborted",
    "StepRecord",
    "SuccessSpec",
    "compute_metrics",
    "final_state",
    "load_scenario",
    "read_metrics",
    "read_records",
    "run_simulation",
    "scenario_from_mapping",
    "scenario_to_mapping",
    "success_reached",
    "write_outputs",
]

GOAL_DISC = "goal_disc"
PROGRESS_X = "progress_x"

# Column labels per model family, in state-vector order.
_STATE_LABELS = {
    DUBINS: ("x_m", "y_m", "yaw_rad"),
    BICYCLE: ("x_m", "y_m", "speed_mps", "yaw_rad", "steer_rad"),
}
_CONTROL_LABELS = {
    DUBINS: ("turn_rate_radps",),
    BICYCLE: ("accel_mps2", "steer_rate_radps"),
}

STEP_LOG_NAME = "steps.csv"
METRICS_NAME = "metrics.json"
TRAJECTORY_NAME = "trajectory.csv"


class SimulationAborted(CbfDdpError):
    """A solver failed mid-run; the partial record list is attached.

    Attributes:
        records: Steps completed before the failure.
    """

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class SuccessSpec:
    """Task-success criterion for one scenario.

    Attributes:
        kind: ``goal_disc`` (enter a disc in position space) or
            ``progress_x`` (drive x beyond a threshold).
        center: Disc center (meters), goal_disc only.
        radius: Disc radius (meters), goal_disc only.
        threshold: x threshold (meters), progress_x only.
    """

    kind: str
    center: np.ndarray | None = None
    radius: float = 0.0
    threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == GOAL_DISC:
            if self.center is None:
                raise ConfigError("success.center_m is required for goal_disc")
            center = np.asarray(self.center, dtype=float).reshape(2)
            object.__setattr__(self, "center", center)
            if not np.all(np.isfinite(center)):
                raise ConfigError("success.center_m must be finite")
            if self.radius <= 0.0:
                raise ConfigError("success.radius_m must be positive")
        elif self.kind == PROGRESS_X:
            if self.center is not None:
                raise ConfigError("success.center_m is not a progress_x field")
            if not np.isfinite(self.threshold):
                raise ConfigError("success.threshold_m must be finite")
        else:
            raise ConfigError(f"unknown success kind {self.kind!r}")


def success_reached(success: SuccessSpec, state: State) -> bool:
    """Whether a state satisfies the success criterion."""
    x = np.asarray(state, dtype=float)
    if success.kind == GOAL_DISC:
        return bool(np.hypot(*(x[:2] - success.center)) <= success.radius)
    return bool(x[0] >= success.threshold)


@dataclass(frozen=True)
class Scenario:
    """One fully resolved closed-loop experiment.

    Attributes:
        name: Identifier used in output paths and tables.
        model: Vehicle model.
        env: World description (must define at least one margin piece).
        initial_state: Start state, shape (state_dim,).
        task: Task policy gains and geometry.
        filter: Safety filter selection and tuning.
        solver: Trajectory optimizer settings.
        max_steps: Control-cycle budget.
        success: Task-success criterion.
        rng_seed: Reserved; the current pipeline is deterministic.
    """

    name: str
    model: ModelSpec
    env: Environment
    initial_state: np.ndarray
    task: TaskPolicyConfig
    filter: FilterConfig
    solver: SolverConfig
    max_steps: int
    success: SuccessSpec
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("scenario name must be nonempty")
        state = np.asarray(self.initial_state, dtype=float).reshape(-1)
        object.__setattr__(self, "initial_state", state)
        if state.size != self.model.state_dim:
            raise ConfigError(
                f"initial_state has {state.size} components, model"
                f" {self.model.name!r} needs {self.model.state_dim}"
            )
        if not np.all(np.isfinite(state)):
            raise ConfigError("initial_state must be finite")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if (
            self.filter.mode in (CBF_DDP, LR_DDP)
            and self.solver.mode == REACH_AVOID
            and not self.env.has_target()
        ):
            raise ConfigError(
                f"filter mode {self.filter.mode!r} with a reach-avoid solver"
                " needs an environment with a target set"
            )
        if (
            self.filter.mode == CBF_DDP
            and self.solver.mode == REACH_AVOID
            and not self.env.stop_target
        ):
            # The fallback store's target-phase policy is stop-then-hold.
            raise ConfigError(
                "reach-avoid barrier filtering needs the braking target"
            )
        if self.filter.mode == MANUAL_CBF:
            if self.model.name != DUBINS:
                raise ConfigError("manual_cbf runs on the dubins model only")
            if self.env.obstacles.shape[0] != 1:
                raise ConfigError("manual_cbf needs exactly one obstacle")
        # Reach-avoid runs must start inside the target set.
        if self.env.has_target():
            ell0 = target_margin(self.model, self.env, state, order=0).value
            if ell0 < 0.0:
                raise ConfigError(
                    f"initial state outside target set (margin {ell0:.4f})"
                )


@dataclass(frozen=True)
class StepRecord:
    """Everything logged about one control cycle.

    ``state`` is the state the filter acted on; the successor state is
    recoverable by integrating ``u_exec`` one step, so the log fully
    determines the trajectory.
    """

    t: int
    state: np.ndarray
    u_task: np.ndarray
    u_exec: np.ndarray
    mode_applied: str
    v_current: float
    v_next: float
    qcqp_iterations_used: int
    g_value: float
    ell_value: float
    cycle_time: float


@dataclass(frozen=True)
class Metrics:
    """Run summary in the shape of the comparison table.

    Jerk is the first difference of the executed control divided by dt, per
    channel, over consecutive cycles; the turn-rate car has no acceleration
    channel, so its acceleration jerk is reported as zero. total_deviation
    sums the L1 distance between executed and task controls over the run.
    """

    task_success: bool
    accel_jerk_mean: float
    accel_jerk_std: float
    steer_jerk_mean: float
    steer_jerk_std: float
    total_deviation: float
    cycle_time_mean: float
    cycle_time_std: float
    steps_taken: int

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name in ("task_success", "steps_taken"):
                continue
            if not math.isfinite(getattr(self, f.name)):
                raise ConfigError(f"metric {f.name} is not finite")
        if self.total_deviation < 0.0:
            raise ConfigError("total_deviation must be nonnegative")


def _reject_unknown(section: str, data: dict, allowed: set[str]) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {section} field(s): {', '.join(unknown)}")


def _require(section: str, data: dict, key: str):
    if key not in data:
        raise ConfigError(f"missing required field {section}.{key}")
    return data[key]


def _model_from_mapping(data: dict) -> ModelSpec:
    if not isinstance(data, dict):
        raise ConfigError("model section must be an object")
    family = _require("model", data, "family")
    common = {"family", "dt_s", "footprint_radius_m"}
    if family == DUBINS:
        _reject_unknown(
            "model", data, common | {"speed_mps", "turn_rate_limit_radps"}
        )
        return dubins_model(
            speed=data.get("speed_mps", 0.7),
            turn_rate_limit=data.get("turn_rate_limit_radps", 1.0),
            dt=data.get("dt_s", 0.05),
            footprint_radius=data.get("footprint_radius_m", 0.15),
        )
    if family == BICYCLE:
        _reject_unknown(
            "model",
            data,
            common
            | {"wheelbase_m", "accel_limit_mps2", "steer_rate_limit_radps"},
        )
        return bicycle_model(
            wheelbase=data.get("wheelbase_m", 0.5),
            accel_limit=data.get("accel_limit_mps2", 0.5),
            steer_rate_limit=data.get("steer_rate_limit_radps", 0.8),
            dt=data.get("dt_s", 0.05),
            footprint_radius=data.get("footprint_radius_m", 0.1),
        )
    raise ConfigError(f"unknown model.family {family!r}")


def _env_from_mapping(data: dict) -> Environment:
    if not isinstance(data, dict):
        raise ConfigError("environment section must be an object")
    _reject_unknown(
        "environment",
        data,
        {
            "obstacles_xyr_m",
            "road_half_width_m",
            "yaw_bound_rad",
            "goal_xyr_m",
            "stop_target",
            "obstacle_scale",
            "road_scale",
            "yaw_scale",
            "soft_margin",
            "soft_sharpness",
            "stop_steer_gain_hz",
            "stop_max_steps",
        },
    )
    kwargs = {
        "obstacles": np.asarray(
            data.get("obstacles_xyr_m", []), dtype=float
        ).reshape(-1, 3),
        "road_half_width": data.get("road_half_width_m"),
        "yaw_bound": data.get("yaw_bound_rad"),
        "stop_target": data.get("stop_target", False),
    }
    if data.get("goal_xyr_m") is not None:
        kwargs["goal"] = np.asarray(data["goal_xyr_m"], dtype=float)
    for json_key, attr in (
        ("obstacle_scale", "obstacle_scale"),
        ("road_scale", "road_scale"),
        ("yaw_scale", "yaw_scale"),
        ("soft_margin", "soft_margin"),
        ("soft_sharpness", "soft_sharpness"),
        ("stop_steer_gain_hz", "stop_steer_gain"),
        ("stop_max_steps", "stop_max_steps"),
    ):
        if json_key in data:
            kwargs[attr] = data[json_key]
    return Environment(**kwargs)


def _task_from_mapping(data: dict) -> TaskPolicyConfig:
    if not isinstance(data, dict):
        raise ConfigError("task section must be an object")
    _reject_unknown(
        "task",
        data,
        {
            "goal_point_m",
            "lookahead_distance_m",
            "reference_speed_mps",
            "speed_feedback_gain_hz",
            "steering_feedback_gain_hz",
            "road_center_y_m",
            "heading_deadband_rad",
        },
    )
    defaults = TaskPolicyConfig()
    return TaskPolicyConfig(
        goal_point=np.asarray(
            data.get("goal_point_m", defaults.goal_point), dtype=float
        ),
        lookahead_distance=data.get(
            "lookahead_distance_m", defaults.lookahead_distance
        ),
        reference_speed=data.get("reference_speed_mps", defaults.reference_speed),
        speed_feedback_gain=data.get(
            "speed_feedback_gain_hz", defaults.speed_feedback_gain
        ),
        steering_feedback_gain=data.get(
            "steering_feedback_gain_hz", defaults.steering_feedback_gain
        ),
        road_center_y=data.get("road_center_y_m", defaults.road_center_y),
        heading_deadband=data.get(
            "heading_deadband_rad", defaults.heading_deadband
        ),
    )


def _filter_from_mapping(data: dict) -> FilterConfig:
    if not isinstance(data, dict):
        raise ConfigError("filter section must be an object")
    _reject_unknown(
        "filter",
        data,
        {"mode", "gamma", "lambda_scale", "max_qcqp_iterations", "manual_buffer_m"},
    )
    defaults = FilterConfig()
    return FilterConfig(
        mode=data.get("mode", defaults.mode),
        gamma=data.get("gamma", defaults.gamma),
        lambda_scale=data.get("lambda_scale", defaults.lambda_scale),
        max_qcqp_iterations=data.get(
            "max_qcqp_iterations", defaults.max_qcqp_iterations
        ),
        manual_buffer=data.get("manual_buffer_m", defaults.manual_buffer),
    )


def _solver_from_mapping(data: dict) -> SolverConfig:
    if not isinstance(data, dict):
        raise ConfigError("solver section must be an object")
    _reject_unknown(
        "solver",
        data,
        {
            "horizon_steps",
            "mode",
            "max_iterations",
            "convergence_tol",
            "line_search_alphas",
            "hess_regularization",
            "curvature_shift",
        },
    )
    kwargs = {"horizon": _require("solver", data, "horizon_steps")}
    for json_key, attr in (
        ("mode", "mode"),
        ("max_iterations", "max_iterations"),
        ("convergence_tol", "convergence_tol"),
        ("hess_regularization", "hess_regularization"),
        ("curvature_shift", "curvature_shift"),
    ):
        if json_key in data:
            kwargs[attr] = data[json_key]
    if "line_search_alphas" in data:
        kwargs["line_search_alphas"] = tuple(data["line_search_alphas"])
    return SolverConfig(**kwargs)


def _success_from_mapping(data: dict) -> SuccessSpec:
    if not isinstance(data, dict):
        raise ConfigError("success section must be an object")
    kind = _require("success", data, "kind")
    if kind == GOAL_DISC:
        _reject_unknown("success", data, {"kind", "center_m", "radius_m"})
        return SuccessSpec(
            kind=kind,
            center=np.asarray(_require("success", data, "center_m"), dtype=float),
            radius=_require("success", data, "radius_m"),
        )
    if kind == PROGRESS_X:
        _reject_unknown("success", data, {"kind", "threshold_m"})
        return SuccessSpec(
            kind=kind, threshold=_require("success", data, "threshold_m")
        )
    raise ConfigError(f"unknown success kind {kind!r}")


def scenario_from_mapping(data: dict) -> Scenario:
    """Build a validated Scenario from parsed JSON."""
    if not isinstance(data, dict):
        raise ConfigError("scenario document must be a JSON object")
    _reject_unknown(
        "scenario",
        data,
        {
            "name",
            "model",
            "environment",
            "initial_state",
            "task",
            "filter",
            "solver",
            "max_steps",
            "success",
            "rng_seed",
        },
    )
    return Scenario(
        name=_require("scenario", data, "name"),
        model=_model_from_mapping(_require("scenario", data, "model")),
        env=_env_from_mapping(_require("scenario", data, "environment")),
        initial_state=np.asarray(
            _require("scenario", data, "initial_state"), dtype=float
        ),
        task=_task_from_mapping(data.get("task", {})),
        filter=_filter_from_mapping(data.get("filter", {})),
        solver=_solver_from_mapping(_require("scenario", data, "solver")),
        max_steps=_require("scenario", data, "max_steps"),
        success=_success_from_mapping(_require("scenario", data, "success")),
        rng_seed=data.get("rng_seed", 0),
    )


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file.

    Raises:
        ConfigError: On parse errors, unknown fields, or invariant
            violations; the message names the offending field.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {path} is not valid JSON: {exc}") from exc
    return scenario_from_mapping(data)


def scenario_to_mapping(scenario: Scenario) -> dict:
    """Fully resolved scenario as a JSON-ready mapping (defaults filled).

    Feeding the result back through scenario_from_mapping reproduces the
    scenario, so writing it next to the run log pins the exact
    configuration that produced the run.
    """
    model = scenario.model
    model_section = {
        "family": model.name,
        "dt_s": model.dt,
        "footprint_radius_m": model.footprint_radius,
    }
    if model.name == DUBINS:
        model_section["speed_mps"] = model.speed
        model_section["turn_rate_limit_radps"] = float(model.control_upper[0])
    else:
        model_section["wheelbase_m"] = model.wheelbase
        model_section["accel_limit_mps2"] = float(model.control_upper[0])
        model_section["steer_rate_limit_radps"] = float(model.control_upper[1])
    env = scenario.env
    env_section = {
        "obstacles_xyr_m": env.obstacles.tolist(),
        "road_half_width_m": env.road_half_width,
        "yaw_bound_rad": env.yaw_bound,
        "goal_xyr_m": None if env.goal is None else env.goal.tolist(),
        "stop_target": env.stop_target,
        "obstacle_scale": env.obstacle_scale,
        "road_scale": env.road_scale,
        "yaw_scale": env.yaw_scale,
        "soft_margin": env.soft_margin,
        "soft_sharpness": env.soft_sharpness,
        "stop_steer_gain_hz": env.stop_steer_gain,
        "stop_max_steps": env.stop_max_steps,
    }
    task = scenario.task
    task_section = {
        "goal_point_m": task.goal_point.tolist(),
        "lookahead_distance_m": task.lookahead_distance,
        "reference_speed_mps": task.reference_speed,
        "speed_feedback_gain_hz": task.speed_feedback_gain,
        "steering_feedback_gain_hz": task.steering_feedback_gain,
        "road_center_y_m": task.road_center_y,
        "heading_deadband_rad": task.heading_deadband,
    }
    filt = scenario.filter
    filter_section = {
        "mode": filt.mode,
        "gamma": filt.gamma,
        "lambda_scale": filt.lambda_scale,
        "max_qcqp_iterations": filt.max_qcqp_iterations,
        "manual_buffer_m": filt.manual_buffer,
    }
    solver = scenario.solver
    solver_section = {
        "horizon_steps": solver.horizon,
        "mode": solver.mode,
        "max_iterations": solver.max_iterations,
        "convergence_tol": solver.convergence_tol,
        "line_search_alphas": list(solver.line_search_alphas),
        "hess_regularization": solver.hess_regularization,
        "curvature_shift": solver.curvature_shift,
    }
    if scenario.success.kind == GOAL_DISC:
        success_section = {
            "kind": GOAL_DISC,
            "center_m": scenario.success.center.tolist(),
            "radius_m": scenario.success.radius,
        }
    else:
        success_section = {
            "kind": PROGRESS_X,
            "threshold_m": scenario.success.threshold,
        }
    return {
        "name": scenario.name,
        "model": model_section,
        "environment": env_section,
        "initial_state": scenario.initial_state.tolist(),
        "task": task_section,
        "filter": filter_section,
        "solver": solver_section,
        "max_steps": scenario.max_steps,
        "success": success_section,
        "rng_seed": scenario.rng_seed,
    }


def run_simulation(scenario: Scenario) -> list[StepRecord]:
    """Close the loop until success, a safety violation, or the budget.

    The success state itself is never recorded (no control is issued there);
    it is recoverable by integrating the last record's ``u_exec``. A step
    whose pre-step margin g is negative is recorded and then ends the run.

    Raises:
        SimulationAborted: A solver raised SolverNumericError mid-run; the
            steps completed so far ride along on the exception.
    """
    model, env = scenario.model, scenario.env
    policy = task_policy(model, scenario.task)
    stores = FilterStores()
    has_target = env.has_target()
    x = scenario.initial_state.copy()
    records: list[StepRecord] = []
    for t in range(scenario.max_steps):
        if success_reached(scenario.success, x):
            break
        u_task = policy(x)
        try:
            decision = filter_step(
                x, u_task, stores, env, model, scenario.filter, scenario.solver
            )
        except SolverNumericError as exc:
            raise SimulationAborted(
                f"solver failure at step {t}: {exc}", records
            ) from exc
        g = failure_margin(model, env, x, order=0).value
        ell = (
            target_margin(model, env, x, order=0).value
            if has_target
            else math.nan
        )
        records.append(
            StepRecord(
                t=t,
                state=x.copy(),
                u_task=np.asarray(u_task, dtype=float).copy(),
                u_exec=np.asarray(decision.u_exec, dtype=float).copy(),
                mode_applied=decision.mode_applied,
                v_current=decision.v_current,
                v_next=decision.v_next,
                qcqp_iterations_used=decision.qcqp_iterations_used,
                g_value=g,
                ell_value=ell,
                cycle_time=decision.cycle_time,
            )
        )
        if g < 0.0:
            break
        x = step_rk4(model, x, decision.u_exec)
    return records


def final_state(scenario: Scenario, records: list[StepRecord]) -> np.ndarray:
    """State reached after the last recorded step."""
    if not records:
        return scenario.initial_state.copy()
    last = records[-1]
    return step_rk4(scenario.model, last.state, last.u_exec)


def compute_metrics(records: list[StepRecord], scenario: Scenario) -> Metrics:
    """Summarize a run; pure function of the log and the scenario.

    Success requires reaching the scenario's criterion at some visited state
    (including the post-final-step state) with no negative safety margin
    anywhere along the way.
    """
    if not records:
        raise ConfigError("metrics need at least one step record")
    dt = scenario.model.dt
    controls = np.asarray([r.u_exec for r in records])
    jerk = (
        np.abs(np.diff(controls, axis=0)) / dt
        if len(records) > 1
        else np.zeros((0, controls.shape[1]))
    )

    def stats(channel: np.ndarray) -> tuple[float, float]:
        if channel.size == 0:
            return 0.0, 0.0
        return float(np.mean(channel)), float(np.std(channel))

    if scenario.model.name == DUBINS:
        accel_mean = accel_std = 0.0  # no acceleration channel
        steer_mean, steer_std = stats(jerk[:, 0])
    else:
        accel_mean, accel_std = stats(jerk[:, 0])
        steer_mean, steer_std = stats(jerk[:, 1])

    deviation = float(
        sum(np.sum(np.abs(r.u_exec - r.u_task)) for r in records)
    )
    cycle = np.asarray([r.cycle_time for r in records])

    end = final_state(scenario, records)
    safe = all(r.g_value >= 0.0 for r in records) and (
        failure_margin(scenario.model, scenario.env, end, order=0).value >= 0.0
    )
    reached = success_reached(scenario.success, end) or any(
        success_reached(scenario.success, r.state) for r in records
    )
    return Metrics(
        task_success=bool(reached and safe),
        accel_jerk_mean=accel_mean,
        accel_jerk_std=accel_std,
        steer_jerk_mean=steer_mean,
        steer_jerk_std=steer_std,
        total_deviation=deviation,
        cycle_time_mean=float(np.mean(cycle)),
        cycle_time_std=float(np.std(cycle)),
        steps_taken=len(records),
    )


def _labels_for_dim(state_dim: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    for name, labels in _STATE_LABELS.items():
        if len(labels) == state_dim:
            return labels, _CONTROL_LABELS[name]
    raise ConfigError(f"no model family with {state_dim} state components")


def _header(state_dim: int) -> list[str]:
    state_labels, control_labels = _labels_for_dim(state_dim)
    return (
        ["t"]
        + list(state_labels)
        + [f"u_task_{c}" for c in control_labels]
        + [f"u_exec_{c}" for c in control_labels]
        + [
            "mode_applied",
            "v_current",
            "v_next",
            "qcqp_iterations_used",
            "g_value",
            "ell_value",
            "cycle_time",
        ]
    )


def _fmt(value: float) -> str:
    return "%.17g" % value


def write_outputs(
    records: list[StepRecord],
    metrics: Metrics | None,
    out_dir,
    model: ModelSpec | None = None,
) -> dict[str, Path]:
    """Write the step log, metrics summary, and plot-ready trajectory.

    Floats are printed at 17 significant digits so re-parsing reproduces
    them bit-exactly. With an empty record list the step log is header-only
    and ``model`` must be supplied to fix the header; pass ``metrics=None``
    to skip the metrics file.

    Returns:
        Mapping from artifact kind (``steps``, ``metrics``, ``trajectory``)
        to the written path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if records:
        state_dim = records[0].state.size
    elif model is not None:
        state_dim = model.state_dim
    else:
        raise ConfigError("empty record list needs an explicit model")
    paths: dict[str, Path] = {}

    steps_path = out / STEP_LOG_NAME
    lines = [",".join(_header(state_dim))]
    for r in records:
        row = (
            [str(r.t)]
            + [_fmt(v) for v in r.state]
            + [_fmt(v) for v in r.u_task]
            + [_fmt(v) for v in r.u_exec]
            + [
                r.mode_applied,
                _fmt(r.v_current),
                _fmt(r.v_next),
                str(r.qcqp_iterations_used),
                _fmt(r.g_value),
                _fmt(r.ell_value),
                _fmt(r.cycle_time),
            ]
        )
        lines.append(",".join(row))
    steps_path.write_text("\n".join(lines) + "\n")
    paths["steps"] = steps_path

    if metrics is not None:
        metrics_path = out / METRICS_NAME
        payload = {
            f.name: getattr(metrics, f.name) for f in fields(Metrics)
        }
        metrics_path.write_text(json.dumps(payload, indent=2) + "\n")
        paths["metrics"] = metrics_path

    trajectory_path = out / TRAJECTORY_NAME
    traj_lines = ["x_m,y_m,mode"]
    for r in records:
        traj_lines.append(
            f"{_fmt(r.state[0])},{_fmt(r.state[1])},{r.mode_applied}"
        )
    trajectory_path.write_text("\n".join(traj_lines) + "\n")
    paths["trajectory"] = trajectory_path
    return paths


def read_records(path) -> list[StepRecord]:
    """Parse a step log written by write_outputs back into records."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigError(f"step log {path} is empty")
    header = lines[0].split(",")
    state_dim = None
    for labels in _STATE_LABELS.values():
        if list(labels) == header[1 : 1 + len(labels)]:
            state_dim = len(labels)
    if state_dim is None or header != _header(state_dim):
        raise ConfigError(f"step log {path} has an unrecognized header")
    control_dim = (len(header) - state_dim - 8) // 2
    records = []
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(header):
            raise ConfigError(f"step log {path} has a malformed row: {line!r}")
        i = 1 + state_dim
        j = i + control_dim
        k = j + control_dim
        records.append(
            StepRecord(
                t=int(cells[0]),
                state=np.array([float(c) for c in cells[1:i]]),
                u_task=np.array([float(c) for c in cells[i:j]]),
                u_exec=np.array([float(c) for c in cells[j:k]]),
                mode_applied=cells[k],
                v_current=float(cells[k + 1]),
                v_next=float(cells[k + 2]),
                qcqp_iterations_used=int(cells[k + 3]),
                g_value=float(cells[k + 4]),
                ell_value=float(cells[k + 5]),
                cycle_time=float(cells[k + 6]),
            )
        )
    return records


def read_metrics(path) -> Metrics:
    """Parse a metrics summary written by write_outputs."""
    data = json.loads(Path(path).read_text())
    expected = {f.name for f in fields(Metrics)}
    _reject_unknown("metrics", data, expected)
    missing = sorted(expected - set(data))
    if missing:
        raise ConfigError(f"metrics file lacks field(s): {', '.join(missing)}")
    return Metrics(**data)
