"""Iterative linear-quadratic solver for reach-avoid trajectory problems.

The solver maximises, over feedback policies, either

* reach_avoid:  max over tau of min( l(x_tau), min over s <= tau of g(x_s) ),
  positive iff some time reaches the target set without ever leaving the safe
  set beforehand, or
* avoid_only:   min over t of g(x_t), the worst safety margin on the horizon.

Both objectives satisfy a Bellman recursion over scalar margins,

    V_t = min( g_t, max( l_t, V_{t+1} ) )      (reach_avoid)
    V_t = min( g_t, V_{t+1} )                  (avoid_only)

with terminal value min(g_H, l_H) resp. g_H. The backward pass carries a
quadratic model of V along the nominal trajectory: at each step it forms
Gauss-Newton Q-terms, takes maximising affine gains in the control, and then
substitutes whichever branch (safety margin, target margin, or propagated
value) the scalar recursion selects on the nominal values. The value constant
follows the exact scalar recursion, so the root value always reproduces the
rollout objective of the nominal trajectory.

The forward pass rolls out the affine policy with control clamping and a
backtracking line search on the objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dynamics import ModelSpec, State, clamp_control, jacobians, step_rk4
from .errors import ConfigError, SolverNumericError
from .margins import (
    Environment,
    braking_margin_quadratics,
    failure_margin,
    failure_values,
    target_margin,
    target_values,
)

REACH_AVOID = "reach_avoid"
AVOID_ONLY = "avoid_only"

# Branch codes recorded per step by the backward pass.
BRANCH_PROPAGATED = 0
BRANCH_FAILURE = 1
BRANCH_TARGET = 2


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    Attributes:
        horizon: Number of control steps H (trajectory has H + 1 states).
        mode: "reach_avoid" or "avoid_only".
        max_iterations: Outer iteration cap.
        convergence_tol: Absolute objective change that counts as converged.
        line_search_alphas: Strictly decreasing step sizes in (0, 1].
        hess_regularization: Constant subtracted from Q_uu's diagonal before
            the definiteness fix.
        curvature_shift: Eigenvalues of Q_uu are clamped to at most minus this
            value so the maximising gains are well defined.
    """

    horizon: int
    mode: str = REACH_AVOID
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    line_search_alphas: tuple[float, ...] = (1.0, 0.5, 0.25, 0.1, 0.05)
    hess_regularization: float = 0.0
    curvature_shift: float = 1e-6

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.mode not in (REACH_AVOID, AVOID_ONLY):
            raise ConfigError(f"unknown solver mode: {self.mode!r}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        if self.convergence_tol <= 0.0:
            raise ConfigError("convergence_tol must be positive")
        alphas = tuple(float(a) for a in self.line_search_alphas)
        object.__setattr__(self, "line_search_alphas", alphas)
        if not alphas or any(not 0.0 < a <= 1.0 for a in alphas):
            raise ConfigError("line_search_alphas must lie in (0, 1]")
        if any(b >= a for a, b in zip(alphas, alphas[1:])):
            raise ConfigError("line_search_alphas must be strictly decreasing")
        if self.hess_regularization < 0.0:
            raise ConfigError("hess_regularization must be nonnegative")
        if self.curvature_shift <= 0.0:
            raise ConfigError("curvature_shift must be positive")


@dataclass(frozen=True)
class QuadraticValue:
    """Local quadratic model of the value function: value, V_x, V_xx."""

    value: float
    grad: np.ndarray
    hess: np.ndarray

    def __post_init__(self) -> None:
        grad = np.asarray(self.grad, dtype=float)
        hess = np.asarray(self.hess, dtype=float)
        hess = 0.5 * (hess + hess.T)
        object.__setattr__(self, "grad", grad)
        object.__setattr__(self, "hess", hess)


@dataclass(frozen=True)
class IlqSolution:
    """Converged (or best-effort) solver output.

    Attributes:
        nominal_states: Shape (H + 1, n), dynamically consistent.
        nominal_controls: Shape (H, m), inside the control box.
        feedback_gains: Shape (H, m, n).
        feedforward_gains: Shape (H, m).
        root_value: Quadratic model of the value at nominal_states[0].
        root_fu: Control Jacobian B at the first step, shape (n, m).
        converged: Whether the objective change fell below tolerance (or no
            line-search step could improve).
        iterations: Outer iterations executed.
        rollout_objective: Objective of the nominal trajectory; equals
            root_value.value by construction.
    """

    nominal_states: np.ndarray
    nominal_controls: np.ndarray
    feedback_gains: np.ndarray
    feedforward_gains: np.ndarray
    root_value: QuadraticValue
    root_fu: np.ndarray
    converged: bool
    iterations: int
    rollout_objective: float


class ForwardPass(NamedTuple):
    states: np.ndarray
    controls: np.ndarray
    objective: float
    failure_margins: np.ndarray
    target_margins: np.ndarray | None


class BackwardPass(NamedTuple):
    feedback_gains: np.ndarray
    feedforward_gains: np.ndarray
    search_feedback: np.ndarray
    search_feedforward: np.ndarray
    root_value: QuadraticValue
    value_chain: np.ndarray
    branches: np.ndarray


def margin_series(
    model: ModelSpec, env: Environment, states: np.ndarray, mode: str
) -> tuple[np.ndarray, np.ndarray | None]:
    """Failure margins (and target margins in reach_avoid mode) per state."""
    g, _ = failure_values(model, env, states)
    l = target_values(model, env, states) if mode == REACH_AVOID else None
    return g, l


def _objective_from_margins(
    g: np.ndarray, l: np.ndarray | None, mode: str
) -> float:
    """Forward-form objective: running minimum of g, best arrival time."""
    if mode == AVOID_ONLY:
        return float(np.min(g))
    return float(np.max(np.minimum(l, np.minimum.accumulate(g))))


def rollout_objective(
    model: ModelSpec, env: Environment, states: np.ndarray, mode: str
) -> float:
    """Objective of a fixed state trajectory, by direct forward accumulation.

    This is written in the forward form (running minimum of g, maximum over
    candidate arrival times) rather than the backward recursion, so it serves
    as an independent check of the backward value chain.
    """
    g, l = margin_series(model, env, np.asarray(states, dtype=float), mode)
    return _objective_from_margins(g, l, mode)


def value_chain(
    g: np.ndarray, l: np.ndarray | None, mode: str
) -> np.ndarray:
    """Scalar Bellman recursion along fixed margins."""
    count = g.shape[0]
    w = np.empty(count)
    if mode == AVOID_ONLY:
        w[-1] = g[-1]
        for t in range(count - 2, -1, -1):
            w[t] = min(g[t], w[t + 1])
        return w
    w[-1] = min(g[-1], l[-1])
    for t in range(count - 2, -1, -1):
        w[t] = min(g[t], max(l[t], w[t + 1]))
    return w


def forward_pass(
    model: ModelSpec,
    env: Environment,
    config: SolverConfig,
    nominal_states: np.ndarray,
    nominal_controls: np.ndarray,
    feedback_gains: np.ndarray,
    feedforward_gains: np.ndarray,
    alpha: float,
) -> ForwardPass:
    """Roll out u_t = clamp(u_bar_t + alpha k_t + K_t (x_t - x_bar_t)).

    Returns the new trajectory with its margins and objective.
    """
    horizon = nominal_controls.shape[0]
    states = np.empty_like(nominal_states)
    controls = np.empty_like(nominal_controls)
    states[0] = nominal_states[0]
    for t in range(horizon):
        u = (
            nominal_controls[t]
            + alpha * feedforward_gains[t]
            + feedback_gains[t] @ (states[t] - nominal_states[t])
        )
        controls[t] = clamp_control(model, u)
        states[t + 1] = step_rk4(model, states[t], controls[t])
        if not np.all(np.isfinite(states[t + 1])):
            # Blown-up rollout: report an unacceptable objective so the line
            # search rejects this candidate instead of aborting the solve.
            states[t + 2 :] = states[t + 1]
            controls[t + 1 :] = 0.0
            zeros = np.zeros(horizon + 1)
            return ForwardPass(
                states, controls, -np.inf, zeros,
                zeros if config.mode == REACH_AVOID else None,
            )
    g, l = margin_series(model, env, states, config.mode)
    return ForwardPass(states, controls, _objective_from_margins(g, l, config.mode), g, l)


def _clamp_to_negative_definite(
    Q: np.ndarray, shift: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigendecompose symmetric Q and force eigenvalues to <= -shift.

    Wrong-sign eigenvalues are reflected (lambda -> -|lambda|) rather than
    clamped to the floor: margin Hessians are often convex along control
    directions, and flooring a sizable positive eigenvalue at -shift would
    amplify that direction's gains by 1/shift. Reflection keeps the gain
    magnitude tied to the actual curvature scale.

    Returns (raw_eigvals, fixed_eigvals, eigvecs). Retries with a tenfold
    larger shift if the decomposition fails, up to five times.
    """
    attempt_shift = shift
    for _ in range(5):
        try:
            eigvals, eigvecs = np.linalg.eigh(Q)
        except np.linalg.LinAlgError:
            Q = Q + (-attempt_shift) * np.eye(Q.shape[0])
            attempt_shift *= 10.0
            continue
        return eigvals, -np.maximum(np.abs(eigvals), attempt_shift), eigvecs
    raise SolverNumericError("control curvature decomposition failed")


def _target_step_quadratics(
    model: ModelSpec, env: Environment, states: np.ndarray, steps: list[int]
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Gradient and Hessian of the target margin at the given steps."""
    if not steps:
        return {}
    if env.stop_target:
        _, grads, hesses = braking_margin_quadratics(model, env, states[steps])
        return {t: (grads[i], hesses[i]) for i, t in enumerate(steps)}
    out = {}
    for t in steps:
        ev = target_margin(model, env, states[t], order=2)
        out[t] = (ev.grad, ev.hess)
    return out


def backward_pass(
    model: ModelSpec,
    env: Environment,
    config: SolverConfig,
    states: np.ndarray,
    controls: np.ndarray,
    failure_margins: np.ndarray,
    target_margins: np.ndarray | None,
) -> BackwardPass:
    """Gains and value quadratics along a fixed nominal trajectory.

    Branches of the min/max recursion are selected on the nominal scalar
    values first; quadratic models are then only evaluated where the selected
    branch needs them. Ties resolve toward the propagated branch so gains stay
    informative.

    Two gain sets come back. The bookkeeping set (feedback_gains,
    feedforward_gains) is zeroed wherever a margin branch is active, so
    replaying it reproduces the nominal controls there; the fallback policy
    store consumes this set. The search set carries, at margin-active steps,
    a bang-bang probe built from the continuation ascent gradient Q_u: each
    control component whose gradient is non-negligible is pushed one box
    diameter in the gradient's sign (the forward pass clips to the box).
    Without it the solver is blind on margin plateaus: when arriving
    immediately dominates every step of the nominal, all bookkeeping gains
    are zero and the line search can never discover that improving the
    continuation (for a vehicle, steering while it brakes) eventually beats
    arriving now. Only the signs of Q_u are kept. The Newton step would
    divide by plateau curvature sitting at the clamping floor, amplifying
    the flattest direction's noise; the raw gradient ratio is hardly better,
    because near an obstacle the braking component dwarfs the steering one
    even when every improving maneuver needs steering at its limit.
    """
    horizon = controls.shape[0]
    n, m = model.state_dim, model.control_dim
    g = failure_margins
    l = target_margins
    reach = config.mode == REACH_AVOID

    w = value_chain(g, l, config.mode)

    # Branch selection from scalars alone.
    branches = np.empty(horizon + 1, dtype=np.int8)
    if reach:
        branches[horizon] = BRANCH_FAILURE if g[horizon] < l[horizon] else BRANCH_TARGET
    else:
        branches[horizon] = BRANCH_FAILURE
    for t in range(horizon - 1, -1, -1):
        inner = max(l[t], w[t + 1]) if reach else w[t + 1]
        if g[t] < inner:
            branches[t] = BRANCH_FAILURE
        elif reach and l[t] > w[t + 1]:
            branches[t] = BRANCH_TARGET
        else:
            branches[t] = BRANCH_PROPAGATED

    target_steps = [int(t) for t in np.nonzero(branches == BRANCH_TARGET)[0]]
    target_quads = _target_step_quadratics(model, env, states, target_steps)

    jac = jacobians(model, states[:-1], controls)
    reg_eye = config.hess_regularization * np.eye(m)
    span = model.control_upper - model.control_lower

    K = np.zeros((horizon, m, n))
    k = np.zeros((horizon, m))
    search_K = np.zeros((horizon, m, n))
    search_k = np.zeros((horizon, m))

    def margin_quadratics(t: int) -> tuple[np.ndarray, np.ndarray]:
        if branches[t] == BRANCH_FAILURE:
            ev = failure_margin(model, env, states[t], order=2)
            return ev.grad, ev.hess
        return target_quads[t]

    if branches[horizon] == BRANCH_PROPAGATED:  # unreachable, terminal is a margin
        raise SolverNumericError("terminal step must select a margin branch")
    Vx, Vxx = margin_quadratics(horizon)

    for t in range(horizon - 1, -1, -1):
        A, B = jac.A[t], jac.B[t]
        Qx = A.T @ Vx
        Qu = B.T @ Vx
        Qxx = A.T @ Vxx @ A
        Qux = B.T @ Vxx @ A
        Quu = B.T @ Vxx @ B - reg_eye
        Quu = 0.5 * (Quu + Quu.T)
        raw_eigvals, clamped, eigvecs = _clamp_to_negative_definite(
            Quu, config.curvature_shift
        )
        inv = (eigvecs / clamped) @ eigvecs.T
        Kt = -inv @ Qux
        kt = -inv @ Qu
        if branches[t] == BRANCH_PROPAGATED:
            # Improvement terms are applied only on the genuinely concave
            # control subspace. Directions whose curvature was clamped carry
            # no trustworthy second-order information; including them blows
            # the propagated quadratics up by 1/curvature_shift per step.
            # Without them the propagation is the exact policy-evaluation
            # quadratic of the nominal trajectory, which stays bounded.
            floor = max(
                config.curvature_shift, 1e-3 * float(np.abs(raw_eigvals).max())
            )
            concave = raw_eigvals < -floor
            if concave.any():
                sub = (
                    eigvecs[:, concave] / raw_eigvals[concave]
                ) @ eigvecs[:, concave].T
                Vx = Qx - Qux.T @ sub @ Qu
                Vxx = Qxx - Qux.T @ sub @ Qux
                Vxx = 0.5 * (Vxx + Vxx.T)
            else:
                Vx = Qx
                Vxx = Qxx
            K[t] = Kt
            k[t] = kt
            search_K[t] = Kt
            search_k[t] = kt
        else:
            q = Qu / span
            peak = float(np.max(np.abs(q)))
            if peak > 1e-12:
                live = np.abs(q) >= 1e-3 * peak
                search_k[t] = np.where(live, np.sign(q) * span, 0.0)
            Vx, Vxx = margin_quadratics(t)
    if not (np.all(np.isfinite(Vx)) and np.all(np.isfinite(Vxx))):
        raise SolverNumericError(
            "non-finite value quadratics in backward pass",
            iterate=(states, controls),
        )
    root = QuadraticValue(value=float(w[0]), grad=Vx, hess=Vxx)
    return BackwardPass(K, k, search_K, search_k, root, w, branches)


def solve(
    model: ModelSpec,
    env: Environment,
    config: SolverConfig,
    initial_state: State,
    warm_start: np.ndarray | None = None,
) -> IlqSolution:
    """Run the full iteration from an initial state.

    Args:
        model: Vehicle model.
        env: World and margin description.
        config: Solver settings; reach_avoid mode requires env to define a
            target set.
        initial_state: Root state, shape (state_dim,).
        warm_start: Optional initial control sequence, shape (H, m); clamped
            to the box. Zeros when omitted.

    Returns:
        IlqSolution whose gains and root value correspond to the returned
        nominal trajectory.
    """
    x0 = np.asarray(initial_state, dtype=float)
    if x0.shape != (model.state_dim,) or not np.all(np.isfinite(x0)):
        raise ConfigError("initial_state must be a finite state vector")
    if config.mode == REACH_AVOID and not env.has_target():
        raise ConfigError("reach_avoid mode needs an environment with a target set")
    horizon, m = config.horizon, model.control_dim

    if warm_start is None:
        us = np.zeros((horizon, m))
    else:
        us = clamp_control(model, np.asarray(warm_start, dtype=float))
        if us.shape != (horizon, m):
            raise ConfigError("warm_start must have shape (horizon, control_dim)")

    states = _open_loop(model, x0, us)
    if not np.all(np.isfinite(states)):
        raise SolverNumericError(
            "non-finite state in initial rollout", iterate=(states, us)
        )
    g, l = margin_series(model, env, states, config.mode)
    current = ForwardPass(states, us, _objective_from_margins(g, l, config.mode), g, l)

    iterations = 0
    converged = False
    bp: BackwardPass | None = None
    bp_fresh = False
    while iterations < config.max_iterations:
        iterations += 1
        bp = backward_pass(
            model, env, config,
            current.states, current.controls,
            current.failure_margins, current.target_margins,
        )
        bp_fresh = True
        accepted = None
        for alpha in config.line_search_alphas:
            candidate = forward_pass(
                model, env, config,
                current.states, current.controls,
                bp.search_feedback, bp.search_feedforward, alpha,
            )
            if candidate.objective > current.objective + 1e-12:
                accepted = candidate
                break
        if accepted is None:
            converged = True
            break
        delta = accepted.objective - current.objective
        current = accepted
        bp_fresh = False
        if delta < config.convergence_tol:
            converged = True
            break
    if not bp_fresh:
        bp = backward_pass(
            model, env, config,
            current.states, current.controls,
            current.failure_margins, current.target_margins,
        )

    root_fu = jacobians(model, current.states[0], current.controls[0]).B
    return IlqSolution(
        nominal_states=current.states,
        nominal_controls=current.controls,
        feedback_gains=bp.feedback_gains,
        feedforward_gains=bp.feedforward_gains,
        root_value=bp.root_value,
        root_fu=root_fu,
        converged=converged,
        iterations=iterations,
        rollout_objective=current.objective,
    )


def _open_loop(model: ModelSpec, x0: np.ndarray, us: np.ndarray) -> np.ndarray:
    states = np.empty((us.shape[0] + 1, model.state_dim))
    states[0] = x0
    for t in range(us.shape[0]):
        states[t + 1] = step_rk4(model, states[t], us[t])
    return states
