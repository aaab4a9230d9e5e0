"""Minimum-deviation control correction under a quadratic safety constraint.

Given a quadratic model of the safety value at the next state, the filter
asks for the smallest control change delta_u such that

    q(delta_u) = delta_u' P delta_u + p' delta_u + c  >=  0,
    u_task + delta_u inside the control box,

where P = 1/2 f_u' V_xx f_u, p = f_u' V_x, and c = V_next - gamma V_current.
With P negative definite the feasible set is a solid ellipsoid and the
problem has a unique minimum-norm solution; otherwise the quadratic term is
dropped and the linear program's closed form is used.

The ellipsoid case is solved through the KKT stationarity path

    delta_u(mu) = mu (I - 2 mu P)^{-1} p,      mu >= 0,

along which the constraint value q(delta_u(mu)) is strictly increasing from c
toward q_max = c - p' P^{-1} p / 4 (the constraint's best attainable value).
A bisection on mu finds the boundary point. Box interaction is handled
exactly for one and two dimensional controls by enumerating box faces: on a
face the problem drops one dimension and reduces to a scalar quadratic
inequality solved in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Control, ModelSpec
from .errors import ConfigError, SolverNumericError
from .reach_avoid_ilq import QuadraticValue

SATISFIED_AT_ZERO = "satisfied_at_zero"
QUADRATIC_FEASIBLE = "quadratic_feasible"
LINEAR_FALLBACK = "linear_fallback"
INFEASIBLE = "infeasible"

# Eigenvalues above this count as "not negative": such P routes to the
# linear fallback.
ND_THRESHOLD = -1e-10
# Residual slack accepted as satisfying the constraint.
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class QcqpParams:
    """Constraint data: quadratic (P, p, c) plus the shaping constants.

    Attributes:
        P: Symmetric m x m quadratic coefficient.
        p: Linear coefficient, length m.
        c: Constant term (decay slack at delta_u = 0).
        gamma: Barrier decay rate in (0, 1].
        lambda_scale: Multiplier >= 1 applied to negative c between repair
            iterations by the filter.
    """

    P: np.ndarray
    p: np.ndarray
    c: float
    gamma: float
    lambda_scale: float = 1.0

    def __post_init__(self) -> None:
        P = np.asarray(self.P, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or p.shape != (P.shape[0],):
            raise ConfigError("P must be square and p must match its size")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-9:
            raise ConfigError("P must be symmetric within 1e-9")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "p", p)
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.lambda_scale < 1.0:
            raise ConfigError("lambda_scale must be at least 1")


@dataclass(frozen=True)
class QcqpSolution:
    """Correction delta_u with its solve route and constraint residual."""

    delta_u: np.ndarray
    status: str
    constraint_residual: float


def build_constraint(
    root_value_next: QuadraticValue,
    root_fu: np.ndarray,
    value_current: float,
    gamma: float,
    lambda_scale: float = 1.0,
) -> QcqpParams:
    """Assemble (P, p, c) from the value quadratic at the candidate next state.

    P carries the 1/2 from the second-order Taylor term; p is the first-order
    term; c is how much decay slack the candidate control already has.
    """
    fu = np.asarray(root_fu, dtype=float)
    P = 0.5 * fu.T @ root_value_next.hess @ fu
    p = fu.T @ root_value_next.grad
    c = float(root_value_next.value) - gamma * float(value_current)
    return QcqpParams(P=P, p=p, c=c, gamma=gamma, lambda_scale=lambda_scale)


def is_negative_definite(P: np.ndarray) -> bool:
    """True iff the largest eigenvalue is below -1e-10."""
    return float(np.max(np.linalg.eigvalsh(0.5 * (P + P.T)))) < ND_THRESHOLD


def _constraint_value(P: np.ndarray, p: np.ndarray, c: float, d: np.ndarray) -> float:
    return float(d @ P @ d + p @ d + c)


def _face_candidates(
    P: np.ndarray, p: np.ndarray, c: float, lo: np.ndarray, hi: np.ndarray
) -> list[np.ndarray]:
    """Minimum-norm feasible points on each box face (m <= 2 exact).

    Fixing one coordinate at its bound reduces q >= 0 to a scalar quadratic
    inequality a s^2 + b s + r >= 0 with a < 0, whose feasible set is the
    closed interval between the roots; the face optimum clamps 0 into that
    interval intersected with the box edge.
    """
    m = p.size
    candidates: list[np.ndarray] = []
    if m == 1:
        # The whole problem is the scalar quadratic; handled by the caller.
        return candidates
    for i in range(m):
        j = 1 - i
        for bound in (lo[i], hi[i]):
            if not np.isfinite(bound):
                continue
            a = P[j, j]
            b = 2.0 * P[i, j] * bound + p[j]
            r = P[i, i] * bound * bound + p[i] * bound + c
            interval = _scalar_quadratic_interval(a, b, r)
            if interval is None:
                continue
            left = max(interval[0], lo[j])
            right = min(interval[1], hi[j])
            if left > right:
                continue
            d = np.empty(2)
            d[i] = bound
            d[j] = min(max(0.0, left), right)
            candidates.append(d)
    return candidates


def _scalar_quadratic_interval(
    a: float, b: float, r: float
) -> tuple[float, float] | None:
    """Solution interval of a s^2 + b s + r >= 0 when a < 0, else None/line."""
    if a < 0.0:
        disc = b * b - 4.0 * a * r
        if disc < 0.0:
            return None
        root = np.sqrt(disc)
        s1 = (-b + root) / (2.0 * a)
        s2 = (-b - root) / (2.0 * a)
        return (min(s1, s2), max(s1, s2))
    if abs(b) < 1e-15:
        return None if r < 0.0 else (-np.inf, np.inf)
    if b > 0.0:
        return (-r / b, np.inf)
    return (-np.inf, -r / b)


def _stationary_candidates(
    eigvals: np.ndarray, eigvecs: np.ndarray, pt: np.ndarray, c: float
) -> list[np.ndarray]:
    """All stationary points of the norm on the ellipsoid boundary (m = 2).

    Stationarity gives delta_i = mu pt_i / (1 - 2 mu lam_i) for a scalar
    multiplier mu; substituting into q(delta) = 0 and clearing denominators
    yields a quartic in mu whose real roots enumerate every candidate, not
    just the one on the mu >= 0 branch. Pole multipliers (mu = 1 / (2 lam_i)
    with pt_i = 0) contribute off-path candidates and are handled separately.
    """
    lam1, lam2 = eigvals
    sq1 = np.polymul([-2.0 * lam1, 1.0], [-2.0 * lam1, 1.0])
    sq2 = np.polymul([-2.0 * lam2, 1.0], [-2.0 * lam2, 1.0])
    poly = c * np.polymul(sq1, sq2)
    poly = np.polyadd(poly, pt[0] ** 2 * np.polymul([-lam1, 1.0, 0.0], sq2))
    poly = np.polyadd(poly, pt[1] ** 2 * np.polymul([-lam2, 1.0, 0.0], sq1))
    out: list[np.ndarray] = []
    if np.max(np.abs(poly)) > 0.0:
        for root in np.roots(poly):
            if abs(root.imag) > 1e-9 * (1.0 + abs(root.real)):
                continue
            mu = float(root.real)
            denom = 1.0 - 2.0 * mu * eigvals
            if np.min(np.abs(denom)) < 1e-12:
                continue
            out.append(eigvecs @ (mu * pt / denom))
    # Pole candidates: with pt_i = 0 the i-th coordinate decouples and the
    # boundary condition fixes its magnitude directly.
    for i in range(2):
        if abs(pt[i]) > 1e-12:
            continue
        j = 1 - i
        mu = 1.0 / (2.0 * eigvals[i])
        denom_j = 1.0 - 2.0 * mu * eigvals[j]
        if abs(denom_j) < 1e-12:
            continue
        dj = mu * pt[j] / denom_j
        rem = -(eigvals[j] * dj * dj + pt[j] * dj + c) / eigvals[i]
        if rem < 0.0:
            continue
        for sign in (1.0, -1.0):
            d = np.empty(2)
            d[i] = sign * np.sqrt(rem)
            d[j] = dj
            out.append(eigvecs @ d)
    return out


def _kkt_path_point(
    eigvals: np.ndarray, eigvecs: np.ndarray, p: np.ndarray, c: float
) -> np.ndarray:
    """Boundary point of the ellipsoid along the KKT path, by bisection.

    In the eigenbasis the path is d_i(mu) = mu p_i / (1 - 2 mu lam_i) and the
    constraint value along it increases strictly in mu. The bracket endpoint
    with nonnegative constraint value is returned so the residual cannot be
    negative beyond rounding.
    """
    pt = eigvecs.T @ p

    def phi(mu: float) -> float:
        d = mu * pt / (1.0 - 2.0 * mu * eigvals)
        return float(eigvals @ (d * d) + pt @ d + c)

    hi = 1.0
    for _ in range(200):
        if phi(hi) >= 0.0:
            break
        hi *= 2.0
    else:
        raise SolverNumericError("constraint bracket not found on KKT path")
    lo = 0.0
    for _ in range(100):
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        if phi(mid) >= 0.0:
            hi = mid
        else:
            lo = mid
    d = hi * pt / (1.0 - 2.0 * hi * eigvals)
    return eigvecs @ d


def solve_qcqp(
    params: QcqpParams, u_task: Control, model: ModelSpec
) -> QcqpSolution:
    """Minimum-norm delta_u satisfying the constraint inside the control box.

    Routes: c >= 0 is satisfied at zero; negative definite P walks the KKT
    path and resolves box clipping exactly through face enumeration; any
    other P drops the quadratic term and uses the linear closed form.
    """
    u_task = np.asarray(u_task, dtype=float)
    P, p, c = params.P, params.p, params.c
    m = p.size
    if c >= 0.0:
        return QcqpSolution(np.zeros(m), SATISFIED_AT_ZERO, c)
    if not is_negative_definite(P):
        return solve_linear_qp(p, c, u_task, model)

    lo = model.control_lower - u_task
    hi = model.control_upper - u_task
    eigvals, eigvecs = np.linalg.eigh(P)
    pt = eigvecs.T @ p
    q_max = c - 0.25 * float(pt @ (pt / eigvals))
    if q_max < 0.0:
        return QcqpSolution(np.zeros(m), INFEASIBLE, c)

    candidates: list[np.ndarray] = []
    if m == 1:
        interval = _scalar_quadratic_interval(float(P[0, 0]), float(p[0]), c)
        if interval is not None:
            left = max(interval[0], lo[0])
            right = min(interval[1], hi[0])
            if left <= right:
                candidates.append(np.array([min(max(0.0, left), right)]))
    else:
        if q_max <= 1e-12:
            # Degenerate ellipsoid: single feasible point at the vertex.
            vertex = eigvecs @ (-0.5 * pt / eigvals)
            if np.all(vertex >= lo - 1e-12) and np.all(vertex <= hi + 1e-12):
                candidates.append(np.clip(vertex, lo, hi))
        else:
            unboxed = _kkt_path_point(eigvals, eigvecs, p, c)
            if np.all(unboxed >= lo) and np.all(unboxed <= hi):
                # Global optimum is already inside the box.
                return QcqpSolution(
                    unboxed, QUADRATIC_FEASIBLE, _constraint_value(P, p, c, unboxed)
                )
            candidates.extend(_face_candidates(P, p, c, lo, hi))
            for d in _stationary_candidates(eigvals, eigvecs, pt, c):
                if np.all(d >= lo) and np.all(d <= hi):
                    candidates.append(d)

    best = None
    best_norm = np.inf
    for d in candidates:
        if _constraint_value(P, p, c, d) < -RESIDUAL_TOL:
            continue
        norm = float(d @ d)
        if norm < best_norm:
            best, best_norm = d, norm
    if best is None:
        return QcqpSolution(np.zeros(m), INFEASIBLE, c)
    return QcqpSolution(best, QUADRATIC_FEASIBLE, _constraint_value(P, p, c, best))


def solve_linear_qp(
    p: np.ndarray, c: float, u_task: Control, model: ModelSpec
) -> QcqpSolution:
    """Closed-form minimum-norm solution of p' delta_u + c >= 0 in the box.

    The unconstrained solution is (-c / ||p||^2) p; clamping that to the box
    either keeps the constraint satisfied or proves the program infeasible
    along this route (the constraint gradient is constant, so no other box
    point does better).
    """
    u_task = np.asarray(u_task, dtype=float)
    p = np.asarray(p, dtype=float)
    m = p.size
    if c >= 0.0:
        return QcqpSolution(np.zeros(m), SATISFIED_AT_ZERO, c)
    norm_sq = float(p @ p)
    if norm_sq < 1e-30:
        return QcqpSolution(np.zeros(m), INFEASIBLE, c)
    d = (-c / norm_sq) * p
    clamped = np.clip(d, model.control_lower - u_task, model.control_upper - u_task)
    residual = float(p @ clamped + c)
    if residual >= -RESIDUAL_TOL:
        return QcqpSolution(clamped, LINEAR_FALLBACK, residual)
    return QcqpSolution(clamped, INFEASIBLE, residual)
