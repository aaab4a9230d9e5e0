"""Dynamics tests.

Expected step values were frozen from a high-order adaptive integrator
(DOP853, rtol 1e-13) run over one zero-order-hold step, so they are accurate
well beyond the local truncation error of a single RK4 step. Jacobians are
checked against central finite differences at a step size the implementation
does not use anywhere.
"""

import numpy as np
import pytest

from cbfddp.dynamics import (
    bicycle_model,
    clamp_control,
    continuous_derivative,
    dubins_model,
    jacobians,
    rollout,
    step_rk4,
)
from cbfddp.errors import ConfigError

# (x0, u, x_next) triples from the reference flow.
DUBINS_FLOW_CASES = [
    (
        [0.0, 0.0, 0.0],
        [0.3],
        [0.03499868751476554, 0.00026249507816191, 0.015],
    ),
    (
        [1.2, -0.4, 2.1],
        [-0.9],
        [1.1830160119013875, -0.36940036857298447, 2.055],
    ),
    (
        [-0.5, 0.8, -2.8],
        [1.0],
        [-0.5326709893274987, 0.7874560265746638, -2.75],
    ),
]

BICYCLE_FLOW_CASES = [
    (
        [0.0, 0.0, 0.7, 0.0, 0.0],
        [0.2, 0.5],
        [3.5249997244768960e-02, 1.0392109598544551e-05, 0.71,
         8.8342553621323979e-04, 0.025],
    ),
    (
        [2.0, -0.3, 0.4, 0.6, -0.3],
        [-0.5, 0.8],
        [2.0160530711356954, -0.2891516988251678, 0.375,
         0.588846637745489, -0.26],
    ),
    (
        [-1.0, 0.5, 1.1, -1.2, 0.25],
        [0.1, -0.4],
        [-0.9793244414551935, 0.4489010512818442, 1.105,
         -1.1730199135519392, 0.23],
    ),
]


def fd_jacobians(model, x, u, eps=1e-6):
    """Central finite differences of step_rk4, used as the independent oracle."""
    n, m = model.state_dim, model.control_dim
    A = np.empty((n, n))
    B = np.empty((n, m))
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = eps
        A[:, j] = (step_rk4(model, x + dx, u) - step_rk4(model, x - dx, u)) / (2 * eps)
    for j in range(m):
        du = np.zeros(m)
        du[j] = eps
        B[:, j] = (step_rk4(model, x, u + du) - step_rk4(model, x, u - du)) / (2 * eps)
    return A, B


def test_dubins_step_matches_reference_flow():
    model = dubins_model()
    for x0, u, expected in DUBINS_FLOW_CASES:
        got = step_rk4(model, np.array(x0), np.array(u))
        np.testing.assert_allclose(got, expected, rtol=0.0, atol=1e-7)


def test_bicycle_step_matches_reference_flow():
    model = bicycle_model()
    for x0, u, expected in BICYCLE_FLOW_CASES:
        got = step_rk4(model, np.array(x0), np.array(u))
        np.testing.assert_allclose(got, expected, rtol=0.0, atol=1e-7)


def test_dubins_zero_turn_is_exact_straight_line():
    model = dubins_model()
    x0 = np.array([0.3, -0.2, 0.0])
    got = step_rk4(model, x0, np.array([0.0]))
    # All four RK4 stages coincide, so the straight line is exact.
    np.testing.assert_array_equal(got, [0.3 + 0.7 * 0.05, -0.2, 0.0])


def test_bicycle_at_rest_stays_at_rest():
    model = bicycle_model()
    x0 = np.array([1.0, 2.0, 0.0, 0.7, 0.1])
    got = step_rk4(model, x0, np.array([0.0, 0.0]))
    np.testing.assert_array_equal(got, x0)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(7)
    for model in (dubins_model(), bicycle_model()):
        for _ in range(20):
            x = rng.uniform(-2.0, 2.0, model.state_dim)
            if model.name == "bicycle":
                x[2] = rng.uniform(0.0, 1.5)   # forward speeds
                x[4] = rng.uniform(-1.0, 1.0)  # keep tan(steer) well conditioned
            u = rng.uniform(model.control_lower, model.control_upper)
            got = jacobians(model, x, u)
            A_fd, B_fd = fd_jacobians(model, x, u)
            np.testing.assert_allclose(got.A, A_fd, rtol=1e-5, atol=1e-8)
            np.testing.assert_allclose(got.B, B_fd, rtol=1e-5, atol=1e-8)


def test_batched_kernels_match_per_item_loop():
    rng = np.random.default_rng(11)
    model = bicycle_model()
    xs = rng.uniform(-1.0, 1.0, (4, 6, model.state_dim))
    us = rng.uniform(-0.4, 0.4, (4, 6, model.control_dim))
    stepped = step_rk4(model, xs, us)
    jac = jacobians(model, xs, us)
    assert stepped.shape == xs.shape
    assert jac.A.shape == (4, 6, 5, 5)
    assert jac.B.shape == (4, 6, 5, 2)
    for i in range(4):
        for j in range(6):
            np.testing.assert_allclose(
                stepped[i, j], step_rk4(model, xs[i, j], us[i, j]), atol=1e-14
            )
            single = jacobians(model, xs[i, j], us[i, j])
            np.testing.assert_allclose(jac.A[i, j], single.A, atol=1e-14)
            np.testing.assert_allclose(jac.B[i, j], single.B, atol=1e-14)


def test_derivative_broadcasts_state_against_control_batch():
    model = dubins_model()
    x = np.array([0.0, 0.0, 0.5])
    us = np.linspace(-1.0, 1.0, 7)[:, None]
    out = continuous_derivative(model, x, us)
    assert out.shape == (7, 3)
    np.testing.assert_array_equal(out[:, 2], us[:, 0])


def test_clamp_control_projects_onto_box():
    model = bicycle_model()
    u = np.array([[10.0, -10.0], [0.1, 0.2], [-0.5, 0.8]])
    clamped = clamp_control(model, u)
    np.testing.assert_array_equal(clamped[0], [0.5, -0.8])
    np.testing.assert_array_equal(clamped[1], [0.1, 0.2])
    np.testing.assert_array_equal(clamped[2], [-0.5, 0.8])


def test_rollout_chains_steps():
    model = dubins_model()
    rng = np.random.default_rng(3)
    us = rng.uniform(-1.0, 1.0, (10, 1))
    xs = rollout(model, np.zeros(3), us)
    assert xs.shape == (11, 3)
    x = np.zeros(3)
    for t in range(10):
        x = step_rk4(model, x, us[t])
    np.testing.assert_array_equal(xs[-1], x)


def test_model_validation_rejects_bad_configs():
    with pytest.raises(ConfigError):
        dubins_model(dt=0.0)
    with pytest.raises(ConfigError):
        dubins_model(speed=-1.0)
    with pytest.raises(ConfigError):
        bicycle_model(wheelbase=0.0)
    with pytest.raises(ConfigError):
        bicycle_model(accel_limit=-0.1)
