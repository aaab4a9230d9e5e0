"""Margin tests.

Hand-derived oracle facts used below:

* obstacle margin at (1, 1) against a disc of radius 0.5 at the origin with
  footprint 0.15 is sqrt(2) - 0.65.
* braking from 0.7 m/s at 0.5 m/s^2 with straight wheels covers exactly
  v^2 / (2 a) = 0.49 m (the speed profile is piecewise linear and RK4
  integrates polynomials of this degree exactly).

Gradients and Hessians are cross-checked with finite differences at step
sizes the implementation does not use.
"""

import numpy as np
import pytest

from cbfddp.dynamics import bicycle_model, dubins_model
from cbfddp.errors import ConfigError
from cbfddp.margins import (
    Environment,
    braking_margin_values,
    failure_margin,
    failure_values,
    piece_values,
    stopping_rollout,
    target_margin,
    target_values,
)


def fd_grad(f, x, h):
    g = np.empty(x.size)
    for i in range(x.size):
        d = np.zeros(x.size)
        d[i] = h
        g[i] = (f(x + d) - f(x - d)) / (2 * h)
    return g


def fd_hess(f, x, h):
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            dij = np.zeros(n)
            dij[i] += h
            dij[j] += h
            dimj = np.zeros(n)
            dimj[i] += h
            dimj[j] -= h
            H[i, j] = (
                f(x + dij) - f(x + dimj) - f(x - dimj) + f(x - dij)
            ) / (4 * h * h)
    return 0.5 * (H + H.T)


def test_obstacle_margin_value_and_active_index():
    model = dubins_model()  # footprint 0.15
    env = Environment(obstacles=[[0.0, 0.0, 0.5], [5.0, 0.0, 1.0]])
    ev = failure_margin(model, env, np.array([1.0, 1.0, 0.3]))
    assert ev.active_index == 0
    assert ev.value == pytest.approx(np.sqrt(2.0) - 0.65, abs=1e-12)


def test_road_and_yaw_pieces():
    model = dubins_model()
    env = Environment(
        obstacles=[[100.0, 0.0, 0.5]], road_half_width=1.2, yaw_bound=1.0
    )
    labels = env.piece_labels()
    assert labels == ["obstacle_0", "road", "yaw"]
    # Road piece binds: room = 1.2 - 0.15 - 0.9.
    ev = failure_margin(model, env, np.array([0.0, 0.9, 0.2]))
    assert ev.active_index == 1
    assert ev.value == pytest.approx(0.15, abs=1e-12)
    # Yaw piece binds at large heading.
    ev = failure_margin(model, env, np.array([0.0, 0.0, -0.95]))
    assert ev.active_index == 2
    assert ev.value == pytest.approx(0.05, abs=1e-12)
    assert ev.grad is not None and ev.grad[2] == pytest.approx(1.0)


def test_failure_margin_quadratics_match_finite_differences():
    model = bicycle_model()
    env = Environment(
        obstacles=[[1.0, 0.5, 0.4]], road_half_width=1.5, yaw_bound=1.2
    )
    x = np.array([0.2, -0.3, 0.6, 0.4, -0.1])

    def f(p):
        return failure_margin(model, env, p).value

    ev = failure_margin(model, env, x)
    np.testing.assert_allclose(ev.grad, fd_grad(f, x, 1e-6), atol=1e-6)
    np.testing.assert_allclose(ev.hess, fd_hess(f, x, 1e-4), atol=1e-4)


def test_soft_margin_lower_bounds_hard_minimum_and_converges():
    model = dubins_model()
    obstacles = [[1.0, 0.0, 0.3], [0.0, 1.0, 0.3]]
    hard = Environment(obstacles=obstacles)
    rng = np.random.default_rng(5)
    for _ in range(50):
        x = rng.uniform(-2.0, 2.0, 3)
        v_hard, _ = failure_values(model, hard, x)
        soft = Environment(obstacles=obstacles, soft_margin=True, soft_sharpness=8.0)
        v_soft, _ = failure_values(model, soft, x)
        assert v_soft <= v_hard + 1e-12
        sharp = Environment(
            obstacles=obstacles, soft_margin=True, soft_sharpness=400.0
        )
        v_sharp, _ = failure_values(model, sharp, x)
        assert abs(v_sharp - v_hard) < 5e-3


def test_soft_margin_quadratics_match_finite_differences():
    model = dubins_model()
    env = Environment(
        obstacles=[[1.0, 0.0, 0.3], [0.0, 1.0, 0.3]],
        soft_margin=True,
        soft_sharpness=6.0,
    )
    x = np.array([0.4, 0.5, 0.1])

    def f(p):
        return failure_margin(model, env, p).value

    ev = failure_margin(model, env, x)
    np.testing.assert_allclose(ev.grad, fd_grad(f, x, 1e-6), atol=1e-6)
    np.testing.assert_allclose(ev.hess, fd_hess(f, x, 1e-4), atol=1e-4)


def test_degenerate_center_reports_flag_and_zero_grad():
    model = dubins_model()
    env = Environment(obstacles=[[0.0, 0.0, 0.5]])
    ev = failure_margin(model, env, np.array([0.0, 0.0, 0.0]))
    assert ev.degenerate
    np.testing.assert_array_equal(ev.grad, np.zeros(3))


def test_stopping_rollout_braking_distance():
    model = bicycle_model()
    env = Environment(obstacles=[[50.0, 0.0, 0.5]], stop_target=True)
    x0 = np.array([0.0, 0.0, 0.7, 0.0, 0.0])
    states = stopping_rollout(model, env, x0)
    assert abs(states[-1, 2]) <= 1e-9
    assert states[-1, 0] == pytest.approx(0.49, abs=1e-9)
    # Speed drops by a * dt each step until the final clamp.
    np.testing.assert_allclose(np.diff(states[:-1, 2]), -0.025, atol=1e-12)


def test_stopping_rollout_straightens_wheels():
    model = bicycle_model()
    env = Environment(obstacles=[[50.0, 0.0, 0.5]], stop_target=True)
    x0 = np.array([0.0, 0.0, 0.7, 0.2, 0.4])
    states = stopping_rollout(model, env, x0)
    assert abs(states[-1, 4]) < abs(x0[4])
    assert abs(states[-1, 2]) <= 1e-9


def test_braking_margin_matches_rollout_minimum():
    model = bicycle_model()
    env = Environment(
        obstacles=[[2.0, 0.0, 0.5]], road_half_width=1.2, stop_target=True
    )
    rng = np.random.default_rng(9)
    xs = np.empty((12, 5))
    xs[:, 0] = rng.uniform(-0.5, 1.0, 12)
    xs[:, 1] = rng.uniform(-0.8, 0.8, 12)
    xs[:, 2] = rng.uniform(0.0, 1.0, 12)
    xs[:, 3] = rng.uniform(-0.5, 0.5, 12)
    xs[:, 4] = rng.uniform(-0.3, 0.3, 12)
    batched = braking_margin_values(model, env, xs)
    for i in range(12):
        states = stopping_rollout(model, env, xs[i])
        values, _ = failure_values(model, env, states)
        assert batched[i] == pytest.approx(values.min(), abs=1e-12)
        ev = target_margin(model, env, xs[i], order=0)
        assert ev.value == pytest.approx(values.min(), abs=1e-12)


def test_braking_margin_quadratics_match_independent_differences():
    model = bicycle_model()
    env = Environment(
        obstacles=[[2.0, 0.0, 0.5]], road_half_width=1.5, stop_target=True
    )
    x = np.array([0.0, 0.3, 0.6, 0.1, 0.05])

    def f(p):
        return float(braking_margin_values(model, env, p[None, :])[0])

    ev = target_margin(model, env, x)
    np.testing.assert_allclose(ev.grad, fd_grad(f, x, 3e-4), atol=1e-4)
    np.testing.assert_allclose(ev.hess, fd_hess(f, x, 5e-3), atol=5e-2)


def test_goal_margin_closed_form():
    model = dubins_model()
    env = Environment(obstacles=[[9.0, 9.0, 0.5]], goal=[2.0, 0.0, 0.3])
    x = np.array([1.0, 1.0, 0.7])
    ev = target_margin(model, env, x)
    assert ev.value == pytest.approx(0.3 - np.sqrt(2.0), abs=1e-12)

    def f(p):
        return target_margin(model, env, p, order=0).value

    np.testing.assert_allclose(ev.grad, fd_grad(f, x, 1e-6), atol=1e-6)
    np.testing.assert_allclose(ev.hess, fd_hess(f, x, 1e-4), atol=1e-4)
    vals = target_values(model, env, np.stack([x, x]))
    np.testing.assert_allclose(vals, ev.value)


def test_piece_values_batch_shape():
    model = dubins_model()
    env = Environment(obstacles=[[0.0, 0.0, 0.5]], road_half_width=1.0)
    vals = piece_values(model, env, np.zeros((4, 7, 3)))
    assert vals.shape == (4, 7, 2)


def test_environment_validation():
    with pytest.raises(ConfigError):
        Environment(obstacles=[[0.0, 0.0, -1.0]])
    with pytest.raises(ConfigError):
        Environment(obstacles=[[0.0, 0.0, 1.0]], road_half_width=0.0)
    with pytest.raises(ConfigError):
        Environment(
            obstacles=[[0.0, 0.0, 1.0]], goal=[1.0, 1.0, 0.2], stop_target=True
        )
    with pytest.raises(ConfigError):
        Environment()  # no pieces at all
    with pytest.raises(ConfigError):
        target_margin(
            dubins_model(),
            Environment(obstacles=[[0.0, 0.0, 1.0]]),
            np.zeros(3),
        )


def test_braking_target_rejects_dubins():
    env = Environment(obstacles=[[2.0, 0.0, 0.5]], stop_target=True)
    with pytest.raises(ConfigError):
        stopping_rollout(dubins_model(), env, np.zeros(3))
