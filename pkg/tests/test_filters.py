"""Safety-filter tests.

Closed-loop claims are checked on short runs with small horizons so the
whole file stays fast; the long experiment matrix lives in the acceptance
tests. Branch behavior (task passthrough, repair, fallback, override) is
pinned on hand-placed states near a single obstacle.
"""

import math

import numpy as np
import pytest

from cbfddp.dynamics import bicycle_model, clamp_control, dubins_model, step_rk4
from cbfddp.errors import ConfigError
from cbfddp.filters import (
    MODE_FALLBACK,
    MODE_FILTERED,
    MODE_TASK,
    TARGET_ENTRY,
    AffineEntry,
    FallbackStore,
    FilterConfig,
    FilterStores,
    braking_policy,
    build_fallback,
    cbf_ddp_step,
    fallback_control,
    filter_step,
    lr_ddp_step,
    manual_cbf_step,
    rotate_store,
)
from cbfddp.margins import Environment, failure_margin
from cbfddp.reach_avoid_ilq import SolverConfig, solve

DUB = dubins_model()
BIC = bicycle_model()

DUB_SOLVER = SolverConfig(horizon=25, mode="avoid_only")
BIC_SOLVER = SolverConfig(horizon=20, mode="reach_avoid")


def dubins_env(**overrides):
    kwargs = dict(
        obstacles=np.array([[1.5, 0.0, 0.35]]), road_half_width=1.2
    )
    kwargs.update(overrides)
    return Environment(**kwargs)


def bicycle_env(**overrides):
    kwargs = dict(
        obstacles=np.array([[3.0, -0.4, 0.5]]),
        road_half_width=1.2,
        stop_target=True,
    )
    kwargs.update(overrides)
    return Environment(**kwargs)


def test_filter_config_validation():
    with pytest.raises(ConfigError):
        FilterConfig(mode="pid")
    with pytest.raises(ConfigError):
        FilterConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        FilterConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        FilterConfig(lambda_scale=0.99)
    with pytest.raises(ConfigError):
        FilterConfig(max_qcqp_iterations=0)
    with pytest.raises(ConfigError):
        FilterConfig(manual_buffer=-0.1)


def test_braking_policy_sizes_the_last_step():
    policy = braking_policy(BIC, bicycle_env())
    # fast: saturated deceleration
    u = policy(np.array([0.0, 0.0, 0.8, 0.0, 0.1]))
    assert u[0] == pytest.approx(-BIC.control_upper[0])
    assert u[1] == pytest.approx(-2.0 * 0.1)
    # slow: sized to land exactly on v = 0
    u = policy(np.array([0.0, 0.0, 0.01, 0.0, 0.0]))
    assert u[0] == pytest.approx(-0.01 / BIC.dt)
    # resting states are fixed points
    u = policy(np.array([2.0, 0.3, 0.0, 0.5, 0.0]))
    np.testing.assert_array_equal(u, [0.0, 0.0])


def test_braking_policy_clamps_steer():
    policy = braking_policy(BIC, bicycle_env())
    u = policy(np.array([0.0, 0.0, 0.5, 0.0, 2.0]))
    assert u[1] == -BIC.control_upper[1]


def test_fallback_store_validation():
    entry = AffineEntry(
        control=np.zeros(2),
        gains=np.zeros((2, 5)),
        feedforward=np.zeros(2),
        anchor_state=np.zeros(5),
    )
    with pytest.raises(ConfigError):
        FallbackStore(entries=(), target_policy=None, model=BIC)
    with pytest.raises(ConfigError):
        FallbackStore(
            entries=(TARGET_ENTRY, entry), target_policy=None, model=BIC
        )
    with pytest.raises(ConfigError):
        FallbackStore(entries=(entry, "hold"), target_policy=None, model=BIC)
    store = FallbackStore(
        entries=(entry, TARGET_ENTRY), target_policy=None, model=BIC
    )
    assert len(store.entries) == 2


def test_build_fallback_switches_at_the_target_boundary():
    env = bicycle_env()
    x = np.array([0.0, 0.0, 0.8, 0.0, 0.0])
    sol = solve(BIC, env, BIC_SOLVER, x)
    store = build_fallback(sol, env, BIC, braking_policy(BIC, env))
    assert len(store.entries) == BIC_SOLVER.horizon
    from cbfddp.margins import target_values

    ell = target_values(BIC, env, sol.nominal_states[: BIC_SOLVER.horizon])
    switch = next(
        (t for t in range(BIC_SOLVER.horizon) if ell[t] >= 0.0),
        BIC_SOLVER.horizon,
    )
    for t, entry in enumerate(store.entries):
        if t < switch:
            assert isinstance(entry, AffineEntry)
            np.testing.assert_array_equal(
                entry.control, sol.nominal_controls[t]
            )
        else:
            assert entry == TARGET_ENTRY


def test_fallback_control_replays_the_affine_law():
    anchor = np.array([1.0, 0.5, 0.6, 0.0, 0.0])
    entry = AffineEntry(
        control=np.array([0.2, 0.1]),
        gains=np.eye(2, 5) * 0.5,
        feedforward=np.array([0.05, 0.0]),
        anchor_state=anchor,
    )
    store = FallbackStore(
        entries=(entry, TARGET_ENTRY),
        target_policy=lambda x: np.array([9.0, -9.0]),
        model=BIC,
    )
    u = fallback_control(store, anchor, 0)
    np.testing.assert_allclose(u, [0.25, 0.1])
    shifted = anchor + np.array([0.1, 0.2, 0.0, 0.0, 0.0])
    u = fallback_control(store, shifted, 0)
    np.testing.assert_allclose(u, [0.25 + 0.05, 0.1 + 0.1])
    # target entries defer to the target policy, clamped to the box
    u = fallback_control(store, anchor, 1)
    np.testing.assert_array_equal(u, [BIC.control_upper[0], -BIC.control_upper[1]])
    with pytest.raises(ConfigError):
        fallback_control(store, anchor, 2)
    with pytest.raises(ConfigError):
        fallback_control(store, anchor, -1)


def test_rotate_store_shifts_and_repeats():
    entry = AffineEntry(
        control=np.zeros(2),
        gains=np.zeros((2, 5)),
        feedforward=np.zeros(2),
        anchor_state=np.zeros(5),
    )
    store = FallbackStore(
        entries=(entry, TARGET_ENTRY), target_policy=None, model=BIC
    )
    rotated = rotate_store(store)
    assert rotated.entries == (TARGET_ENTRY, TARGET_ENTRY)
    assert rotate_store(rotated).entries == (TARGET_ENTRY, TARGET_ENTRY)


def test_deep_safe_state_passes_task_control_through():
    env = dubins_env()
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.8, max_qcqp_iterations=2)
    stores = FilterStores()
    x = np.array([-3.0, 0.0, 0.0])
    u_task = np.array([0.05])
    dec = cbf_ddp_step(x, u_task, stores, env, DUB, cfg, DUB_SOLVER)
    assert dec.mode_applied == MODE_TASK
    np.testing.assert_array_equal(dec.u_exec, u_task)
    assert dec.qcqp_iterations_used == 0
    assert dec.delta_u_norm == 0.0
    assert dec.v_next >= cfg.gamma * dec.v_current
    assert stores.plan_controls.shape == (DUB_SOLVER.horizon, 1)


def test_repair_improves_on_the_raw_candidate():
    # head-on at the obstacle: the task control decays the value too fast
    env = dubins_env()
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.99, max_qcqp_iterations=3)
    stores = FilterStores()
    x = np.array([0.3, 0.0, 0.0])
    u_task = np.array([0.0])
    raw = solve(DUB, env, DUB_SOLVER, step_rk4(DUB, x, u_task))
    dec = cbf_ddp_step(x, u_task, stores, env, DUB, cfg, DUB_SOLVER)
    assert dec.mode_applied == MODE_FILTERED
    assert dec.delta_u_norm > 0.0
    assert dec.qcqp_iterations_used >= 1
    assert dec.v_next >= 0.0
    assert dec.v_next + 1e-9 >= raw.root_value.value


def test_fallback_mode_exactly_when_final_value_is_negative():
    env = dubins_env()
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.9, max_qcqp_iterations=2)
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = np.array(
            [
                rng.uniform(0.2, 2.4),
                rng.uniform(-0.9, 0.9),
                rng.uniform(-math.pi, math.pi),
            ]
        )
        u_task = np.array([rng.uniform(-1.0, 1.0)])
        dec = cbf_ddp_step(
            x, u_task, FilterStores(), env, DUB, cfg, DUB_SOLVER
        )
        assert (dec.mode_applied == MODE_FALLBACK) == (dec.v_next < 0.0)
        if dec.mode_applied == MODE_TASK:
            assert dec.delta_u_norm == 0.0


def test_avoid_only_filtering_keeps_no_fallback_store():
    env = dubins_env()
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.9, max_qcqp_iterations=2)
    stores = FilterStores()
    x = np.array([-0.5, 0.0, 0.0])
    for _ in range(8):
        dec = cbf_ddp_step(
            x, np.array([0.0]), stores, env, DUB, cfg, DUB_SOLVER
        )
        x = step_rk4(DUB, x, dec.u_exec)
    assert stores.fallback is None


def test_reach_avoid_fallback_executes_and_rotates_the_store():
    env = bicycle_env()
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.95, max_qcqp_iterations=3)
    stores = FilterStores()
    safe = np.array([0.0, 0.0, 0.8, 0.0, 0.0])
    dec = cbf_ddp_step(safe, np.array([0.1, 0.0]), stores, env, BIC, cfg, BIC_SOLVER)
    assert dec.mode_applied in (MODE_TASK, MODE_FILTERED)
    assert stores.fallback is not None
    old_store = stores.fallback
    # inside the obstacle no repair can help; the stored policy takes over
    doomed = np.array([3.0, -0.4, 0.8, 0.0, 0.0])
    expected = fallback_control(old_store, doomed, 0)
    dec = cbf_ddp_step(
        doomed, np.array([0.1, 0.0]), stores, env, BIC, cfg, BIC_SOLVER
    )
    assert dec.mode_applied == MODE_FALLBACK
    assert dec.v_next < 0.0
    np.testing.assert_array_equal(dec.u_exec, expected)
    assert stores.fallback.entries[0] == old_store.entries[1]


def test_fallback_without_a_store_uses_the_current_plan_head():
    env = bicycle_env()
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.95, max_qcqp_iterations=2)
    stores = FilterStores()
    doomed = np.array([3.0, -0.4, 0.8, 0.0, 0.0])
    dec = cbf_ddp_step(
        doomed, np.array([0.1, 0.0]), stores, env, BIC, cfg, BIC_SOLVER
    )
    assert dec.mode_applied == MODE_FALLBACK
    assert stores.fallback is None
    assert np.all(np.abs(dec.u_exec) <= BIC.control_upper + 1e-12)


def test_lr_task_branch_is_exact_passthrough():
    env = dubins_env()
    stores = FilterStores()
    x = np.array([-3.0, 0.0, 0.0])
    u_task = np.array([0.2])
    dec = lr_ddp_step(x, u_task, env, DUB, DUB_SOLVER, stores=stores)
    assert dec.mode_applied == MODE_TASK
    np.testing.assert_array_equal(dec.u_exec, u_task)
    assert math.isnan(dec.v_current)
    assert dec.v_next >= 0.0
    assert dec.delta_u_norm == 0.0
    # the stored plan certifies the state the task control reaches
    x1 = step_rk4(DUB, x, dec.u_exec)
    recheck = solve(DUB, env, DUB_SOLVER, x1, warm_start=stores.plan_controls)
    assert recheck.root_value.value >= -1e-9


def test_lr_override_reaches_a_certified_state():
    env = dubins_env()
    stores = FilterStores()
    x = np.array([-0.5, 0.0, 0.0])
    saw_override = False
    for _ in range(40):
        u_task = np.array([0.0])  # press straight at the obstacle
        dec = lr_ddp_step(x, u_task, env, DUB, DUB_SOLVER, stores=stores)
        assert failure_margin(DUB, env, x, order=0).value >= 0.0
        if dec.mode_applied == MODE_FALLBACK:
            saw_override = True
            assert dec.v_next < 0.0
            assert not math.isnan(dec.v_current)
            x1 = step_rk4(DUB, x, dec.u_exec)
            recheck = solve(DUB, env, DUB_SOLVER, x1)
            assert recheck.root_value.value >= -1e-9
            break
        x = step_rk4(DUB, x, dec.u_exec)
    assert saw_override


def test_lr_check_survives_a_poisoned_warm_start():
    env = dubins_env()
    stores = FilterStores()
    # a constant hard-left plan curls off the road; its value is negative,
    # so only a retried solve can certify this obviously safe cruise
    stores.plan_controls = np.full((DUB_SOLVER.horizon, 1), 1.0)
    x = np.array([-3.0, 0.0, 0.0])
    dec = lr_ddp_step(x, np.array([0.0]), env, DUB, DUB_SOLVER, stores=stores)
    assert dec.mode_applied == MODE_TASK
    assert dec.v_next >= 0.0


def test_cbf_run_stays_out_of_fallback_on_a_passable_course():
    from cbfddp.task_policies import TaskPolicyConfig, task_policy

    env = Environment(
        obstacles=np.array([[2.0, 0.1, 0.3]]), road_half_width=1.5
    )
    solver = SolverConfig(horizon=40, mode="avoid_only")
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.95, max_qcqp_iterations=2)
    policy = task_policy(DUB, TaskPolicyConfig(goal_point=(4.0, 0.0)))
    stores = FilterStores()
    x = np.array([0.0, 0.0, 0.0])
    for _ in range(60):
        dec = cbf_ddp_step(x, policy(x), stores, env, DUB, cfg, solver)
        assert dec.mode_applied != MODE_FALLBACK
        assert dec.v_current > 0.0
        assert failure_margin(DUB, env, x, order=0).value >= 0.0
        x = step_rk4(DUB, x, dec.u_exec)


def test_manual_far_from_the_obstacle_is_task():
    env = dubins_env()
    cfg = FilterConfig(mode="manual_cbf", gamma=0.9)
    x = np.array([-3.0, 0.0, 0.0])
    u_task = np.array([0.1])
    dec = manual_cbf_step(x, u_task, env, DUB, cfg)
    assert dec.mode_applied == MODE_TASK
    np.testing.assert_array_equal(dec.u_exec, u_task)
    assert dec.qcqp_iterations_used == 0
    assert dec.v_next >= cfg.gamma * dec.v_current


def test_manual_grazing_gets_a_small_feasible_correction():
    # skimming the buffered boundary while curling inward: the violation is
    # tiny, so the one-step linear program repairs it without saturating
    env = dubins_env()
    cfg = FilterConfig(mode="manual_cbf", gamma=0.999)
    x = np.array([1.5, -0.72, 0.0])
    dec = manual_cbf_step(x, np.array([1.0]), env, DUB, cfg)
    assert dec.mode_applied == MODE_FILTERED
    assert 0.0 < dec.delta_u_norm < 0.5
    assert dec.v_next >= cfg.gamma * dec.v_current - 1e-9


def test_manual_fallback_steers_away_from_the_obstacle():
    env = dubins_env()
    cfg = FilterConfig(mode="manual_cbf", gamma=0.999, manual_buffer=0.5)
    # inside the buffer pointed straight in: turning barely moves the next
    # position, so no linear correction suffices
    x = np.array([0.52, 0.05, 0.0])
    dec = manual_cbf_step(x, np.array([0.0]), env, DUB, cfg)
    assert dec.mode_applied == MODE_FALLBACK
    # obstacle center is ahead-right, so the escape turn is counterclockwise
    np.testing.assert_array_equal(dec.u_exec, [DUB.control_upper[0]])


def test_manual_activation_distance_grows_with_gamma():
    def first_deviation(gamma):
        env = dubins_env()
        cfg = FilterConfig(mode="manual_cbf", gamma=gamma)
        x = np.array([-1.5, 0.05, 0.0])
        for _ in range(80):
            u_task = np.array([0.0])
            dec = manual_cbf_step(x, u_task, env, DUB, cfg)
            if dec.delta_u_norm > 1e-12:
                return float(np.hypot(x[0] - 1.5, x[1]))
            x = step_rk4(DUB, x, dec.u_exec)
        return 0.0

    assert first_deviation(0.95) > first_deviation(0.5) > 0.0


def test_manual_rejects_wrong_model_and_obstacle_count():
    cfg = FilterConfig(mode="manual_cbf")
    with pytest.raises(ConfigError):
        manual_cbf_step(
            np.zeros(5), np.zeros(2), bicycle_env(), BIC, cfg
        )
    env = dubins_env(
        obstacles=np.array([[1.5, 0.0, 0.35], [3.0, 0.0, 0.2]])
    )
    with pytest.raises(ConfigError):
        manual_cbf_step(np.zeros(3), np.zeros(1), env, DUB, cfg)


def test_filter_step_none_mode_clamps_and_passes_through():
    env = dubins_env()
    cfg = FilterConfig(mode="none")
    dec = filter_step(
        np.array([0.0, 0.0, 0.0]),
        np.array([3.0]),
        FilterStores(),
        env,
        DUB,
        cfg,
        DUB_SOLVER,
    )
    assert dec.mode_applied == MODE_TASK
    np.testing.assert_array_equal(dec.u_exec, [DUB.control_upper[0]])
    assert math.isnan(dec.v_current) and math.isnan(dec.v_next)


def test_cbf_cycles_are_deterministic():
    env = dubins_env()
    cfg = FilterConfig(mode="cbf_ddp", gamma=0.95, max_qcqp_iterations=2)
    x = np.array([0.4, 0.1, 0.2])
    u_task = np.array([0.3])
    a = cbf_ddp_step(x, u_task, FilterStores(), env, DUB, cfg, DUB_SOLVER)
    b = cbf_ddp_step(x, u_task, FilterStores(), env, DUB, cfg, DUB_SOLVER)
    np.testing.assert_array_equal(a.u_exec, b.u_exec)
    assert a.v_current == b.v_current
    assert a.v_next == b.v_next
    assert a.mode_applied == b.mode_applied
    assert a.qcqp_iterations_used == b.qcqp_iterations_used
