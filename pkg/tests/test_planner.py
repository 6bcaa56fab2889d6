import logging

import numpy as np
import pytest

from matsplan import dynamics as dyn
from matsplan import mats, scenes
from matsplan.planner import mpc
from matsplan.planner.loop import closed_loop
from matsplan.planner.path import ReferencePath
from matsplan.planner.tracking import collision_halfplanes, tracking_cost_terms, tracking_errors

VEH, PED = dyn.AgentClass.VEHICLE, dyn.AgentClass.PEDESTRIAN


def straight_path(length=300.0):
    return ReferencePath(np.stack([np.linspace(0, length, 31), np.zeros(31)], axis=1))


def curved_path():
    t = np.linspace(0, np.pi, 40)
    return ReferencePath(np.stack([30 * np.cos(t), 30 * np.sin(t)], axis=1))


@pytest.fixture(scope="module")
def intersection():
    return scenes.build_intersection()


@pytest.fixture(scope="module")
def intersection_log(intersection):
    cfg = mpc.PlannerConfig()
    return closed_loop(cfg, intersection, mpc.ScriptedProvider(intersection, cfg.horizon_steps - 1), 60)


# --- tracking terms -------------------------------------------------------------------

def test_straight_path_errors_reduce_to_axis_offsets():
    path = straight_path()
    e_c, e_l = tracking_errors(path, 12.3, 0.7, 10.0)
    assert e_c == pytest.approx(-0.7, abs=1e-9)
    assert e_l == pytest.approx(-2.3, abs=1e-9)


def test_linearization_is_exact_at_nominal_and_psd():
    path = curved_path()
    rng = np.random.default_rng(0)
    theta = rng.uniform(5, path.length - 5, 8)
    xy = path.xy(theta) + rng.normal(scale=0.8, size=(8, 2))
    terms = tracking_cost_terms(path, xy, theta, 0.5, 0.5)
    e_c, e_l = tracking_errors(path, xy[:, 0], xy[:, 1], theta)
    z = np.column_stack([xy, theta])
    h_c = e_c - np.sum(terms.grad_contour * z, axis=1)
    lin_c = np.sum(terms.grad_contour * z, axis=1) + h_c
    np.testing.assert_allclose(lin_c, e_c, atol=1e-12)
    np.testing.assert_allclose(terms.contour, e_c, atol=1e-12)
    np.testing.assert_allclose(terms.lag, e_l, atol=1e-12)
    # the quadratic model reproduces the weighted squared errors at the nominal
    quad = np.einsum("ti,tij,tj->t", z, terms.gamma, z) + np.sum(terms.linear * z, axis=1)
    const = 0.5 * (e_c - np.sum(terms.grad_contour * z, axis=1)) ** 2 + 0.5 * (
        e_l - np.sum(terms.grad_lag * z, axis=1)) ** 2
    np.testing.assert_allclose(quad + const, 0.5 * e_c**2 + 0.5 * e_l**2, rtol=1e-9, atol=1e-9)
    assert np.all(np.linalg.eigvalsh(terms.gamma) >= -1e-12)


def test_error_gradients_match_finite_differences():
    path = curved_path()
    rng = np.random.default_rng(1)
    for _ in range(10):
        th = rng.uniform(5, path.length - 5)
        x, y = path.xy(th) + rng.normal(scale=1.0, size=2)
        terms = tracking_cost_terms(path, [[x, y]], [th], 1.0, 1.0)
        h = 1e-5
        for k, (dx, dy, dth) in enumerate(np.eye(3)):
            plus = tracking_errors(path, x + h * dx, y + h * dy, th + h * dth)
            minus = tracking_errors(path, x - h * dx, y - h * dy, th - h * dth)
            fd_c = (plus[0] - minus[0]) / (2 * h)
            fd_l = (plus[1] - minus[1]) / (2 * h)
            assert abs(terms.grad_contour[0, k] - fd_c) <= 1e-5 * max(1.0, abs(fd_c))
            assert abs(terms.grad_lag[0, k] - fd_l) <= 1e-5 * max(1.0, abs(fd_l))


def test_theta_outside_path_is_clamped_with_warning(caplog):
    path = straight_path(50.0)
    with caplog.at_level(logging.WARNING):
        terms = tracking_cost_terms(path, [[60.0, 0.0]], [70.0], 0.5, 0.5)
    assert "clamped" in caplog.text
    assert np.isfinite(terms.gamma).all()


# --- half-planes -------------------------------------------------------------------------

def test_halfplane_along_x():
    hp = collision_halfplanes([[10.0, 0.0]], [[[0.0, 0.0]]], 2.0)[0]
    np.testing.assert_allclose(hp.normal, [1.0, 0.0])
    # X >= 2 for an agent at the origin
    assert hp.slack([2.0, 5.0], [0.0, 0.0]) == pytest.approx(0.0)
    assert hp.slack([1.9, 0.0], [0.0, 0.0]) < 0


def test_halfplane_active_at_margin_boundary():
    hp = collision_halfplanes([[0.0, 3.0]], [[[0.0, 1.0]]], 2.0)[0]
    assert hp.slack([0.0, 3.0], [0.0, 1.0]) == pytest.approx(0.0, abs=1e-12)


def test_coincident_points_reuse_previous_normal_or_drop(caplog):
    ego = np.array([[5.0, 0.0], [0.0, 0.0]])
    agents = np.zeros((2, 1, 2))
    hps = collision_halfplanes(ego, agents, 1.0)
    assert len(hps) == 2 and np.allclose(hps[1].normal, hps[0].normal)
    with caplog.at_level(logging.WARNING):
        dropped = collision_halfplanes(ego[::-1], agents, 1.0)
    assert len(dropped) == 1 and "dropped" in caplog.text


def test_nominal_cutting_through_agent_keeps_normal():
    # the nominal passes the agent between steps 1 and 2; the half-plane must not flip
    ego = np.array([[-6.0, 0.0], [-1.0, 0.0], [3.0, 0.0]])
    agents = np.zeros((3, 1, 2))
    hps = collision_halfplanes(ego, agents, 2.0)
    assert all(np.allclose(h.normal, [-1.0, 0.0]) for h in hps)


def test_non_finite_positions_rejected():
    with pytest.raises(ValueError):
        collision_halfplanes([[np.nan, 0.0]], [[[0.0, 0.0]]], 1.0)


# --- QP assembly ---------------------------------------------------------------------------

def _ego_only_system(horizon, dt, ego_state, controls):
    layout = mats.BlockLayout((VEH,), horizon, dt)
    states = dyn.rollout(VEH, ego_state, controls, dt)
    mode = mats.assemble(layout, None, mats.NominalTrajectory(states, controls))
    return mats.MatsSystem(layout, [mode], [1.0])


class EgoOnly:
    def __init__(self, horizon, dt):
        self.horizon, self.dt = horizon, dt

    def __call__(self, world, ego_controls):
        return _ego_only_system(self.horizon, self.dt, world.joint[:4], np.asarray(ego_controls)[: self.horizon])


def test_variable_count_matches_formula_by_enumeration(intersection):
    cfg = mpc.PlannerConfig()
    T, Z = cfg.horizon_steps, cfg.modes_used
    classes = (VEH,) * 10  # F = 40
    layout = mats.BlockLayout(classes, T - 1, cfg.dt)
    F = layout.full_dim
    idx = mpc.PlanIndex(Z, T, F)
    seen = set()
    for z in range(Z):
        for t in range(T):
            seen.update(idx.state(z, t).tolist())
        for t in range(T - 1):
            seen.update(idx.control(z, t).tolist())
    assert F == 40
    assert len(seen) == idx.n == 3 * (12 * 41 + 11 * 3)
    assert seen == set(range(idx.n))


def test_row_groups_have_documented_sizes(intersection, intersection_log):
    cfg = mpc.PlannerConfig()
    plan = intersection_log.plans[3]
    idx = plan.index
    Z, T, D = idx.num_modes, idx.horizon, idx.state_dim
    size = {k: v.stop - v.start for k, v in idx.rows.items()}
    assert size["initial"] == Z * D
    assert size["dynamics"] == Z * (T - 1) * D
    assert size["consensus"] == (Z - 1) * cfg.consensus_steps * 3
    assert size["control_box"] == Z * (T - 1) * 3
    assert size["speed_box"] == Z * (T - 1)
    assert size["collision"] == len(plan.halfplanes) <= Z * (intersection.scene.num_agents - 1) * (T - 1)
    assert plan.problem.m == sum(size.values())


def test_pure_tracking_on_straight_path():
    cfg = mpc.PlannerConfig(modes_used=1)
    path = straight_path()
    provider = EgoOnly(cfg.horizon_steps - 1, cfg.dt)
    world = mpc.WorldState(np.array([10.0, 0.0, 0.0, 8.0]), 10.0, np.array([0.0, 0.0, 8.0]))
    plan = mpc.plan_step(cfg, path, provider, world)
    assert plan.status.value == "Solved"
    assert np.max(np.abs(plan.states[0, :, 1])) < 1e-3
    assert np.max(np.abs(plan.controls[0, :, 0])) < 1e-6
    # progress reward: the plan speeds up towards the limit
    assert plan.states[0, -1, 3] > 8.0


def test_equilibrium_action_at_speed_limit():
    cfg = mpc.PlannerConfig(modes_used=1)
    path = straight_path()
    vmax = cfg.speed_bounds[1]
    world = mpc.WorldState(np.array([10.0, 0.0, 0.0, vmax]), 10.0, np.array([0.0, 0.0, vmax]))
    plan = mpc.plan_step(cfg, path, EgoOnly(cfg.horizon_steps - 1, cfg.dt), world)
    np.testing.assert_allclose(plan.action, [0.0, 0.0], atol=1e-2)


def test_initial_speed_outside_bounds_rejected():
    cfg = mpc.PlannerConfig(modes_used=1)
    world = mpc.WorldState(np.array([10.0, 0.0, 0.0, 20.0]), 10.0, np.zeros(3))
    with pytest.raises(mpc.InfeasibleBoxes):
        mpc.plan_step(cfg, straight_path(), EgoOnly(11, cfg.dt), world)


def test_non_vehicle_ego_rejected():
    layout = mats.BlockLayout((PED,), 11, 0.25)
    mode = mats.assemble(layout)
    system = mats.MatsSystem(layout, [mode], [1.0])
    cfg = mpc.PlannerConfig(modes_used=1)
    nominal = mpc.cold_nominal(cfg, straight_path(), np.array([0.0, 0.0, 0.0, 1.0]), 0.0, 1)
    with pytest.raises(ValueError):
        mpc.build_qp(cfg, straight_path(), system, [0], np.array([0.0, 0.0, 0.0, 1.0]), 0.0, nominal, np.zeros(3))


def test_config_validation():
    with pytest.raises(ValueError):
        mpc.PlannerConfig(consensus_steps=12)
    with pytest.raises(ValueError):
        mpc.PlannerConfig(accel_bounds=(4.0, -5.0))


# --- plan step on the intersection -------------------------------------------------------------

def test_consensus_prefix_equal_every_step(intersection_log):
    cfg = mpc.PlannerConfig()
    for plan in intersection_log.plans:
        assert plan.consensus_gap(cfg.consensus_steps) <= 1e-6


def test_controls_within_bounds(intersection_log):
    cfg = mpc.PlannerConfig()
    for plan in intersection_log.plans:
        assert np.all(plan.controls >= cfg.control_lower - 1e-6)
        assert np.all(plan.controls <= cfg.control_upper + 1e-6)
        v = plan.states[:, 1:, 3]
        assert np.all(v >= cfg.speed_bounds[0] - 1e-6) and np.all(v <= cfg.speed_bounds[1] + 1e-6)


def test_plans_satisfy_all_rows(intersection_log):
    for plan in intersection_log.plans:
        assert mpc.plan_violation(plan) <= 1e-6
        for hp in plan.halfplanes:
            st = plan.states[hp.mode, hp.step]
            blk = slice(4 * hp.agent, 4 * hp.agent + 2)
            assert hp.slack(st[:2], st[blk]) >= -1e-6


def test_dynamics_resimulate_with_linearized_matrices(intersection, intersection_log):
    plan = intersection_log.plans[7]
    cfg = mpc.PlannerConfig()
    nominal = plan.nominal
    for z in range(plan.num_modes):
        for t in range(cfg.horizon_steps - 1):
            lin = dyn.linearize(VEH, nominal.ego[z, t], nominal.controls[z, t, :2], cfg.dt)
            pred = lin(plan.states[z, t, :4], plan.controls[z, t, :2])
            np.testing.assert_allclose(plan.states[z, t + 1, :4], pred, atol=1e-6)
            assert plan.states[z, t + 1, -1] == pytest.approx(
                plan.states[z, t, -1] + cfg.dt * plan.controls[z, t, 2], abs=1e-6)


def test_braking_mode_slows_after_consensus(intersection_log):
    cfg = mpc.PlannerConfig()
    names = ("maintain", "brake", "accelerate")
    plan = intersection_log.plans[10]
    speeds = {names[m]: plan.states[k, :, 3] for k, m in enumerate(plan.modes)}
    tc = cfg.consensus_steps
    np.testing.assert_allclose(speeds["brake"][: tc + 1], speeds["maintain"][: tc + 1], atol=1e-6)
    assert np.all(speeds["brake"][tc + 2:] < speeds["maintain"][tc + 2:])


def test_intersection_closed_loop_has_no_collisions(intersection_log):
    cfg = mpc.PlannerConfig()
    assert not intersection_log.collision
    assert len(intersection_log.records) == 60
    assert intersection_log.min_distance >= cfg.collision_distance
    assert not any(r.degraded for r in intersection_log.records)


def test_sqp_final_objective_not_above_first(intersection_log):
    for plan in intersection_log.plans:
        objs = plan.sqp_objectives
        assert objs[-1] <= objs[0] + 1e-6 * max(1.0, abs(objs[0]))


def test_duplicated_modes_reduce_to_single_mode(intersection):
    cfg1, cfg3 = mpc.PlannerConfig(modes_used=1), mpc.PlannerConfig(modes_used=3)
    base = mpc.ScriptedProvider(intersection, cfg1.horizon_steps - 1)
    dup = mpc.DuplicatedProvider(base, 3)
    a = closed_loop(cfg1, intersection, base, 12, truth_mode=0)
    b = closed_loop(cfg3, intersection, dup, 12, truth_mode=0)
    for pa, pb in zip(a.plans, b.plans):
        assert np.max(np.abs(pb.controls - pa.controls[0][None])) <= 1e-6
        assert np.max(np.abs(pb.states - pa.states[0][None])) <= 1e-6


def test_presolve_removes_uncoupled_agents(intersection_log):
    plan = intersection_log.plans[0]
    info = plan.solution.info
    per_mode_ego = plan.index.horizon * 5 + (plan.index.horizon - 1) * 3
    assert info["reduced_n"] <= plan.num_modes * per_mode_ego


# --- B-coupling ----------------------------------------------------------------------------------

class PushedAgent:
    """Pedestrian ahead of the ego whose acceleration is ``gain`` times the ego's.

    With ``coupled=False`` the agent's control is frozen at its value for a
    coasting ego (zero acceleration) and the prediction no longer responds to
    the plan.
    """

    def __init__(self, gain, coupled, horizon=11, dt=0.25):
        self.gain, self.coupled = gain, coupled
        self.horizon, self.dt = horizon, dt
        self.layout = mats.BlockLayout((VEH, PED), horizon, dt)

    def __call__(self, world, ego_controls):
        u = np.asarray(ego_controls, dtype=float)[: self.horizon]
        joint = np.asarray(world.joint, dtype=float)
        ego = dyn.rollout(VEH, joint[:4], u, self.dt)
        ego_accel = u[:, 1] if self.coupled else np.zeros(self.horizon)
        agent_u = np.column_stack([self.gain * ego_accel, np.zeros(self.horizon)])
        agent = dyn.rollout(PED, joint[4:], agent_u, self.dt)
        nominal_states = np.concatenate([ego, agent], axis=1)
        _, b_di = dyn.double_integrator_matrices(self.dt)
        if self.coupled:
            b = np.zeros((self.horizon, 4, 2))
            b[:, :, 1] = self.gain * b_di[:, 0]
            mode = mats.assemble(self.layout, mats.LearnedBlocks(b={1: b}),
                                 mats.NominalTrajectory(nominal_states, u))
        else:
            mode = mats.assemble(self.layout, None, mats.NominalTrajectory(nominal_states, u, {1: agent_u}))
        return mats.MatsSystem(self.layout, [mode], [1.0])


def _planned_clearance(plan):
    d = np.linalg.norm(plan.states[0, 1:, :2] - plan.states[0, 1:, 4:6], axis=1)
    return float(d.min())


def test_provider_controls_change_predicted_means():
    prov = PushedAgent(3.0, coupled=True)
    world = mpc.WorldState(np.array([0.0, 0.0, 0.0, 8.0, 14.0, 0.0, 1.0, 0.0]), 0.0, np.zeros(3))
    u = np.zeros((11, 2))
    sys_a = prov(world, u)
    u2 = u.copy()
    u2[:, 1] = 2.0
    mean_a = mats.rollout_means(sys_a.modes[0], world.joint, u)
    mean_b = mats.rollout_means(sys_a.modes[0], world.joint, u2)
    assert np.max(np.abs(mean_b[:, 4:6] - mean_a[:, 4:6])) > 1.0


def test_planner_exploits_b_coupling():
    cfg = mpc.PlannerConfig(modes_used=1)
    path = straight_path()
    world = mpc.WorldState(np.array([0.0, 0.0, 0.0, 8.0, 14.0, 0.0, 1.0, 0.0]), 0.0, np.array([0.0, 0.0, 8.0]))
    coupled = mpc.plan_step(cfg, path, PushedAgent(3.0, coupled=True), world)
    fixed = mpc.plan_step(cfg, path, PushedAgent(3.0, coupled=False), world)
    assert coupled.status.value == fixed.status.value == "Solved"
    assert _planned_clearance(coupled) > _planned_clearance(fixed) + 0.5
    # and it gets there by accelerating instead of braking
    assert coupled.controls[0, 0, 1] > fixed.controls[0, 0, 1]


# --- closed loop -------------------------------------------------------------------------------------

def test_empty_road_closed_loop_tracks_path():
    empty = scenes.build_intersection(scenes.IntersectionConfig(
        lead_vehicle=False, n_oncoming=0, n_cross=0, n_pedestrians=0))
    cfg = mpc.PlannerConfig(modes_used=1)
    log = closed_loop(cfg, empty, mpc.ScriptedProvider(empty, cfg.horizon_steps - 1), 40)
    assert not log.collision and len(log.records) == 40
    assert abs(log.records[-1].lag_error) < 0.5
    assert max(abs(r.contour_error) for r in log.records) < 0.05
    assert log.records[-1].ego[0] > log.records[0].ego[0] + 100.0


def test_closed_loop_flags_collision():
    # a stopped car in the lane and a vanishing margin force contact
    sc = scenes.build_intersection(scenes.IntersectionConfig(n_oncoming=0, n_cross=0, n_pedestrians=0,
                                                              lead_speed=0.0, lead_brake_speed=0.0,
                                                              lead_fast_speed=0.0))
    cfg = mpc.PlannerConfig(modes_used=1, margin=0.0, collision_distance=5.0)
    log = closed_loop(cfg, sc, mpc.ScriptedProvider(sc, cfg.horizon_steps - 1), 60)
    assert log.collision and log.collision_step is not None
    assert len(log.records) == log.collision_step + 1
