"""Consensus-horizon multimodal MPC assembled as one sparse convex QP.

Variable layout
---------------
Each mode ``z`` owns a contiguous block of ``T (F + 1) + (T - 1) 3``
variables: the joint states ``s_z^0 .. s_z^{T-1}`` (the MATS joint state with
the path parameter ``theta`` appended, so ``F + 1`` entries each) followed by
the controls ``u_z^0 .. u_z^{T-2}`` with ``u = (omega, a, v_s)``. The total is
``n = Z (T (F + 1) + (T - 1) 3)``.

Constraint rows, in order:

* ``initial``     ``Z (F + 1)``             ``s_z^0`` fixed to the measured state
* ``dynamics``    ``Z (T - 1) (F + 1)``     linearized unicycle for the ego, the
  mode's affine rows for every other agent, ``theta' = theta + v_s dt``
* ``consensus``   ``(Z - 1) t_c 3``         ``u_z^t = u_0^t`` for ``t < t_c``
* ``control_box`` ``Z (T - 1) 3``
* ``speed_box``   ``Z (T - 1)``             ego speed for ``t >= 1``
* ``collision``   one row per half-plane    ``t >= 1``; at most ``Z K (T - 1)``
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from matsplan import dynamics as dyn
from matsplan import mats, qp
from matsplan.planner.path import ReferencePath
from matsplan.planner.tracking import collision_halfplanes, tracking_cost_terms

logger = logging.getLogger(__name__)

EGO_DIM = 4
CONTROL_DIM = 3  # omega, a, v_s
BOX_SLACK = 1e-6


class InfeasibleBoxes(ValueError):
    """The measured state already violates the state bounds."""


def planner_qp_settings() -> qp.QpSettings:
    """Solver settings for planning QPs.

    Presolve removes agents whose predictions do not depend on the ego, and
    early polishing stops as soon as the active set is identified, which
    gives solutions exact to rounding.
    """
    return qp.QpSettings(eps_abs=1e-6, eps_rel=1e-6, scaling_iters=3, presolve=True, early_polish=True)


@dataclass
class PlannerConfig:
    horizon_steps: int = 12
    dt: float = 0.25
    consensus_steps: int = 4
    modes_used: int = 3
    omega_bounds: tuple = (-0.7, 0.7)
    accel_bounds: tuple = (-5.0, 4.0)
    speed_bounds: tuple = (0.05, 12.0)
    progress_bounds: tuple = (0.0, 12.0)
    q_contour: float = 0.5
    q_lag: float = 0.5
    q_slew: float = 0.01
    progress_reward: float = 0.02
    margin: float = 2.0
    collision_distance: float = 2.0
    sqp_iters: int = 2
    probability_weighted: bool = False
    qp_settings: qp.QpSettings = field(default_factory=lambda: planner_qp_settings())

    def __post_init__(self):
        if self.horizon_steps < 2:
            raise ValueError("horizon_steps must be at least 2")
        if not 0 < self.consensus_steps < self.horizon_steps:
            raise ValueError("need 0 < consensus_steps < horizon_steps")
        if self.modes_used < 1 or self.sqp_iters < 1:
            raise ValueError("modes_used and sqp_iters must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("omega_bounds", "accel_bounds", "speed_bounds", "progress_bounds"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be ordered")
            setattr(self, name, (float(lo), float(hi)))
        if min(self.q_contour, self.q_lag, self.q_slew) < 0 or self.margin < 0:
            raise ValueError("weights and margin must be non-negative")

    @property
    def control_lower(self) -> np.ndarray:
        return np.array([self.omega_bounds[0], self.accel_bounds[0], self.progress_bounds[0]])

    @property
    def control_upper(self) -> np.ndarray:
        return np.array([self.omega_bounds[1], self.accel_bounds[1], self.progress_bounds[1]])


@dataclass(frozen=True)
class PlanIndex:
    """Maps (mode, step) to variable indices and names the constraint row groups."""

    num_modes: int
    horizon: int
    joint_dim: int  # F, without theta
    rows: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.joint_dim + 1

    @property
    def per_mode(self) -> int:
        return self.horizon * self.state_dim + (self.horizon - 1) * CONTROL_DIM

    @property
    def n(self) -> int:
        return self.num_modes * self.per_mode

    def state(self, z: int, t: int) -> np.ndarray:
        start = z * self.per_mode + t * self.state_dim
        return np.arange(start, start + self.state_dim)

    def theta(self, z: int, t: int) -> int:
        return z * self.per_mode + t * self.state_dim + self.joint_dim

    def control(self, z: int, t: int) -> np.ndarray:
        start = z * self.per_mode + self.horizon * self.state_dim + t * CONTROL_DIM
        return np.arange(start, start + CONTROL_DIM)

    def unpack(self, x) -> tuple:
        """Split a solution vector into states ``(Z, T, F+1)`` and controls ``(Z, T-1, 3)``."""
        x = np.asarray(x)
        blocks = x.reshape(self.num_modes, self.per_mode)
        ns = self.horizon * self.state_dim
        states = blocks[:, :ns].reshape(self.num_modes, self.horizon, self.state_dim)
        controls = blocks[:, ns:].reshape(self.num_modes, self.horizon - 1, CONTROL_DIM)
        return states, controls


@dataclass
class Nominal:
    """Per-mode linearization points: ego states ``(Z, T, 4)``, ego controls ``(Z, T-1, 3)``, theta ``(Z, T)``."""

    ego: np.ndarray
    controls: np.ndarray
    theta: np.ndarray


class _Rows:
    """Accumulates COO triplets and bounds row by row."""

    def __init__(self):
        self.i, self.j, self.v = [], [], []
        self.lower, self.upper = [], []
        self.m = 0

    def add(self, cols, vals, lo, hi):
        self.add_block(np.atleast_2d(cols), np.atleast_2d(vals), [lo], [hi])

    def add_block(self, cols, vals, lo, hi):
        """Rows with per-row column index arrays; ``cols`` and ``vals`` are ``(r, k)``."""
        cols = np.asarray(cols)
        vals = np.asarray(vals, dtype=float)
        r = cols.shape[0]
        keep = vals != 0.0
        rows = np.broadcast_to(np.arange(self.m, self.m + r)[:, None], cols.shape)
        self.i.append(rows[keep])
        self.j.append(cols[keep])
        self.v.append(vals[keep])
        self.lower.append(np.broadcast_to(np.asarray(lo, dtype=float), (r,)))
        self.upper.append(np.broadcast_to(np.asarray(hi, dtype=float), (r,)))
        self.m += r

    def matrix(self, n: int):
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt)) if self.i else (lambda xs, dt: np.zeros(0, dt))
        a = sp.csc_matrix((cat(self.v, float), (cat(self.i, int), cat(self.j, int))), shape=(self.m, n))
        return a, cat(self.lower, float), cat(self.upper, float)


def _check_initial(config: PlannerConfig, joint_state) -> None:
    v = joint_state[3]
    lo, hi = config.speed_bounds
    if v < lo - BOX_SLACK or v > hi + BOX_SLACK:
        raise InfeasibleBoxes(f"ego speed {v:.4f} outside [{lo}, {hi}]")


def build_qp(config: PlannerConfig, path: ReferencePath, system: mats.MatsSystem, modes, joint_state,
             theta0: float, nominal: Nominal, last_control, halfplanes=()) -> tuple:
    """Assemble the multimodal QP; returns ``(QpProblem, PlanIndex)``.

    ``modes`` selects which of the system's modes are planned for (one plan
    per entry); ``halfplanes`` refer to slots in that list.
    """
    layout = system.layout
    if layout.classes[0] is not dyn.AgentClass.VEHICLE:
        raise ValueError("planner ego must be a vehicle")
    T = config.horizon_steps
    if layout.horizon < T - 1:
        raise ValueError(f"prediction horizon {layout.horizon} shorter than {T - 1} planning steps")
    joint_state = np.asarray(joint_state, dtype=float)
    _check_initial(config, joint_state)
    F = layout.full_dim
    Z = len(modes)
    idx = PlanIndex(Z, T, F)
    dt = config.dt
    n = idx.n

    weights = np.full(Z, 1.0 / Z)
    if config.probability_weighted:
        p = np.array([system.mode_probs[m] for m in modes])
        weights = p / p.sum()

    # --- objective ------------------------------------------------------------
    p_i, p_j, p_v = [], [], []
    q = np.zeros(n)

    def add_p(rows, cols, block):
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        p_i.append(rr.ravel())
        p_j.append(cc.ravel())
        p_v.append(np.asarray(block, dtype=float).ravel())

    last_control = np.asarray(last_control, dtype=float)
    eye = np.eye(CONTROL_DIM)
    for z in range(Z):
        w = weights[z]
        terms = tracking_cost_terms(path, nominal.ego[z, 1:, :2], nominal.theta[z, 1:], config.q_contour, config.q_lag)
        for t in range(1, T):
            cols = np.array([idx.state(z, t)[0], idx.state(z, t)[1], idx.theta(z, t)])
            add_p(cols, cols, 2.0 * w * terms.gamma[t - 1])
            q[cols] += w * terms.linear[t - 1]
        slew = 2.0 * w * config.q_slew
        u0 = idx.control(z, 0)
        add_p(u0, u0, slew * eye)
        q[u0] -= slew * last_control
        for t in range(1, T - 1):
            ua, ub = idx.control(z, t - 1), idx.control(z, t)
            add_p(ua, ua, slew * eye)
            add_p(ub, ub, slew * eye)
            add_p(ua, ub, -slew * eye)
            add_p(ub, ua, -slew * eye)
        for t in range(T - 1):
            q[idx.control(z, t)[2]] -= w * config.progress_reward
    p_mat = sp.csc_matrix((np.concatenate(p_v), (np.concatenate(p_i), np.concatenate(p_j))), shape=(n, n))
    p_mat = 0.5 * (p_mat + p_mat.T)

    # --- constraints ------------------------------------------------------------
    rows = _Rows()
    groups = {}
    init = np.concatenate([joint_state, [theta0]])

    start = rows.m
    for z in range(Z):
        rows.add_block(idx.state(z, 0)[:, None], np.ones((F + 1, 1)), init, init)
    groups["initial"] = slice(start, rows.m)

    start = rows.m
    agent_rows = np.arange(EGO_DIM, F)
    for z, mode_id in enumerate(modes):
        mode = system.modes[mode_id]
        for t in range(T - 1):
            s_now, s_next, u_now = idx.state(z, t), idx.state(z, t + 1), idx.control(z, t)
            lin = dyn.linearize(dyn.AgentClass.VEHICLE, nominal.ego[z, t], nominal.controls[z, t, :2], dt)
            # ego: A s + B u - s' = -c
            cols = np.concatenate([np.broadcast_to(s_now[:EGO_DIM], (EGO_DIM, EGO_DIM)),
                                   np.broadcast_to(u_now[:2], (EGO_DIM, 2)), s_next[:EGO_DIM, None]], axis=1)
            vals = np.concatenate([lin.a_mat, lin.b_mat, -np.ones((EGO_DIM, 1))], axis=1)
            rows.add_block(cols, vals, -lin.c_vec, -lin.c_vec)
            # agents: mode rows act on the joint state (ego columns included) and the ego controls
            if len(agent_rows):
                k = len(agent_rows)
                cols = np.concatenate([np.broadcast_to(s_now[:F], (k, F)), np.broadcast_to(u_now[:2], (k, 2)),
                                       s_next[agent_rows, None]], axis=1)
                vals = np.concatenate([mode.a_seq[t][agent_rows], mode.b_seq[t][agent_rows], -np.ones((k, 1))], axis=1)
                c = mode.c_seq[t][agent_rows]
                rows.add_block(cols, vals, -c, -c)
            rows.add([idx.theta(z, t), u_now[2], idx.theta(z, t + 1)], [1.0, dt, -1.0], 0.0, 0.0)
    groups["dynamics"] = slice(start, rows.m)

    start = rows.m
    for z in range(1, Z):
        for t in range(config.consensus_steps):
            cols = np.stack([idx.control(z, t), idx.control(0, t)], axis=1)
            vals = np.tile([1.0, -1.0], (CONTROL_DIM, 1))
            rows.add_block(cols, vals, np.zeros(CONTROL_DIM), np.zeros(CONTROL_DIM))
    groups["consensus"] = slice(start, rows.m)

    start = rows.m
    for z in range(Z):
        for t in range(T - 1):
            rows.add_block(idx.control(z, t)[:, None], np.ones((CONTROL_DIM, 1)),
                           config.control_lower, config.control_upper)
    groups["control_box"] = slice(start, rows.m)

    start = rows.m
    for z in range(Z):
        for t in range(1, T):
            rows.add([idx.state(z, t)[3]], [1.0], config.speed_bounds[0], config.speed_bounds[1])
    groups["speed_box"] = slice(start, rows.m)

    start = rows.m
    for hp in halfplanes:
        st = idx.state(hp.mode, hp.step)
        ag = layout.block(hp.agent)
        cols = [st[0], st[1], st[ag.start], st[ag.start + 1]]
        vals = [hp.normal[0], hp.normal[1], -hp.normal[0], -hp.normal[1]]
        rows.add(cols, vals, hp.margin, qp.INF)
    groups["collision"] = slice(start, rows.m)

    a_mat, lower, upper = rows.matrix(n)
    problem = qp.QpProblem(p_mat, q, a_mat, lower, upper)
    object.__setattr__(idx, "rows", groups)
    return problem, idx


# --- providers ------------------------------------------------------------------

@dataclass
class WorldState:
    """What the planner observes: the joint state, path progress and last applied control."""

    joint: np.ndarray
    theta: float
    last_control: np.ndarray
    history: np.ndarray | None = None


class ScriptedProvider:
    """Exact multimodal predictions for a scripted scenario (agents ignore the ego)."""

    def __init__(self, scenario, horizon: int):
        self.scenario = scenario
        self.horizon = int(horizon)
        self.layout = mats.BlockLayout(scenario.classes, self.horizon, scenario.config.dt)

    def __call__(self, world: WorldState, ego_controls) -> mats.MatsSystem:
        joint = np.asarray(world.joint, dtype=float)
        u = np.asarray(ego_controls, dtype=float)[: self.horizon]
        dt = self.layout.dt
        ego_nom = dyn.rollout(dyn.AgentClass.VEHICLE, joint[:EGO_DIM], u, dt)
        agents = joint[EGO_DIM:].reshape(-1, dyn.STATE_DIM)
        modes = []
        for z in range(len(self.scenario.mode_probs)):
            fut, ctrl = self.scenario.scripted_future(agents, z, self.horizon)
            states = np.concatenate([ego_nom, fut.reshape(self.horizon + 1, -1)], axis=1)
            nominal = mats.NominalTrajectory(states, u, {k + 1: ctrl[:, k] for k in range(len(agents))})
            modes.append(mats.assemble(self.layout, None, nominal))
        return mats.MatsSystem(self.layout, modes, np.asarray(self.scenario.mode_probs, dtype=float))


class DuplicatedProvider:
    """Repeats one mode of another provider ``copies`` times with equal probability."""

    def __init__(self, base, copies: int, mode: int | None = None):
        self.base, self.copies, self.mode = base, int(copies), mode
        self.horizon = base.horizon

    def __call__(self, world: WorldState, ego_controls) -> mats.MatsSystem:
        system = self.base(world, ego_controls)
        z = system.top_modes(1)[0] if self.mode is None else self.mode
        return mats.MatsSystem(system.layout, [system.modes[z]] * self.copies, np.full(self.copies, 1.0 / self.copies))


class ModelProvider:
    """Predictions from a fitted model; needs ``world.history`` of the model's history length."""

    def __init__(self, model, history_controls=None):
        self.model = model
        self.history_controls = history_controls
        self.horizon = model.horizon

    def __call__(self, world: WorldState, ego_controls) -> mats.MatsSystem:
        from matsplan import fitter

        u = np.asarray(ego_controls, dtype=float)
        if len(u) < self.horizon:
            u = np.vstack([u, np.repeat(u[-1:], self.horizon - len(u), axis=0)])
        return fitter.predict(self.model, world.history, u[: self.horizon], self.history_controls)


# --- SQP step ---------------------------------------------------------------------

@dataclass
class PlanResult:
    states: np.ndarray  # (Z, T, F+1), theta last
    controls: np.ndarray  # (Z, T-1, 3)
    objective: float
    status: qp.Status
    solve_time: float  # seconds, summed over QP solves
    qp_times: list
    modes: list
    mode_probs: np.ndarray
    degraded: bool
    halfplanes: list
    sqp_objectives: list
    index: PlanIndex
    problem: qp.QpProblem
    solution: qp.QpSolution
    nominal: Nominal

    @property
    def action(self) -> np.ndarray:
        """The first consensus control ``(omega, a)`` to execute."""
        return self.controls[0, 0, :2]

    @property
    def num_modes(self) -> int:
        return self.controls.shape[0]

    def consensus_gap(self, steps: int) -> float:
        if self.num_modes < 2:
            return 0.0
        pre = self.controls[:, :steps]
        return float(np.max(np.abs(pre - pre[:1])))


def cold_nominal(config: PlannerConfig, path: ReferencePath, joint_state, theta0: float, num_modes: int) -> Nominal:
    """Evenly spaced path points at the current speed, shared by every mode."""
    T, dt = config.horizon_steps, config.dt
    v0 = float(np.clip(joint_state[3], *config.speed_bounds))
    theta = np.minimum(theta0 + v0 * dt * np.arange(T), path.length)
    pt = path(theta)
    ego = np.stack([pt.x, pt.y, pt.heading, np.full(T, v0)], axis=1)
    ego[0] = joint_state[:EGO_DIM]
    # keep the heading branch continuous with the measured heading
    ego[1:, 2] += 2 * np.pi * np.round((ego[0, 2] - ego[1, 2]) / (2 * np.pi))
    omega = np.clip(np.diff(ego[:, 2]) / dt, *config.omega_bounds)
    controls = np.stack([omega, np.zeros(T - 1), np.full(T - 1, v0)], axis=1)
    return Nominal(np.repeat(ego[None], num_modes, 0), np.repeat(controls[None], num_modes, 0),
                   np.repeat(theta[None], num_modes, 0))


def shifted_nominal(config: PlannerConfig, previous: "PlanResult", joint_state, theta0: float) -> Nominal:
    """Previous solution advanced by one step, re-simulated from the measured state."""
    ctrl = np.concatenate([previous.controls[:, 1:], previous.controls[:, -1:]], axis=1)
    return _nominal_from_controls(config, ctrl, joint_state, theta0)


def _nominal_from_controls(config: PlannerConfig, controls, joint_state, theta0: float) -> Nominal:
    Z, dt = controls.shape[0], config.dt
    ego = np.stack([dyn.rollout(dyn.AgentClass.VEHICLE, joint_state[:EGO_DIM], controls[z, :, :2], dt)
                    for z in range(Z)])
    theta = theta0 + np.concatenate([np.zeros((Z, 1)), np.cumsum(controls[:, :, 2] * dt, axis=1)], axis=1)
    return Nominal(ego, np.array(controls, dtype=float), theta)


def _agent_means(system: mats.MatsSystem, mode_id: int, joint_state, ego_controls, steps: int) -> np.ndarray:
    """Predicted agent positions ``(steps, K, 2)`` for planning steps ``0 .. steps-1``."""
    u = np.asarray(ego_controls)[: system.layout.horizon]
    means = mats.rollout_means(system.modes[mode_id], joint_state, u)
    traj = np.vstack([joint_state[None], means])[:steps]
    return system.layout.positions(traj)[:, 1:]


def _halfplanes(config, system, modes, joint_state, nominal, margin):
    out = []
    for z, mode_id in enumerate(modes):
        agents = _agent_means(system, mode_id, joint_state, nominal.controls[z, :, :2], config.horizon_steps)
        if agents.shape[1] == 0:
            continue
        out += collision_halfplanes(nominal.ego[z, :, :2], agents, margin, mode=z,
                                    steps=range(1, config.horizon_steps))
    return out


def _timed_solve(problem: qp.QpProblem, settings: qp.QpSettings, warm_xy) -> tuple:
    """Solve and return the solution with wall time covering presolve, scaling and factorization."""
    t0 = time.perf_counter()
    sol = qp.QpSolver(problem, settings).solve(_fit_warm(warm_xy, problem))
    return sol, time.perf_counter() - t0


def _fit_warm(warm_xy, problem):
    if warm_xy is None or len(warm_xy[0]) != problem.n:
        return None
    x, y = warm_xy
    return x, (y if y is not None and len(y) == problem.m else None)


def plan_step(config: PlannerConfig, path: ReferencePath, provider, world: WorldState,
              warm: PlanResult | None = None) -> PlanResult:
    """Run the SQP loop for one receding-horizon step."""
    joint = np.asarray(world.joint, dtype=float)
    _check_initial(config, joint)
    T = config.horizon_steps
    Z = config.modes_used
    if warm is not None and warm.num_modes == Z and warm.controls.shape[1] == T - 1 \
            and np.all(np.isfinite(warm.controls)):
        nominal = shifted_nominal(config, warm, joint, world.theta)
    else:
        nominal = cold_nominal(config, path, joint, world.theta, Z)
    qp_times, objectives = [], []
    degraded = False
    margin = config.margin
    warm_xy = None
    result = None
    for it in range(config.sqp_iters):
        system = provider(world, nominal.controls[0, :, :2])
        if system.num_modes < Z:
            raise ValueError(f"provider returned {system.num_modes} modes, planner uses {Z}")
        modes = system.top_modes(Z)
        hps = _halfplanes(config, system, modes, joint, nominal, margin)
        problem, index = build_qp(config, path, system, modes, joint, world.theta, nominal,
                                  world.last_control, hps)
        sol, elapsed = _timed_solve(problem, config.qp_settings, warm_xy)
        qp_times.append(elapsed)
        if sol.status is qp.Status.PRIMAL_INFEASIBLE and not degraded:
            logger.warning("plan infeasible; retrying with collision margin %.2f", 0.5 * margin)
            degraded = True
            margin *= 0.5
            hps = _halfplanes(config, system, modes, joint, nominal, margin)
            problem, index = build_qp(config, path, system, modes, joint, world.theta, nominal,
                                      world.last_control, hps)
            sol, elapsed = _timed_solve(problem, config.qp_settings, warm_xy)
            qp_times.append(elapsed)
        if sol.status not in (qp.Status.SOLVED, qp.Status.MAX_ITER):
            states = np.full((Z, T, index.state_dim), np.nan)
            controls = np.full((Z, T - 1, CONTROL_DIM), np.nan)
            return PlanResult(states, controls, float("nan"), sol.status, float(sum(qp_times)), qp_times,
                              list(modes), system.mode_probs[modes], degraded, hps, objectives, index,
                              problem, sol, nominal)
        objectives.append(sol.objective)
        states, controls = index.unpack(sol.x)
        result = PlanResult(states.copy(), controls.copy(), sol.objective, sol.status, 0.0, qp_times,
                            list(modes), np.asarray(system.mode_probs)[modes], degraded, hps, objectives,
                            index, problem, sol, nominal)
        warm_xy = (sol.x, sol.y) if it + 1 < config.sqp_iters else None
        nominal = _nominal_from_controls(config, np.clip(controls, config.control_lower, config.control_upper),
                                         joint, world.theta)
        # keep the solved path parameter as the tracking nominal
        nominal.theta = states[:, :, -1].copy()
    result.solve_time = float(sum(qp_times))
    return result


def plan_violation(result: PlanResult) -> float:
    """Largest bound violation of the final QP solution (unscaled rows)."""
    ax = result.problem.a_mat @ result.solution.x
    return float(max(np.max(result.problem.lower - ax, initial=0.0), np.max(ax - result.problem.upper, initial=0.0)))
