"""Receding-horizon closed loop and its logs."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from matsplan import dynamics as dyn
from matsplan.planner.mpc import EGO_DIM, PlannerConfig, PlanResult, WorldState, plan_step
from matsplan.planner.path import ReferencePath
from matsplan.planner.tracking import tracking_errors

logger = logging.getLogger(__name__)


class PlanningFailure(RuntimeError):
    """The QP returned no usable plan."""


@dataclass
class StepRecord:
    step: int
    t: float
    ego: np.ndarray
    theta: float
    action: np.ndarray  # omega, a, v_s
    min_distance: float
    contour_error: float
    lag_error: float
    solve_ms: float
    qp_ms: list
    mode_probs: np.ndarray
    status: str
    degraded: bool
    consensus_gap: float


@dataclass
class ClosedLoopLog:
    records: list = field(default_factory=list)
    plans: list = field(default_factory=list)
    collision: bool = False
    collision_step: int | None = None

    @property
    def qp_times_ms(self) -> np.ndarray:
        return np.array([ms for r in self.records for ms in r.qp_ms])

    @property
    def min_distance(self) -> float:
        return min((r.min_distance for r in self.records), default=float("inf"))


def _min_distance(classes, joint) -> float:
    pos = joint.reshape(-1, dyn.STATE_DIM)[:, :2] if all(c.state_dim == dyn.STATE_DIM for c in classes) else None
    if pos is None or len(pos) < 2:
        return float("inf")
    return float(np.min(np.linalg.norm(pos[1:] - pos[0], axis=1)))


def closed_loop(config: PlannerConfig, scenario, provider, steps: int, truth_mode: int | None = None,
                path: ReferencePath | None = None, keep_plans: bool = True) -> ClosedLoopLog:
    """Plan, apply the first consensus action, advance the scripted world, repeat.

    The world's agents evolve under ``truth_mode`` (the scenario default when
    omitted). The ego follows the exact unicycle step. The loop stops early
    and sets ``collision`` when the ego comes closer than
    ``config.collision_distance`` to any agent.
    """
    path = path or ReferencePath(scenario.waypoints)
    truth = scenario.config.truth_mode if truth_mode is None else int(truth_mode)
    dt = config.dt
    if abs(scenario.config.dt - dt) > 1e-12:
        raise ValueError("scenario and planner time steps differ")
    joint = np.asarray(scenario.scene.joint(0), dtype=float)
    theta = path.project(joint[:2])
    last = np.array([0.0, 0.0, joint[3]])
    log = ClosedLoopLog()
    warm = None
    for k in range(steps):
        world = WorldState(joint, theta, last)
        plan: PlanResult = plan_step(config, path, provider, world, warm)
        if not np.all(np.isfinite(plan.controls)):
            raise PlanningFailure(f"no plan at step {k}: {plan.status.value}")
        u = np.clip(plan.controls[0, 0], config.control_lower, config.control_upper)
        ego_next = dyn.unicycle_step(joint[:EGO_DIM], u[:2], dt)
        agents = scenario.step_agents(joint[EGO_DIM:].reshape(-1, dyn.STATE_DIM), truth)
        joint = np.concatenate([ego_next, agents.ravel()])
        planned_theta = float(plan.states[0, 1, -1])
        e_c, e_l = tracking_errors(path, ego_next[0], ego_next[1], planned_theta)
        theta = path.project(ego_next[:2], planned_theta, window=5.0)
        dist = _min_distance(scenario.classes, joint)
        log.records.append(StepRecord(k, (k + 1) * dt, ego_next, theta, u, dist, float(e_c), float(e_l),
                                      1e3 * plan.solve_time, [1e3 * s for s in plan.qp_times],
                                      np.asarray(plan.mode_probs), plan.status.value, plan.degraded,
                                      plan.consensus_gap(config.consensus_steps)))
        if keep_plans:
            log.plans.append(plan)
        last = u
        warm = plan
        if dist < config.collision_distance:
            log.collision, log.collision_step = True, k
            logger.error("collision at step %d: distance %.3f m", k, dist)
            break
    return log


LOG_HEADER = ["step", "t_s", "x_m", "y_m", "heading_rad", "speed_mps", "theta_m", "omega_radps", "accel_mps2",
              "progress_mps", "min_distance_m", "contour_error_m", "lag_error_m", "solve_ms", "status",
              "degraded", "consensus_gap"]


def write_log_csv(log: ClosedLoopLog, path, num_modes: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER + [f"p_mode_{z}" for z in range(num_modes)])
        for r in log.records:
            probs = list(r.mode_probs) + [float("nan")] * (num_modes - len(r.mode_probs))
            writer.writerow([r.step, repr(r.t)] + [repr(float(v)) for v in r.ego] + [repr(r.theta)]
                            + [repr(float(v)) for v in r.action]
                            + [repr(r.min_distance), repr(r.contour_error), repr(r.lag_error),
                               f"{r.solve_ms:.3f}", r.status, int(r.degraded), repr(r.consensus_gap)]
                            + [repr(float(p)) for p in probs])


def plan_to_dict(plan: PlanResult, step: int) -> dict:
    """Per-mode ego and agent trajectories of one plan for plotting."""
    F = plan.index.joint_dim
    agents = plan.states[:, :, EGO_DIM:F]
    return {
        "step": step,
        "modes": [int(m) for m in plan.modes],
        "mode_probs": [float(p) for p in plan.mode_probs],
        "objective": float(plan.objective),
        "status": plan.status.value,
        "degraded": bool(plan.degraded),
        "ego_xy": plan.states[:, :, :2].tolist(),
        "ego_speed": plan.states[:, :, 3].tolist(),
        "theta": plan.states[:, :, -1].tolist(),
        "controls": plan.controls.tolist(),
        "agent_xy": agents.reshape(agents.shape[0], agents.shape[1], -1, dyn.STATE_DIM)[..., :2].tolist(),
    }


def write_plans_json(log: ClosedLoopLog, path) -> None:
    with open(path, "w") as fh:
        json.dump([plan_to_dict(p, k) for k, p in enumerate(log.plans)], fh, indent=1, sort_keys=True)
