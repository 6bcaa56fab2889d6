"""Drive the ego through the intersection scenario and show how each mode's plan reacts.

Run with ``python3 demos/intersection_planning.py``.
"""
import numpy as np

from matsplan import scenes
from matsplan.planner import mpc
from matsplan.planner.loop import closed_loop

scenario = scenes.build_intersection()
cfg = mpc.PlannerConfig()
provider = mpc.ScriptedProvider(scenario, cfg.horizon_steps - 1)
log = closed_loop(cfg, scenario, provider, 60)

print(f"{scenario.scene.num_agents - 1} agents, {cfg.modes_used} modes, horizon {cfg.horizon_steps} steps")
print(" step   speed   accel   end speed per mode")
for rec, plan in zip(log.records[::6], log.plans[::6]):
    ends = "  ".join(f"{v:5.2f}" for v in plan.states[:, -1, 3])
    print(f"{rec.step:5d}  {rec.ego[3]:6.2f}  {rec.action[1]:6.2f}   {ends}")

print(f"collision: {log.collision}, min distance {log.min_distance:.2f} m")
print(f"median QP time {np.median(log.qp_times_ms):.1f} ms")
