"""Scene data model, synthetic scene generators and scene file IO.

A :class:`Scene` is a fixed roster of agents (ego at index 0) with a full
state timeline and the ego's control sequence. Prediction windows of ``H``
history steps and ``T`` future steps are cut from it with
:meth:`Scene.windows`.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from matsplan import dynamics as dyn
from matsplan.dynamics import AgentClass

SCENE_FORMAT = "matsplan.scene/1"
MANIFEST_FORMAT = "matsplan.manifest/1"


class DegenerateScene(RuntimeError):
    """Particles came within numerical coincidence of each other."""


@dataclass
class Scene:
    dt: float
    agent_ids: tuple
    classes: tuple
    states: np.ndarray  # (L, N, 4)
    ego_controls: np.ndarray  # (L - 1, 2)
    history: int = 8
    prediction: int = 12
    scene_id: str = ""

    def __post_init__(self):
        self.classes = tuple(AgentClass(c) for c in self.classes)
        self.agent_ids = tuple(str(a) for a in self.agent_ids)
        self.states = np.asarray(self.states, dtype=float)
        self.ego_controls = np.asarray(self.ego_controls, dtype=float).reshape(-1, dyn.CONTROL_DIM)
        if self.states.ndim != 3 or self.states.shape[1] != len(self.classes) or self.states.shape[2] != dyn.STATE_DIM:
            raise ValueError(f"states must be (L, {len(self.classes)}, 4), got {self.states.shape}")
        if len(self.agent_ids) != len(self.classes):
            raise ValueError("one id per agent required")
        if len(self.ego_controls) != len(self.states) - 1:
            raise ValueError("ego_controls must have one entry per transition")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("scene states must be finite")

    @property
    def num_steps(self) -> int:
        return len(self.states)

    @property
    def num_agents(self) -> int:
        return len(self.classes)

    def joint(self, t: int) -> np.ndarray:
        return self.states[t].reshape(-1)

    def joint_states(self) -> np.ndarray:
        return self.states.reshape(self.num_steps, -1)

    def windows(self, history: int | None = None, prediction: int | None = None) -> list:
        h = self.history if history is None else history
        p = self.prediction if prediction is None else prediction
        joint = self.joint_states()
        out = []
        for k in range(self.num_steps - h - p):
            t0 = k + h
            out.append(Window(
                classes=self.classes,
                dt=self.dt,
                history=joint[k:t0 + 1],
                future=joint[t0 + 1:t0 + 1 + p],
                history_controls=self.ego_controls[k:t0],
                ego_controls=self.ego_controls[t0:t0 + p],
                scene_id=self.scene_id,
                start=k,
            ))
        return out


@dataclass(frozen=True)
class Window:
    """One (x, y, u_R) sample: ``history`` is (H+1, F) ending at the present state."""

    classes: tuple
    dt: float
    history: np.ndarray
    future: np.ndarray
    history_controls: np.ndarray
    ego_controls: np.ndarray
    scene_id: str = ""
    start: int = 0

    @property
    def current(self) -> np.ndarray:
        return self.history[-1]

    @property
    def horizon(self) -> int:
        return len(self.future)


# --- Social-force particle world ------------------------------------------

@dataclass
class SocialForcesConfig:
    v0_range: tuple = (4.0, 12.0)
    scene_duration: float = 3.0
    dt: float = 0.1
    repulsion_gain: float = 10.0
    train_count: int = 700
    test_count: int = 100
    rng_seed: int = 0
    ego_speed_range: tuple = (1.0, 5.0)
    ego_accel_max: float = 3.0
    ego_accel_period: float = 0.5
    crossing_time_range: tuple = (1.0, 2.2)
    miss_distance_range: tuple = (1.0, 6.0)
    history: int = 8
    prediction: int = 12

    def __post_init__(self):
        self.v0_range = tuple(float(v) for v in self.v0_range)
        if not self.v0_range[0] < self.v0_range[1]:
            raise ValueError("v0_range must be increasing")
        if self.train_count <= 0 or self.test_count <= 0:
            raise ValueError("scene counts must be positive")
        if self.dt <= 0 or self.scene_duration <= 0:
            raise ValueError("dt and scene_duration must be positive")

    @property
    def num_steps(self) -> int:
        return int(round(self.scene_duration / self.dt))


def repulsion(p_agent, p_ego, gain: float) -> np.ndarray:
    """Inverse-square push of the agent directly away from the ego."""
    diff = np.asarray(p_agent, dtype=float) - np.asarray(p_ego, dtype=float)
    dist = float(np.hypot(*diff))
    if dist < 1e-6:
        raise DegenerateScene(f"particles coincide (distance {dist:.2e} m)")
    return gain * diff / dist**3


def simulate_particles(ego_state, agent_state, ego_controls, dt: float, gain: float) -> np.ndarray:
    """Roll the two-particle world forward; returns (len(ego_controls)+1, 2, 4)."""
    ego = np.asarray(ego_state, dtype=float)
    agent = np.asarray(agent_state, dtype=float)
    out = [np.stack([ego, agent])]
    for u in np.asarray(ego_controls, dtype=float):
        accel = repulsion(agent[:2], ego[:2], gain) if gain else np.zeros(2)
        ego = dyn.double_integrator_step(ego, u, dt)
        agent = dyn.double_integrator_step(agent, accel, dt)
        out.append(np.stack([ego, agent]))
    return np.array(out)


def _ego_script(rng, cfg: SocialForcesConfig) -> np.ndarray:
    n = cfg.num_steps
    hold = max(1, int(round(cfg.ego_accel_period / cfg.dt)))
    out = np.empty((n, 2))
    for k in range(0, n, hold):
        a = rng.uniform(-cfg.ego_accel_max, cfg.ego_accel_max, 2)
        norm = np.hypot(*a)
        if norm > cfg.ego_accel_max:
            a *= cfg.ego_accel_max / norm
        out[k:k + hold] = a
    return out


def _sample_particle_scene(rng, cfg: SocialForcesConfig, scene_id: str) -> Scene:
    for _ in range(100):
        controls = _ego_script(rng, cfg)
        psi_e = rng.uniform(-np.pi, np.pi)
        speed_e = rng.uniform(*cfg.ego_speed_range)
        ego = np.array([0.0, 0.0, speed_e * np.cos(psi_e), speed_e * np.sin(psi_e)])
        v0 = rng.uniform(*cfg.v0_range)
        psi_a = rng.uniform(-np.pi, np.pi)
        vel_a = v0 * np.array([np.cos(psi_a), np.sin(psi_a)])
        t_cross = rng.uniform(*cfg.crossing_time_range)
        miss = rng.uniform(*cfg.miss_distance_range) * rng.choice([-1.0, 1.0])
        ego_cv = ego[:2] + ego[2:] * t_cross
        normal = np.array([-np.sin(psi_a), np.cos(psi_a)])
        agent = np.concatenate([ego_cv + miss * normal - vel_a * t_cross, vel_a])
        try:
            states = simulate_particles(ego, agent, controls, cfg.dt, cfg.repulsion_gain)
        except DegenerateScene:
            continue
        return Scene(cfg.dt, ("ego", "agent"), (AgentClass.PARTICLE, AgentClass.PARTICLE), states, controls,
                     cfg.history, cfg.prediction, scene_id)
    raise DegenerateScene("could not sample a non-degenerate scene")


def generate_social_forces(cfg: SocialForcesConfig) -> tuple:
    """Train and test particle scenes; each scene draws from its own seed stream."""
    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.train_count + cfg.test_count)
    scenes = [_sample_particle_scene(np.random.default_rng(child), cfg, f"sf-{k:04d}")
              for k, child in enumerate(children)]
    return scenes[:cfg.train_count], scenes[cfg.train_count:]


# --- rotation augmentation ------------------------------------------------

def _rot(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate_scene(scene: Scene, angle: float) -> Scene:
    """Rotate every trajectory about the origin by ``angle`` radians."""
    if not np.isfinite(angle):
        raise ValueError("angle must be finite")
    rot = _rot(angle)
    states = scene.states.copy()
    for i, cls in enumerate(scene.classes):
        states[:, i, :2] = scene.states[:, i, :2] @ rot.T
        if cls.is_unicycle:
            states[:, i, 2] = dyn.wrap_angle(scene.states[:, i, 2] + angle)
        else:
            states[:, i, 2:] = scene.states[:, i, 2:] @ rot.T
    controls = scene.ego_controls.copy()
    if not scene.classes[0].is_unicycle:
        controls = scene.ego_controls @ rot.T
    suffix = f"@{np.degrees(angle):g}" if angle else ""
    return Scene(scene.dt, scene.agent_ids, scene.classes, states, controls, scene.history, scene.prediction,
                 scene.scene_id + suffix)


AUGMENT_ANGLES = np.deg2rad(np.arange(0, 360, 15))


def augment(scenes) -> list:
    """24 copies of each scene rotated by 0, 15, ..., 345 degrees."""
    return [rotate_scene(s, float(a)) if a else s for s in scenes for a in AUGMENT_ANGLES]


# --- IO ---------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "history": scene.history,
        "prediction": scene.prediction,
        "agents": [{"id": a, "class": c.value} for a, c in zip(scene.agent_ids, scene.classes)],
        "states": scene.states.tolist(),
        "ego_controls": scene.ego_controls.tolist(),
    }


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("format") != SCENE_FORMAT:
        raise ValueError(f"unsupported scene format {doc.get('format')!r}")
    agents = doc["agents"]
    states = np.array(doc["states"], dtype=float).reshape(-1, len(agents), dyn.STATE_DIM)
    return Scene(float(doc["dt"]), tuple(a["id"] for a in agents), tuple(a["class"] for a in agents),
                 states, np.array(doc["ego_controls"], dtype=float).reshape(-1, 2),
                 int(doc["history"]), int(doc["prediction"]), doc.get("scene_id", ""))


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def write_scene(scene: Scene, path) -> str:
    text = dumps_scene(scene)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def write_dataset(directory, splits: dict, config: dict | None = None) -> Path:
    """Write each split's scenes as JSON files plus a manifest; returns the manifest path."""
    root = Path(directory)
    entries = {}
    for split, scenes in splits.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        rows = []
        for k, scene in enumerate(scenes):
            rel = Path(split) / f"{k:05d}.json"
            digest = write_scene(scene, root / rel)
            rows.append({"file": rel.as_posix(), "scene_id": scene.scene_id, "sha256": digest})
        entries[split] = rows
    manifest = {"format": MANIFEST_FORMAT, "config": config or {}, "splits": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_dataset(manifest_path, split: str) -> list:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{manifest_path}: unsupported manifest format")
    return [read_scene(manifest_path.parent / row["file"]) for row in manifest["splits"][split]]


def export_csv(scenes, path) -> None:
    """Long-format trajectory table for plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "t_s", "agent_id", "class", "x_m", "y_m", "s2", "s3"])
        for scene in scenes:
            for k in range(scene.num_steps):
                for i, (aid, cls) in enumerate(zip(scene.agent_ids, scene.classes)):
                    s = scene.states[k, i]
                    writer.writerow([scene.scene_id, repr(k * scene.dt), aid, cls.value,
                                     repr(s[0]), repr(s[1]), repr(s[2]), repr(s[3])])


def min_distance_to_ego(states: np.ndarray) -> np.ndarray:
    """Per-step minimum ego-to-agent distance for (L, N, 4) states."""
    d = np.linalg.norm(states[:, 1:, :2] - states[:, :1, :2], axis=-1)
    return d.min(axis=1)


# --- four-way intersection -------------------------------------------------

@dataclass
class SpeedProfile:
    """Per-mode longitudinal behaviour of a scripted vehicle: approach ``target`` speed."""

    target: float
    accel: float = 2.0
    decel: float = 3.0

    def control(self, speed: float, dt: float) -> np.ndarray:
        a = np.clip((self.target - speed) / dt, -self.decel, self.accel)
        return np.array([0.0, a])


@dataclass
class ScriptedAgent:
    agent_id: str
    agent_class: AgentClass
    initial_state: np.ndarray
    # one profile per mode for vehicles; pedestrians keep constant velocity
    profiles: tuple = ()

    def controls(self, state, mode: int, dt: float) -> np.ndarray:
        if self.agent_class.is_unicycle and self.profiles:
            return self.profiles[mode % len(self.profiles)].control(state[3], dt)
        return np.zeros(2)


@dataclass
class IntersectionConfig:
    dt: float = 0.25
    lane_width: float = 3.5
    ego_start_x: float = -30.0
    ego_speed: float = 8.0
    path_start_x: float = -45.0
    path_end_x: float = 220.0
    lead_vehicle: bool = True
    lead_gap: float = 16.0
    lead_speed: float = 8.0
    lead_brake_speed: float = 3.0
    lead_fast_speed: float = 11.0
    n_oncoming: int = 2
    n_cross: int = 2
    n_pedestrians: int = 5
    mode_probs: tuple = (0.5, 0.3, 0.2)
    truth_mode: int = 1
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.lane_width <= 0:
            raise ValueError("dt and lane_width must be positive")
        if min(self.n_oncoming, self.n_cross, self.n_pedestrians) < 0:
            raise ValueError("agent counts must be non-negative")
        if not 0 <= self.truth_mode < len(self.mode_probs):
            raise ValueError("truth_mode must index mode_probs")
        if abs(sum(self.mode_probs) - 1.0) > 1e-9:
            raise ValueError("mode_probs must sum to 1")


@dataclass
class IntersectionScenario:
    config: IntersectionConfig
    scene: Scene
    waypoints: np.ndarray
    agents: list
    mode_names: tuple = ("maintain", "brake", "accelerate")
    mode_probs: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.3, 0.2]))

    @property
    def classes(self) -> tuple:
        return self.scene.classes

    def step_agents(self, agent_states: np.ndarray, mode: int) -> np.ndarray:
        """Advance non-ego agents one step under ``mode``'s scripts."""
        out = np.empty_like(agent_states)
        for k, ag in enumerate(self.agents):
            u = ag.controls(agent_states[k], mode, self.config.dt)
            out[k] = dyn.step(ag.agent_class, agent_states[k], u, self.config.dt)
        return out

    def scripted_future(self, agent_states: np.ndarray, mode: int, steps: int) -> tuple:
        """States (steps+1, K, 4) and the agents' own controls (steps, K, 2) under ``mode``."""
        states = [np.asarray(agent_states, dtype=float)]
        controls = []
        for _ in range(steps):
            cur = states[-1]
            controls.append(np.array([ag.controls(cur[k], mode, self.config.dt) for k, ag in enumerate(self.agents)]))
            states.append(self.step_agents(cur, mode))
        return np.array(states), np.array(controls).reshape(steps, len(self.agents), 2)


def build_intersection(cfg: IntersectionConfig | None = None) -> IntersectionScenario:
    """Ego crossing a four-way intersection eastbound in the right lane.

    Roads run along both axes with the junction at the origin. The lead
    vehicle's behaviour is multimodal (keep speed, brake, accelerate); every
    other agent behaves the same in all modes.
    """
    cfg = cfg or IntersectionConfig()
    rng = np.random.default_rng(cfg.seed)
    half = cfg.lane_width / 2.0
    sidewalk = 2 * cfg.lane_width - 1.0

    def jit(scale=1.0):
        return cfg.jitter * scale * rng.uniform(-1.0, 1.0)

    agents = []
    if cfg.lead_vehicle:
        agents.append(ScriptedAgent("lead", AgentClass.VEHICLE,
                                    np.array([cfg.ego_start_x + cfg.lead_gap + jit(), -half, 0.0, cfg.lead_speed]),
                                    (SpeedProfile(cfg.lead_speed), SpeedProfile(cfg.lead_brake_speed),
                                     SpeedProfile(cfg.lead_fast_speed, accel=1.5))))
    for k in range(cfg.n_oncoming):
        x0 = 35.0 + 45.0 * k + jit(2.0)
        agents.append(ScriptedAgent(f"oncoming{k}", AgentClass.VEHICLE, np.array([x0, half, np.pi, 8.0 + jit()]),
                                    (SpeedProfile(8.0),)))
    for k in range(cfg.n_cross):
        # waiting at the stop lines of the crossing road
        if k % 2 == 0:
            st = np.array([half, -(cfg.lane_width + 6.0 + 6.0 * (k // 2)), np.pi / 2, 0.0])
        else:
            st = np.array([-half, cfg.lane_width + 6.0 + 6.0 * (k // 2), -np.pi / 2, 0.0])
        agents.append(ScriptedAgent(f"cross{k}", AgentClass.VEHICLE, st, (SpeedProfile(0.0),)))
    ped_specs = [(-12.0, -sidewalk, 1.2), (6.0, -sidewalk, 1.3), (25.0, -sidewalk, 1.1),
                 (-5.0, sidewalk, -1.4), (15.0, sidewalk, -1.2), (40.0, -sidewalk, 0.0), (-25.0, sidewalk, 1.0)]
    for k in range(cfg.n_pedestrians):
        x0, y0, vx = ped_specs[k % len(ped_specs)]
        x0 += 60.0 * (k // len(ped_specs))
        agents.append(ScriptedAgent(f"ped{k}", AgentClass.PEDESTRIAN, np.array([x0 + jit(), y0, vx, 0.0])))

    ego = np.array([cfg.ego_start_x, -half, 0.0, cfg.ego_speed])
    states = np.stack([ego] + [a.initial_state for a in agents])[None]
    classes = (AgentClass.VEHICLE,) + tuple(a.agent_class for a in agents)
    ids = ("ego",) + tuple(a.agent_id for a in agents)
    scene = Scene(cfg.dt, ids, classes, states, np.zeros((0, 2)), history=0, prediction=0, scene_id=f"intersection-{cfg.seed}")
    xs = np.arange(cfg.path_start_x, cfg.path_end_x + 1e-9, 5.0)
    waypoints = np.stack([xs, np.full_like(xs, -half)], axis=1)
    return IntersectionScenario(cfg, scene, waypoints, agents, mode_probs=np.asarray(cfg.mode_probs, dtype=float))


def config_dict(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
