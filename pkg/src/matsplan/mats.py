"""Mixtures of affine time-varying (ATV) systems.

One mode is the linear-Gaussian system

    s[t+1] = A[t] s[t] + B[t] u[t] + c[t] + diag(q[t]) w[t],   w[t] ~ N(0, I)

over the joint state of all agents (ego first). A mixture pairs several modes
with a probability vector. Blocks that are owned by the agents' dynamics
(every diagonal block of ``A``, the ego block of ``B``, the affine term) are
filled by :func:`assemble`; only interaction blocks and noise scales come from
outside.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from matsplan import dynamics as dyn
from matsplan.dynamics import AgentClass

Q_FLOOR = 1e-3
FORMAT_VERSION = "matsplan.mats/1"
_LOG_2PI = np.log(2.0 * np.pi)


class StructureViolation(ValueError):
    """A block owned by dynamics was supplied, or a required input is missing."""


@dataclass(frozen=True)
class BlockLayout:
    classes: tuple
    horizon: int
    dt: float
    control_dim: int = dyn.CONTROL_DIM

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(AgentClass(c) for c in self.classes))
        if not self.classes:
            raise ValueError("layout needs at least the ego agent")
        if self.horizon < 1 or self.dt <= 0:
            raise ValueError("horizon must be >= 1 and dt > 0")

    @property
    def num_agents(self) -> int:
        return len(self.classes)

    @property
    def agent_dims(self) -> tuple:
        return tuple(c.state_dim for c in self.classes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.agent_dims)])

    @property
    def full_dim(self) -> int:
        return int(sum(self.agent_dims))

    def block(self, i: int) -> slice:
        off = self.offsets
        return slice(int(off[i]), int(off[i + 1]))

    def positions(self, states: np.ndarray) -> np.ndarray:
        """Planar positions ``(..., N, 2)`` from joint states ``(..., F)``."""
        states = np.asarray(states)
        return np.stack([states[..., self.block(i)][..., :2] for i in range(self.num_agents)], axis=-2)


def relative_selector(target: AgentClass, source: AgentClass) -> np.ndarray:
    """Map a target-agent state into the source layout for relative features.

    Agents sharing a layout are differenced in full; across layouts only the
    planar position is comparable.
    """
    target, source = AgentClass(target), AgentClass(source)
    if target.is_unicycle == source.is_unicycle:
        return np.eye(source.state_dim, target.state_dim)
    sel = np.zeros((source.state_dim, target.state_dim))
    sel[0, 0] = sel[1, 1] = 1.0
    return sel


@dataclass(frozen=True)
class ModeSystem:
    a_seq: np.ndarray  # (T, F, F)
    b_seq: np.ndarray  # (T, F, C)
    c_seq: np.ndarray  # (T, F)
    q_seq: np.ndarray  # (T, F) per-state standard deviations

    def __post_init__(self):
        a, b, c, q = (np.asarray(x, dtype=float) for x in (self.a_seq, self.b_seq, self.c_seq, self.q_seq))
        t, f = c.shape
        if a.shape != (t, f, f) or b.shape[:2] != (t, f) or q.shape != (t, f):
            raise ValueError("inconsistent mode dimensions")
        if np.any(q < 0):
            raise ValueError("noise scales must be non-negative")
        for name, val in zip(("a_seq", "b_seq", "c_seq", "q_seq"), (a, b, c, q)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def horizon(self) -> int:
        return self.c_seq.shape[0]

    @property
    def full_dim(self) -> int:
        return self.c_seq.shape[1]


@dataclass(frozen=True)
class MatsSystem:
    layout: BlockLayout
    modes: tuple
    mode_probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.mode_probs, dtype=float)
        if probs.ndim != 1 or len(probs) != len(self.modes) or len(probs) == 0:
            raise ValueError("need one probability per mode")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"mode probabilities must be a distribution, got {probs}")
        for m in self.modes:
            if m.full_dim != self.layout.full_dim or m.horizon != self.layout.horizon:
                raise ValueError("mode does not match layout")
            check_ego_mask(self.layout, m)
        probs.setflags(write=False)
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "mode_probs", probs)

    @property
    def num_modes(self) -> int:
        return len(self.modes)

    def top_modes(self, k: int) -> list:
        order = sorted(range(self.num_modes), key=lambda z: (-self.mode_probs[z], z))
        return order[:k]


@dataclass(frozen=True)
class GaussianRollout:
    means: np.ndarray  # (T, F), states s[1..T]
    covs: np.ndarray  # (T, F, F)


@dataclass
class LearnedBlocks:
    """Externally supplied blocks of one mode.

    ``a_offdiag[(i, j)]`` is a ``(T, D_i, D_j)`` interaction block acting on
    the source state expressed relative to the target's nominal state;
    ``b[i]`` is ``(T, D_i, C)``; ``q[i]`` is ``(T, D_i)``. Missing interaction
    blocks are zero and missing noise scales default to the floor.
    """

    a_offdiag: dict = field(default_factory=dict)
    b: dict = field(default_factory=dict)
    q: dict = field(default_factory=dict)


@dataclass
class NominalTrajectory:
    """Linearization points: joint states ``(T, F)`` (or ``(T+1, F)``) and ego controls ``(T, C)``.

    ``agent_controls[i]`` optionally gives a non-ego agent's own nominal
    control; its effect is folded into that agent's affine term.
    """

    states: np.ndarray
    ego_controls: np.ndarray
    agent_controls: dict = field(default_factory=dict)


def _agent_control(nominal: NominalTrajectory, i: int, t: int) -> np.ndarray:
    if i in nominal.agent_controls:
        return np.asarray(nominal.agent_controls[i], dtype=float)[t]
    return np.zeros(dyn.CONTROL_DIM)


def check_ego_mask(layout: BlockLayout, mode: ModeSystem) -> None:
    ego = layout.block(0)
    rest = np.ones(layout.full_dim, dtype=bool)
    rest[ego] = False
    if np.any(mode.a_seq[:, ego][:, :, rest] != 0.0):
        raise StructureViolation("ego row of A must only contain the ego's own dynamics")


def assemble(layout: BlockLayout, learned: LearnedBlocks | None = None,
             nominal: NominalTrajectory | None = None, q_floor: float = Q_FLOOR) -> ModeSystem:
    """Stack dynamics-owned and learned blocks into one mode."""
    learned = learned or LearnedBlocks()
    n_agents, horizon, dt = layout.num_agents, layout.horizon, layout.dt
    f, c_dim = layout.full_dim, layout.control_dim

    for key, blk in learned.a_offdiag.items():
        i, j = key
        if not (0 <= i < n_agents and 0 <= j < n_agents):
            raise StructureViolation(f"A block {key} out of range")
        if i == 0 or i == j:
            raise StructureViolation(f"A block {key} is owned by dynamics")
        if np.shape(blk) != (horizon, layout.agent_dims[i], layout.agent_dims[j]):
            raise StructureViolation(f"A block {key} has shape {np.shape(blk)}")
    for i, blk in learned.b.items():
        if i == 0:
            raise StructureViolation("ego B block is owned by dynamics")
        if not 0 < i < n_agents or np.shape(blk) != (horizon, layout.agent_dims[i], c_dim):
            raise StructureViolation(f"B block {i} has shape {np.shape(blk)}")
    for i, blk in learned.q.items():
        if not 0 <= i < n_agents or np.shape(blk) != (horizon, layout.agent_dims[i]):
            raise StructureViolation(f"Q block {i} has shape {np.shape(blk)}")

    needs_nominal = any(c.is_unicycle for c in layout.classes) or any(
        i != 0 for i, _ in learned.a_offdiag)
    if nominal is None and needs_nominal:
        raise StructureViolation("nominal trajectory required for vehicle agents and interaction blocks")
    if nominal is not None:
        nom_states = np.asarray(nominal.states, dtype=float)
        nom_u = np.asarray(nominal.ego_controls, dtype=float)
        if nom_states.shape[0] < horizon or nom_states.shape[1] != f or nom_u.shape != (horizon, c_dim):
            raise StructureViolation("nominal trajectory does not match layout")

    a_seq = np.zeros((horizon, f, f))
    b_seq = np.zeros((horizon, f, c_dim))
    c_seq = np.zeros((horizon, f))
    q_seq = np.full((horizon, f), q_floor)
    for t in range(horizon):
        for i, cls in enumerate(layout.classes):
            bi = layout.block(i)
            if cls.is_unicycle:
                s_nom = nom_states[t, bi]
                u_nom = nom_u[t] if i == 0 else _agent_control(nominal, i, t)
                lin = dyn.linearize(cls, s_nom, u_nom, dt)
                a_seq[t, bi, bi] = lin.a_mat
                if i == 0:
                    b_seq[t, bi] = lin.b_mat
                    c_seq[t, bi] = lin.c_vec
                else:
                    c_seq[t, bi] = dyn.unicycle_step(s_nom, u_nom, dt) - lin.a_mat @ s_nom
            else:
                a_ii, b_ii = dyn.double_integrator_matrices(dt)
                a_seq[t, bi, bi] = a_ii
                if i == 0:
                    b_seq[t, bi] = b_ii
                elif nominal is not None and i in nominal.agent_controls:
                    c_seq[t, bi] = b_ii @ np.asarray(nominal.agent_controls[i])[t]

    for (i, j), blk in learned.a_offdiag.items():
        bi, bj = layout.block(i), layout.block(j)
        blk = np.asarray(blk, dtype=float)
        sel = relative_selector(layout.classes[i], layout.classes[j])
        a_seq[:, bi, bj] += blk
        # the block acts on s_j - sel @ s_i_nominal; the constant part lands in c
        c_seq[:, bi] -= np.einsum("tij,jk,tk->ti", blk, sel, nom_states[:horizon, bi])
    for i, blk in learned.b.items():
        b_seq[:, layout.block(i)] = blk
    for i, blk in learned.q.items():
        q_seq[:, layout.block(i)] = np.maximum(np.asarray(blk, dtype=float), q_floor)

    mode = ModeSystem(a_seq, b_seq, c_seq, q_seq)
    check_ego_mask(layout, mode)
    return mode


def _check_inputs(mode: ModeSystem, initial_state, controls):
    s0 = np.asarray(initial_state, dtype=float)
    u = np.asarray(controls, dtype=float)
    if s0.shape != (mode.full_dim,):
        raise ValueError(f"initial state has shape {s0.shape}, expected ({mode.full_dim},)")
    if u.shape != (mode.horizon, mode.b_seq.shape[2]):
        raise ValueError(f"controls have shape {u.shape}, expected {(mode.horizon, mode.b_seq.shape[2])}")
    return s0, u


def _propagate(a: np.ndarray, states: np.ndarray, drift: np.ndarray) -> np.ndarray:
    # shared by mean rollout and sampling so the noiseless paths agree bit for bit
    return states @ a.T + drift


def rollout_mode(mode: ModeSystem, initial_state, controls, initial_cov=None) -> GaussianRollout:
    """Propagate mean and covariance of one mode through its horizon."""
    s, u = _check_inputs(mode, initial_state, controls)
    f = mode.full_dim
    cov = np.zeros((f, f)) if initial_cov is None else np.array(initial_cov, dtype=float)
    if cov.shape != (f, f):
        raise ValueError("initial covariance has wrong shape")
    means, covs = [], []
    for t in range(mode.horizon):
        a = mode.a_seq[t]
        s = _propagate(a, s[None], mode.b_seq[t] @ u[t] + mode.c_seq[t])[0]
        cov = a @ cov @ a.T + np.diag(mode.q_seq[t] ** 2)
        cov = 0.5 * (cov + cov.T)
        means.append(s)
        covs.append(cov)
    return GaussianRollout(np.array(means), np.array(covs))


def rollout_means(mode: ModeSystem, initial_state, controls) -> np.ndarray:
    s, u = _check_inputs(mode, initial_state, controls)
    out = np.empty((mode.horizon, mode.full_dim))
    for t in range(mode.horizon):
        s = _propagate(mode.a_seq[t], s[None], mode.b_seq[t] @ u[t] + mode.c_seq[t])[0]
        out[t] = s
    return out


def sample_mode(mode: ModeSystem, initial_state, controls, rng_seed, n_samples: int | None = None) -> np.ndarray:
    """Draw trajectories by iterating the noisy recursion.

    Returns ``(T, F)`` when ``n_samples`` is None, else ``(n_samples, T, F)``.
    """
    s0, u = _check_inputs(mode, initial_state, controls)
    rng = np.random.default_rng(rng_seed)
    n = 1 if n_samples is None else int(n_samples)
    s = np.broadcast_to(s0, (n, mode.full_dim)).copy()
    out = np.empty((n, mode.horizon, mode.full_dim))
    for t in range(mode.horizon):
        w = rng.standard_normal((n, mode.full_dim))
        s = _propagate(mode.a_seq[t], s, mode.b_seq[t] @ u[t] + mode.c_seq[t]) + mode.q_seq[t] * w
        out[:, t] = s
    return out[0] if n_samples is None else out


def mode_logliks(system: MatsSystem, observed, initial_state, controls, q_floor: float = Q_FLOOR) -> np.ndarray:
    """Teacher-forced log density of ``observed`` under each mode."""
    obs = np.asarray(observed, dtype=float)
    if not np.all(np.isfinite(obs)):
        raise ValueError("observed trajectory must be finite")
    out = np.empty(system.num_modes)
    for z, mode in enumerate(system.modes):
        s0, u = _check_inputs(mode, initial_state, controls)
        if obs.shape != (mode.horizon, mode.full_dim):
            raise ValueError("observed trajectory does not match the horizon")
        prev = np.vstack([s0, obs[:-1]])
        pred = np.einsum("tij,tj->ti", mode.a_seq, prev) + np.einsum("tij,tj->ti", mode.b_seq, u) + mode.c_seq
        q = np.maximum(mode.q_seq, q_floor)
        r = (obs - pred) / q
        out[z] = -0.5 * np.sum(r * r) - np.sum(np.log(q)) - 0.5 * r.size * _LOG_2PI
    return out


def mixture_loglik(system: MatsSystem, observed, initial_state, controls, q_floor: float = Q_FLOOR) -> float:
    per_mode = mode_logliks(system, observed, initial_state, controls, q_floor)
    with np.errstate(divide="ignore"):
        return float(logsumexp(per_mode + np.log(system.mode_probs)))


def most_likely_mode(system: MatsSystem) -> int:
    return int(np.argmax(system.mode_probs))


def to_dict(system: MatsSystem) -> dict:
    lay = system.layout
    return {
        "format": FORMAT_VERSION,
        "layout": {
            "classes": [c.value for c in lay.classes],
            "horizon": lay.horizon,
            "dt": lay.dt,
            "control_dim": lay.control_dim,
        },
        "mode_probs": system.mode_probs.tolist(),
        "modes": [
            {name: getattr(m, name).ravel().tolist() for name in ("a_seq", "b_seq", "c_seq", "q_seq")}
            for m in system.modes
        ],
    }


def from_dict(doc: dict) -> MatsSystem:
    if doc.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported format {doc.get('format')!r}")
    lay = doc["layout"]
    layout = BlockLayout(tuple(lay["classes"]), int(lay["horizon"]), float(lay["dt"]), int(lay["control_dim"]))
    t, f, c = layout.horizon, layout.full_dim, layout.control_dim
    modes = [
        ModeSystem(
            np.array(m["a_seq"], dtype=float).reshape(t, f, f),
            np.array(m["b_seq"], dtype=float).reshape(t, f, c),
            np.array(m["c_seq"], dtype=float).reshape(t, f),
            np.array(m["q_seq"], dtype=float).reshape(t, f),
        )
        for m in doc["modes"]
    ]
    return MatsSystem(layout, tuple(modes), np.array(doc["mode_probs"], dtype=float))


def dumps(system: MatsSystem) -> str:
    return json.dumps(to_dict(system))


def loads(text: str) -> MatsSystem:
    return from_dict(json.loads(text))
