"""Maximum-likelihood fitting of mixture-of-ATV models by expectation maximization.

Each mode owns, per prediction step and per non-ego target agent, a weight
matrix mapping interaction features to the one-step residual left over by
the agent's own dynamics. Features for target ``i`` are

* for every other agent ``j``: the relative state ``s_j - sel @ s_i_nom`` and
  the same vector scaled by ``kappa = 1 / max(r_nom, 0.5)**3``, where
  ``r_nom`` is the nominal distance between ``i`` and ``j``;
* optionally the ego control ``u`` and ``kappa_i0 * u``.

The weights on these features are exactly the learned ``A_ij`` and ``B_i``
blocks, ``A_ij = W0 + kappa W1``, so a prediction is a :class:`MatsSystem`
built with :func:`mats.assemble`. Noise scales are per mode, step and state
component. EM alternates responsibility computation with weighted ridge
regressions; the penalized log-likelihood is checked to be non-decreasing.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from matsplan import dynamics as dyn
from matsplan import mats
from matsplan.dynamics import AgentClass
from matsplan.scenes import Scene, Window

logger = logging.getLogger(__name__)

MODEL_FORMAT = "matsplan.fitted/1"
KAPPA_MIN_RANGE = 0.5
_LOG_2PI = float(np.log(2.0 * np.pi))
_NUM_PHI = 2  # feature basis [1, kappa]


class SingularRegression(np.linalg.LinAlgError):
    """Normal equations are rank deficient and no ridge term is available."""


class MonotonicityError(RuntimeError):
    """EM objective decreased beyond numerical slack."""


class FeatureMap(str, enum.Enum):
    RELATIVE_STATE = "RelativeState"
    RELATIVE_STATE_PLUS_EGO_CONTROL = "RelativeStatePlusEgoControl"


@dataclass
class FitConfig:
    num_modes: int = 25
    ridge: float = 1e-2
    q_floor: float = mats.Q_FLOOR
    max_em_iters: int = 60
    loglik_tol: float = 1e-5
    rng_seed: int = 0
    feature_map: FeatureMap = FeatureMap.RELATIVE_STATE_PLUS_EGO_CONTROL
    init_smoothing: float = 0.1
    monotone_slack: float = 1e-8

    def __post_init__(self):
        self.feature_map = FeatureMap(self.feature_map)
        if self.num_modes < 1:
            raise ValueError("num_modes must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.q_floor <= 0 or self.loglik_tol <= 0 or self.max_em_iters < 1:
            raise ValueError("q_floor, loglik_tol and max_em_iters must be positive")
        if not 0.0 <= self.init_smoothing < 1.0:
            raise ValueError("init_smoothing must be in [0, 1)")


@dataclass
class FittedModel:
    classes: tuple
    dt: float
    horizon: int
    feature_map: FeatureMap
    weights: dict  # target agent i -> (Z, T, P_i, D_i), acting on raw features
    feature_scale: dict  # target agent i -> (P_i,)
    q: np.ndarray  # (Z, T, F)
    pi: np.ndarray  # (Z,)
    q_floor: float = mats.Q_FLOOR
    ridge: float = 0.0
    log: list = field(default_factory=list)

    def __post_init__(self):
        self.classes = tuple(AgentClass(c) for c in self.classes)
        self.feature_map = FeatureMap(self.feature_map)
        self.pi = np.asarray(self.pi, dtype=float)
        if abs(self.pi.sum() - 1.0) > 1e-9 or np.any(self.pi < 0):
            raise ValueError("mode prior must be a probability vector")

    @property
    def num_modes(self) -> int:
        return len(self.pi)

    @property
    def layout(self) -> mats.BlockLayout:
        return mats.BlockLayout(self.classes, self.horizon, self.dt)

    def scaled_weights(self, i: int) -> np.ndarray:
        return self.weights[i] * self.feature_scale[i][None, None, :, None]

    def a_block(self, z: int, i: int, j: int, kappa: np.ndarray) -> np.ndarray:
        """Learned ``A_ij`` per step for given per-step ``kappa_ij``: (T, D_i, D_j)."""
        sl = _feature_slices(self.classes, i, self.feature_map)[j]
        w = self.weights[i][z][:, sl].reshape(self.horizon, _NUM_PHI, -1, self.classes[i].state_dim)
        return np.swapaxes(w[:, 0] + kappa[:, None, None] * w[:, 1], 1, 2)

    def b_block(self, z: int, i: int, kappa_ego: np.ndarray) -> np.ndarray | None:
        sl = _feature_slices(self.classes, i, self.feature_map).get("u")
        if sl is None:
            return None
        w = self.weights[i][z][:, sl].reshape(self.horizon, _NUM_PHI, -1, self.classes[i].state_dim)
        return np.swapaxes(w[:, 0] + kappa_ego[:, None, None] * w[:, 1], 1, 2)


# --- feature construction --------------------------------------------------

def _feature_slices(classes, i: int, feature_map: FeatureMap) -> dict:
    out, col = {}, 0
    for j, cls in enumerate(classes):
        if j == i:
            continue
        width = _NUM_PHI * cls.state_dim
        out[j] = slice(col, col + width)
        col += width
    if feature_map is FeatureMap.RELATIVE_STATE_PLUS_EGO_CONTROL:
        out["u"] = slice(col, col + _NUM_PHI * dyn.CONTROL_DIM)
    return out


def kappa(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(np.asarray(p_a) - np.asarray(p_b), axis=-1)
    return 1.0 / np.maximum(r, KAPPA_MIN_RANGE) ** 3


def nominal_states(classes, dt: float, current: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Linearization points ``(n, T+1, F)``: ego under its controls, others at constant velocity or heading."""
    current = np.atleast_2d(current)
    controls = np.asarray(controls, dtype=float).reshape(len(current), -1, dyn.CONTROL_DIM)
    layout = mats.BlockLayout(classes, controls.shape[1], dt)
    n, horizon = controls.shape[:2]
    out = np.empty((n, horizon + 1, layout.full_dim))
    steps = np.arange(horizon + 1) * dt
    for i, cls in enumerate(classes):
        bi = layout.block(i)
        s0 = current[:, bi]
        if cls.is_unicycle:
            for k in range(n):
                ctrl = controls[k] if i == 0 else np.zeros((horizon, 2))
                out[k, :, bi] = dyn.rollout(cls, s0[k], ctrl, dt)
        elif i == 0:
            a_mat, b_mat = dyn.double_integrator_matrices(dt)
            s = s0
            out[:, 0, bi] = s
            for t in range(horizon):
                s = s @ a_mat.T + controls[:, t] @ b_mat.T
                out[:, t + 1, bi] = s
        else:
            out[:, :, bi] = s0[:, None, :]
            out[:, :, bi.start:bi.start + 2] += steps[None, :, None] * s0[:, None, 2:]
    return out


def _dynamics_prediction(cls: AgentClass, is_ego: bool, prev, nominal, controls, dt):
    """One-step prediction of the agent's own dynamics, linearized at ``nominal``."""
    if not cls.is_unicycle:
        a_mat, b_mat = dyn.double_integrator_matrices(dt)
        out = prev @ a_mat.T
        return out + controls @ b_mat.T if is_ego else out
    out = np.empty_like(prev)
    flat_p, flat_n = prev.reshape(-1, 4), nominal.reshape(-1, 4)
    flat_u = controls.reshape(-1, 2) if is_ego else np.zeros((len(flat_p), 2))
    flat_o = out.reshape(-1, 4)
    for k in range(len(flat_p)):
        lin = dyn.linearize(cls, flat_n[k], flat_u[k], dt)
        flat_o[k] = lin.a_mat @ flat_p[k] + lin.b_mat @ flat_u[k] + lin.c_vec
    return out


@dataclass
class Design:
    """Regression data for a batch of transitions.

    ``x[i]`` is ``(n, T, P_i)`` raw features and ``y[i]`` is ``(n, T, D_i)``
    residual targets for each agent (the ego has no features).
    """

    x: dict
    y: dict
    kappas: dict  # (i, j) -> (n, T)
    num_windows: int


def build_design(classes, dt: float, prev: np.ndarray, nxt: np.ndarray, nominal: np.ndarray,
                 controls: np.ndarray, feature_map: FeatureMap) -> Design:
    """Features and targets for transitions ``prev -> nxt`` with linearization points ``nominal``.

    All state arrays are ``(n, T, F)``; ``controls`` is ``(n, T, C)``.
    """
    layout = mats.BlockLayout(classes, prev.shape[1], dt)
    x, y, kap = {}, {}, {}
    for i, cls in enumerate(classes):
        bi = layout.block(i)
        pred = _dynamics_prediction(cls, i == 0, prev[..., bi], nominal[..., bi], controls, dt)
        y[i] = nxt[..., bi] - pred
        if i == 0:
            x[i] = np.zeros(prev.shape[:2] + (0,))
            continue
        cols = []
        for j, cls_j in enumerate(classes):
            if j == i:
                continue
            bj = layout.block(j)
            sel = mats.relative_selector(cls, cls_j)
            rel = prev[..., bj] - nominal[..., bi] @ sel.T
            k_ij = kappa(nominal[..., bi][..., :2], nominal[..., bj][..., :2])
            kap[(i, j)] = k_ij
            cols += [rel, k_ij[..., None] * rel]
        if feature_map is FeatureMap.RELATIVE_STATE_PLUS_EGO_CONTROL:
            cols += [controls, kap[(i, 0)][..., None] * controls]
        x[i] = np.concatenate(cols, axis=-1)
    return Design(x, y, kap, prev.shape[0])


def _stack_windows(windows) -> tuple:
    windows = list(windows)
    if not windows:
        raise ValueError("no windows supplied")
    classes = windows[0].classes
    dt = windows[0].dt
    horizon = windows[0].horizon
    for w in windows:
        if w.classes != classes or w.horizon != horizon or w.dt != dt:
            raise ValueError("all windows must share agent classes, dt and horizon")
    current = np.array([w.current for w in windows])
    future = np.array([w.future for w in windows])
    controls = np.array([w.ego_controls for w in windows])
    return classes, dt, current, future, controls


def window_design(windows, feature_map: FeatureMap) -> tuple:
    classes, dt, current, future, controls = _stack_windows(windows)
    nominal = nominal_states(classes, dt, current, controls)
    prev = np.concatenate([current[:, None], future[:, :-1]], axis=1)
    return classes, dt, build_design(classes, dt, prev, future, nominal[:, :-1], controls, feature_map)


def as_windows(data) -> list:
    data = list(data)
    if data and isinstance(data[0], Scene):
        return [w for s in data for w in s.windows()]
    return data


# --- EM pieces ---------------------------------------------------------------

def _residuals(model: FittedModel, design: Design, i: int, z: int) -> np.ndarray:
    return design.y[i] - np.einsum("ntp,tpd->ntd", design.x[i], model.weights[i][z])


def mode_logliks(model: FittedModel, design: Design) -> np.ndarray:
    """Teacher-forced log density of every window under every mode: (n, Z)."""
    layout = model.layout
    out = np.zeros((design.num_windows, model.num_modes))
    for z in range(model.num_modes):
        for i in range(len(model.classes)):
            q = np.maximum(model.q[z][:, layout.block(i)], model.q_floor)
            r = _residuals(model, design, i, z) / q
            out[:, z] += -0.5 * np.sum(r * r, axis=(1, 2)) - np.sum(np.log(q)) - 0.5 * q.size * _LOG_2PI
    return out


def _log_prior(pi) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(pi)


def responsibilities_from(model: FittedModel, logliks: np.ndarray) -> np.ndarray:
    joint = logliks + _log_prior(model.pi)
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def e_step(model: FittedModel, data) -> np.ndarray:
    """Posterior mode probabilities of each window given its observed future."""
    _, _, design = window_design(as_windows(data), model.feature_map)
    if model.num_modes == 1:
        return np.ones((design.num_windows, 1))
    return responsibilities_from(model, mode_logliks(model, design))


def penalty(model: FittedModel) -> float:
    """Ridge penalty ``ridge / 2 * |w_d|^2 / q_d^2`` on the scaled weights of every output ``d``.

    Scaling by the output's noise variance makes the optimal weights a plain
    ridge solution independent of ``q``, so the M-step is an exact joint
    maximizer and the fit is equivariant under planar rotations.
    """
    if model.ridge == 0.0:
        return 0.0
    layout = model.layout
    total = 0.0
    for i, w in model.weights.items():
        if w.shape[2] == 0:
            continue
        q = np.maximum(model.q[:, :, layout.block(i)], model.q_floor)
        total += 0.5 * model.ridge * float(np.sum(np.sum(model.scaled_weights(i) ** 2, axis=2) / q**2))
    return total


def objective(model: FittedModel, design: Design) -> tuple:
    """(mixture log-likelihood, penalized objective) of a design."""
    joint = mode_logliks(model, design) + _log_prior(model.pi)
    ll = float(np.sum(logsumexp(joint, axis=1)))
    return ll, ll - penalty(model)


def _feature_scale(design: Design) -> dict:
    # one scale per consecutive column pair so planar (x, y) features stay rotation equivariant
    out = {}
    for i, x in design.x.items():
        p = x.shape[-1]
        if p == 0:
            out[i] = np.zeros(0)
            continue
        ms = np.mean(x.reshape(-1, p) ** 2, axis=0)
        ms = np.repeat(ms.reshape(-1, 2).mean(axis=1), 2)
        rms = np.sqrt(ms)
        out[i] = np.where(rms > 1e-12, rms, 1.0)
    return out


def _m_step(resp: np.ndarray, classes, dt: float, design: Design, config: FitConfig,
            scale: dict, previous: FittedModel | None = None) -> FittedModel:
    """Maximize the expected penalized log-likelihood for fixed responsibilities.

    Weights solve a weighted ridge regression on standardized features; the
    noise variance of each output is the weighted residual power plus the
    ridge term, floored at ``q_floor``.
    """
    n, n_modes = resp.shape
    layout = mats.BlockLayout(classes, design.y[0].shape[1], dt)
    horizon = layout.horizon
    lam = config.ridge
    weights = {}
    q = np.empty((n_modes, horizon, layout.full_dim))
    totals = resp.sum(axis=0)
    empty = totals <= 1e-12 * max(n, 1)
    for i in range(len(classes)):
        bi = layout.block(i)
        x = design.x[i] / scale[i]
        y = design.y[i]
        p, d = x.shape[-1], y.shape[-1]
        w_scaled = np.zeros((n_modes, horizon, p, d))
        sse = np.zeros((n_modes, horizon, d))
        for z in range(n_modes):
            wz = resp[:, z]
            for t in range(horizon):
                xt, yt = x[:, t], y[:, t]
                if p:
                    if empty[z]:
                        if previous is not None and lam == 0.0:
                            w_scaled[z, t] = previous.scaled_weights(i)[z, t]
                    else:
                        xw = xt * wz[:, None]
                        w_scaled[z, t] = _solve_normal(xw.T @ xt + lam * np.eye(p), xw.T @ yt, lam)
                    res = yt - xt @ w_scaled[z, t]
                else:
                    res = yt
                sse[z, t] = wz @ (res * res)
        pen = lam * np.sum(w_scaled**2, axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            var = (sse + pen) / totals[:, None, None]
        q_i = np.maximum(np.sqrt(np.where(np.isfinite(var), var, 0.0)), config.q_floor)
        if previous is not None:
            q_i[empty] = previous.q[empty][:, :, bi]
        q[:, :, bi] = q_i
        weights[i] = w_scaled / scale[i][None, None, :, None]
    pi = totals / totals.sum()
    return FittedModel(classes, dt, horizon, config.feature_map, weights, scale, q, pi,
                       config.q_floor, config.ridge)


def _solve_normal(gram, rhs, lam):
    if lam == 0.0:
        eig = np.linalg.eigvalsh(gram)
        if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
            raise SingularRegression("normal equations are rank deficient; use ridge > 0")
    return np.linalg.solve(gram, rhs)


def m_step(resp, data, config: FitConfig) -> FittedModel:
    """Weighted ridge regression per (mode, step, agent) plus noise and prior updates."""
    resp = np.asarray(resp, dtype=float)
    if np.any(resp < 0) or not np.allclose(resp.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("responsibilities must be row-normalized")
    classes, dt, design = window_design(as_windows(data), config.feature_map)
    return _m_step(resp, classes, dt, design, config, _feature_scale(design))


def initial_responsibilities(classes, dt: float, current, future, controls, config: FitConfig) -> np.ndarray:
    """Smoothed one-hot labels from k-means on final-position deviations from constant velocity.

    Each agent contributes its signed deviation along the direction from the
    ego at their nominal closest approach: positive when pushed away, negative
    when drawn in. The feature does not depend on world heading.
    """
    n = len(current)
    n_modes = config.num_modes
    if n_modes == 1:
        return np.ones((n, 1))
    if n_modes > n:
        raise ValueError(f"{n_modes} modes requested for {n} windows")
    layout = mats.BlockLayout(classes, future.shape[1], dt)
    nominal = nominal_states(classes, dt, current, controls)
    feats = []
    nominal_ego = nominal[:, :, layout.block(0)]
    for i in range(1, len(classes)):
        bi = layout.block(i)
        dev = future[:, -1, bi][:, :2] - nominal[:, -1, bi][:, :2]
        # frame whose x axis points from the ego to the agent at their nominal closest approach
        rel = nominal[:, :, bi][:, :, :2] - nominal_ego[:, :, :2]
        k_min = np.argmin(np.linalg.norm(rel, axis=2), axis=1)
        axis = rel[np.arange(n), k_min]
        axis /= np.maximum(np.linalg.norm(axis, axis=1, keepdims=True), 1e-12)
        feats.append(np.sum(dev * axis, axis=1)[:, None])
    data = np.concatenate(feats, axis=1) if feats else np.zeros((n, 1))
    # close passes give heavy-tailed deviations; compress them so k-means does not spend clusters on outliers
    spread = np.median(np.abs(data), axis=0)
    data = np.arcsinh(data / np.where(spread > 0, spread, 1.0))
    _, labels = kmeans2(data, n_modes, minit="++", seed=np.random.default_rng(config.rng_seed))
    eps = config.init_smoothing
    resp = np.full((n, n_modes), eps / n_modes)
    resp[np.arange(n), labels] += 1.0 - eps
    return resp


def fit(data, config: FitConfig | None = None) -> FittedModel:
    """Run EM to convergence on scenes or windows."""
    config = config or FitConfig()
    windows = as_windows(data)
    if not windows:
        raise ValueError("no training data")
    classes, dt, current, future, controls = _stack_windows(windows)
    _, _, design = window_design(windows, config.feature_map)
    scale = _feature_scale(design)
    n = design.num_windows
    resp = initial_responsibilities(classes, dt, current, future, controls, config)
    model = _m_step(resp, classes, dt, design, config, scale)
    log = []
    prev_obj = -np.inf
    for it in range(config.max_em_iters):
        logliks = mode_logliks(model, design)
        joint = logliks + _log_prior(model.pi)
        ll = float(np.sum(logsumexp(joint, axis=1)))
        obj = ll - penalty(model)
        log.append({"iteration": it, "loglik": ll, "objective": obj, "pi": model.pi.tolist()})
        logger.info("EM iter %d: loglik/window %.6f", it, ll / n)
        if obj < prev_obj - config.monotone_slack * max(1.0, abs(prev_obj)):
            raise MonotonicityError(f"EM objective decreased from {prev_obj!r} to {obj!r}")
        if it > 0 and (obj - prev_obj) / n < config.loglik_tol:
            break
        prev_obj = obj
        if config.num_modes == 1 and it > 0:
            break
        resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        model = _m_step(resp, classes, dt, design, config, scale, previous=model)
    model.log = log
    return model


# --- prediction --------------------------------------------------------------

def _infer_ego_controls(cls: AgentClass, states: np.ndarray, dt: float) -> np.ndarray:
    """Zero-order-hold controls that reproduce the observed ego transitions exactly."""
    d = np.diff(states, axis=0)
    if cls.is_unicycle:
        return np.stack([d[:, 2], d[:, 3]], axis=1) / dt
    return d[:, 2:] / dt


def history_mode_logliks(model: FittedModel, history: np.ndarray, history_controls=None) -> np.ndarray:
    """Teacher-forced fit of the observed history under each mode's first-step weights."""
    history = np.asarray(history, dtype=float)
    if len(history) < 2:
        return np.zeros(model.num_modes)
    layout = model.layout
    if history_controls is None:
        history_controls = _infer_ego_controls(model.classes[0], history[:, layout.block(0)], model.dt)
    prev, nxt = history[None, :-1], history[None, 1:]
    design = build_design(model.classes, model.dt, prev, nxt, prev,
                          np.asarray(history_controls, dtype=float)[None], model.feature_map)
    out = np.zeros(model.num_modes)
    for z in range(model.num_modes):
        for i in range(len(model.classes)):
            q = np.maximum(model.q[z, 0, layout.block(i)], model.q_floor)
            r = (design.y[i][0] - design.x[i][0] @ model.weights[i][z, 0]) / q
            out[z] += -0.5 * np.sum(r * r) - r.shape[0] * np.sum(np.log(q))
    return out


def mode_probabilities(model: FittedModel, history, history_controls=None) -> np.ndarray:
    joint = _log_prior(model.pi) + history_mode_logliks(model, history, history_controls)
    return np.exp(joint - logsumexp(joint))


def learned_blocks(model: FittedModel, nominal: np.ndarray, z: int) -> mats.LearnedBlocks:
    """Blocks of mode ``z`` for one window's nominal trajectory ``(T(+1), F)``."""
    layout = model.layout
    horizon = model.horizon
    a_off, b_blk, q_blk = {}, {}, {}
    for i, cls in enumerate(model.classes):
        bi = layout.block(i)
        q_blk[i] = model.q[z][:, bi]
        if i == 0:
            continue
        for j in range(len(model.classes)):
            if j == i:
                continue
            k_ij = kappa(nominal[:horizon, bi][:, :2], nominal[:horizon, layout.block(j)][:, :2])
            a_off[(i, j)] = model.a_block(z, i, j, k_ij)
        k_i0 = kappa(nominal[:horizon, bi][:, :2], nominal[:horizon, layout.block(0)][:, :2])
        b = model.b_block(z, i, k_i0)
        if b is not None:
            b_blk[i] = b
    return mats.LearnedBlocks(a_off, b_blk, q_blk)


def predict(model: FittedModel, history, ego_future_controls, history_controls=None,
            top_k: int | None = None) -> mats.MatsSystem:
    """Mixture prediction for one history window under a candidate ego plan.

    ``history`` is ``(H+1, F)`` ending at the present joint state. With
    ``top_k`` only the most probable modes are assembled and their
    probabilities renormalized.
    """
    history = np.asarray(history, dtype=float)
    controls = np.asarray(ego_future_controls, dtype=float)
    layout = model.layout
    if history.ndim != 2 or history.shape[1] != layout.full_dim:
        raise ValueError(f"history must be (H+1, {layout.full_dim}) for the trained layout")
    if controls.shape != (model.horizon, layout.control_dim):
        raise ValueError(f"ego controls must be ({model.horizon}, {layout.control_dim})")
    nominal = nominal_states(model.classes, model.dt, history[-1], controls)[0]
    probs = mode_probabilities(model, history, history_controls)
    order = np.argsort(-probs, kind="stable")
    keep = np.sort(order[:top_k]) if top_k else np.arange(model.num_modes)
    modes = []
    nom = mats.NominalTrajectory(nominal, controls)
    for z in keep:
        mode = mats.assemble(layout, learned_blocks(model, nominal, int(z)), nom, model.q_floor)
        mats.check_ego_mask(layout, mode)
        modes.append(mode)
    p = probs[keep]
    return mats.MatsSystem(layout, tuple(modes), p / p.sum())


def predict_window(model: FittedModel, window: Window, top_k: int | None = None, ego_controls=None) -> mats.MatsSystem:
    u = window.ego_controls if ego_controls is None else ego_controls
    return predict(model, window.history, u, window.history_controls, top_k)


# --- persistence --------------------------------------------------------------

def to_dict(model: FittedModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "classes": [c.value for c in model.classes],
        "dt": model.dt,
        "horizon": model.horizon,
        "feature_map": model.feature_map.value,
        "q_floor": model.q_floor,
        "ridge": model.ridge,
        "pi": model.pi.tolist(),
        "q": {"shape": list(model.q.shape), "data": model.q.ravel().tolist()},
        "weights": {str(i): {"shape": list(w.shape), "data": w.ravel().tolist()} for i, w in model.weights.items()},
        "feature_scale": {str(i): s.tolist() for i, s in model.feature_scale.items()},
    }


def from_dict(doc: dict) -> FittedModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {doc.get('format')!r}")

    def arr(entry):
        return np.array(entry["data"], dtype=float).reshape(entry["shape"])

    return FittedModel(
        tuple(doc["classes"]), float(doc["dt"]), int(doc["horizon"]), doc["feature_map"],
        {int(i): arr(w) for i, w in doc["weights"].items()},
        {int(i): np.array(s, dtype=float) for i, s in doc["feature_scale"].items()},
        arr(doc["q"]), np.array(doc["pi"], dtype=float), float(doc["q_floor"]), float(doc["ridge"]),
    )


def save_model(model: FittedModel, path) -> None:
    Path(path).write_text(json.dumps(to_dict(model)))


def load_model(path) -> FittedModel:
    return from_dict(json.loads(Path(path).read_text()))


def write_training_log(model: FittedModel, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loglik_nats", "objective_nats"] + [f"pi_{z}" for z in range(model.num_modes)])
        for row in model.log:
            writer.writerow([row["iteration"], repr(row["loglik"]), repr(row["objective"])] + [repr(p) for p in row["pi"]])
