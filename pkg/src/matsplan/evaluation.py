"""Prediction metrics: final displacement error, baselines and block-norm analysis."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from matsplan import dynamics as dyn
from matsplan import fitter, mats
from matsplan.scenes import Scene, Window

INTERACTION_RADIUS = 5.0


def final_displacement_error(predicted_positions, true_positions) -> np.ndarray:
    """Per-agent Euclidean error at the last step; inputs are (T, N, 2)."""
    pred = np.asarray(predicted_positions, dtype=float)
    true = np.asarray(true_positions, dtype=float)
    return np.linalg.norm(pred[-1] - true[-1], axis=-1)


def constant_velocity_forecast(window: Window) -> np.ndarray:
    """Positions (T, N, 2) under constant velocity (or constant heading and speed) from the present state."""
    layout = mats.BlockLayout(window.classes, window.horizon, window.dt)
    out = np.empty((window.horizon, layout.num_agents, 2))
    for i, cls in enumerate(window.classes):
        s = window.current[layout.block(i)]
        traj = dyn.rollout(cls, s, np.zeros((window.horizon, 2)), window.dt)
        out[:, i] = traj[1:, :2]
    return out


def _positions(window: Window, joint: np.ndarray) -> np.ndarray:
    layout = mats.BlockLayout(window.classes, window.horizon, window.dt)
    return layout.positions(joint)


@dataclass
class WindowResult:
    scene_id: str
    start: int
    fde_model: float
    fde_cv: float
    min_distance: float
    min_step: int
    mode: int
    mode_prob: float


def min_distance_profile(window: Window) -> np.ndarray:
    """Smallest ego-to-agent distance at each future step."""
    pos = _positions(window, window.future)
    return np.linalg.norm(pos[:, 1:] - pos[:, :1], axis=-1).min(axis=1)


def evaluate_window(model: fitter.FittedModel, window: Window) -> WindowResult:
    system = fitter.predict_window(model, window, top_k=1)
    means = mats.rollout_means(system.modes[0], window.current, window.ego_controls)
    true = _positions(window, window.future)[:, 1:]
    pred = _positions(window, means)[:, 1:]
    cv = constant_velocity_forecast(window)[:, 1:]
    prof = min_distance_profile(window)
    probs = fitter.mode_probabilities(model, window.history, window.history_controls)
    z = int(np.argmax(probs))
    return WindowResult(window.scene_id, window.start,
                        float(final_displacement_error(pred, true).mean()),
                        float(final_displacement_error(cv, true).mean()),
                        float(prof.min()), int(np.argmin(prof)), z, float(probs[z]))


def evaluate(model: fitter.FittedModel, scenes) -> list:
    return [evaluate_window(model, w) for w in fitter.as_windows(scenes)]


@dataclass
class FdeSummary:
    fde_model: float
    fde_cv: float
    fde_model_interacting: float
    fde_cv_interacting: float
    num_windows: int
    num_interacting: int

    @property
    def improvement_interacting(self) -> float:
        return 1.0 - self.fde_model_interacting / self.fde_cv_interacting


def summarize(results, radius: float = INTERACTION_RADIUS) -> FdeSummary:
    fm = np.array([r.fde_model for r in results])
    fc = np.array([r.fde_cv for r in results])
    inter = np.array([r.min_distance < radius for r in results])
    nan = float("nan")
    return FdeSummary(float(fm.mean()), float(fc.mean()),
                      float(fm[inter].mean()) if inter.any() else nan,
                      float(fc[inter].mean()) if inter.any() else nan,
                      len(results), int(inter.sum()))


def block_norms(system: mats.MatsSystem, mode: int, target: int, source: int) -> tuple:
    """Per-step Frobenius norms of ``A_{target,source}`` and ``B_target`` in one mode."""
    lay = system.layout
    m = system.modes[mode]
    bi, bj = lay.block(target), lay.block(source)
    a = np.linalg.norm(m.a_seq[:, bi, bj], axis=(1, 2))
    b = np.linalg.norm(m.b_seq[:, bi, :], axis=(1, 2))
    return a, b


def normalize_max(values) -> np.ndarray:
    """Scale so the largest entry is 1 (zero arrays are returned unchanged)."""
    v = np.asarray(values, dtype=float)
    top = np.max(np.abs(v)) if v.size else 0.0
    return v / top if top > 0 else v


@dataclass
class PeakResult:
    scene_id: str
    start: int
    min_step: int
    peak_step: int
    first_ratio: float
    last_ratio: float
    norms: np.ndarray

    @property
    def peak_aligned(self) -> bool:
        return abs(self.peak_step - self.min_step) <= 2

    @property
    def dissipates(self) -> bool:
        return self.first_ratio <= 0.5 and self.last_ratio <= 0.5


def interaction_window(scene: Scene, radius: float = INTERACTION_RADIUS, edge: int = 2):
    """The window whose horizon best centres the scene's closest approach, or None.

    A scene counts as interacting when its closest ego-agent approach is under
    ``radius`` and falls at least ``edge`` steps inside some window's horizon.
    """
    windows = scene.windows()
    if not windows:
        return None
    dist = np.linalg.norm(scene.states[:, 1:, :2] - scene.states[:, :1, :2], axis=-1).min(axis=1)
    k_min = int(np.argmin(dist))
    if dist[k_min] >= radius:
        return None
    horizon = windows[0].horizon
    centre = (horizon - 1) / 2.0
    best, best_off = None, None
    for w in windows:
        idx = k_min - (w.start + len(w.history) - 1)  # step index of the block acting on the closest state
        if edge <= idx <= horizon - 1 - edge:
            off = abs(idx - centre)
            if best is None or off < best_off:
                best, best_off = w, off
    return best


def peak_analysis(model: fitter.FittedModel, window: Window, target: int = 1, source: int = 0) -> PeakResult:
    """Where the most likely mode's learned ``A_{target,source}`` is largest relative to closest approach."""
    system = fitter.predict_window(model, window, top_k=1)
    a, _ = block_norms(system, 0, target, source)
    # block t maps s[t] to s[t+1], so compare against distances of the states it acts on
    inputs = np.vstack([window.current, window.future[:-1]])
    pos = _positions(window, inputs)
    d = np.linalg.norm(pos[:, target] - pos[:, source], axis=-1)
    peak = float(a.max())
    ratio = (lambda v: float(v / peak)) if peak > 0 else (lambda v: float("inf"))
    return PeakResult(window.scene_id, window.start, int(np.argmin(d)), int(np.argmax(a)),
                      ratio(a[0]), ratio(a[-1]), a)


def interaction_peaks(model: fitter.FittedModel, scenes, radius: float = INTERACTION_RADIUS) -> list:
    out = []
    for scene in scenes:
        w = interaction_window(scene, radius)
        if w is not None:
            out.append(peak_analysis(model, w))
    return out


# --- plot-ready tables ---------------------------------------------------------

def write_fde_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "window_start", "fde_model_m", "fde_cv_m", "min_distance_m",
                         "min_step", "mode", "mode_prob"])
        for r in results:
            writer.writerow([r.scene_id, r.start, repr(r.fde_model), repr(r.fde_cv), repr(r.min_distance),
                             r.min_step, r.mode, repr(r.mode_prob)])


def fde_by_horizon(model: fitter.FittedModel, windows) -> np.ndarray:
    """Mean displacement error of the most likely mode at each future step: (T, 2) model and baseline."""
    model_err, cv_err = [], []
    for w in windows:
        system = fitter.predict_window(model, w, top_k=1)
        means = mats.rollout_means(system.modes[0], w.current, w.ego_controls)
        true = _positions(w, w.future)[:, 1:]
        model_err.append(np.linalg.norm(_positions(w, means)[:, 1:] - true, axis=-1).mean(axis=1))
        cv_err.append(np.linalg.norm(constant_velocity_forecast(w)[:, 1:] - true, axis=-1).mean(axis=1))
    return np.stack([np.mean(model_err, axis=0), np.mean(cv_err, axis=0)], axis=1)


def write_horizon_csv(table: np.ndarray, dt: float, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "t_s", "fde_model_m", "fde_cv_m"])
        for k, (m, c) in enumerate(table):
            writer.writerow([k + 1, repr((k + 1) * dt), repr(float(m)), repr(float(c))])


def block_norm_rows(model: fitter.FittedModel, windows) -> list:
    """Per (window, mode, step, block) Frobenius norms of every learned block, plus a normalized column."""
    rows = []
    for w in windows:
        system = fitter.predict_window(model, w)
        lay = system.layout
        for z in range(system.num_modes):
            for i in range(1, lay.num_agents):
                for j in range(lay.num_agents):
                    if j == i:
                        continue
                    a, _ = block_norms(system, z, i, j)
                    rows += [(w.scene_id, w.start, z, t, f"A_{i}{j}", float(v)) for t, v in enumerate(a)]
                _, b = block_norms(system, z, i, 0)
                rows += [(w.scene_id, w.start, z, t, f"B_{i}", float(v)) for t, v in enumerate(b)]
    return rows


def write_block_norm_csv(rows, path) -> None:
    """Raw norms and norms divided by the largest value of the same block kind (A or B)."""
    tops = {}
    for r in rows:
        kind = r[4][0]
        tops[kind] = max(tops.get(kind, 0.0), r[5])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "window_start", "mode", "step", "block", "frobenius", "frobenius_normalized"])
        for r in rows:
            top = tops[r[4][0]]
            writer.writerow(list(r[:5]) + [repr(r[5]), repr(r[5] / top if top > 0 else 0.0)])


def write_mode_prob_csv(model: fitter.FittedModel, windows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "window_start"] + [f"p_mode_{z}" for z in range(model.num_modes)])
        for w in windows:
            p = fitter.mode_probabilities(model, w.history, w.history_controls)
            writer.writerow([w.scene_id, w.start] + [repr(float(v)) for v in p])
