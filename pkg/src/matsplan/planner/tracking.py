"""Contouring/lag tracking costs and collision half-planes."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from matsplan.planner.path import ReferencePath

logger = logging.getLogger(__name__)


def tracking_errors(path: ReferencePath, x, y, theta) -> tuple:
    """Contouring and lag errors of position (x, y) against the path point at ``theta``."""
    pt = path(theta)
    dx, dy = np.asarray(x) - pt.x, np.asarray(y) - pt.y
    s, c = np.sin(pt.heading), np.cos(pt.heading)
    return s * dx - c * dy, -c * dx - s * dy


@dataclass(frozen=True)
class TrackingTerms:
    """Quadratic model ``z^T gamma z + l^T z + const`` of the weighted errors in ``z = (X, Y, theta)``."""

    gamma: np.ndarray  # (T, 3, 3)
    linear: np.ndarray  # (T, 3)
    grad_contour: np.ndarray  # (T, 3)
    grad_lag: np.ndarray  # (T, 3)
    contour: np.ndarray  # (T,) errors at the nominal
    lag: np.ndarray


def tracking_cost_terms(path: ReferencePath, nominal_xy, nominal_theta, q_c: float, q_l: float) -> TrackingTerms:
    """First-order expansion of contouring and lag errors about the nominal points.

    With ``e ~ g . z + h`` for each error the cost ``q_c e_c^2 + q_l e_l^2`` has
    Hessian-half ``gamma = q_c g_c g_c^T + q_l g_l g_l^T`` (PSD) and linear term
    ``2 (q_c h_c g_c + q_l h_l g_l)``.
    """
    if q_c < 0 or q_l < 0:
        raise ValueError("tracking weights must be non-negative")
    xy = np.atleast_2d(np.asarray(nominal_xy, dtype=float))
    theta = path.clamp(np.atleast_1d(np.asarray(nominal_theta, dtype=float)))
    pt = path(theta)
    dx, dy = xy[:, 0] - pt.x, xy[:, 1] - pt.y
    s, c = np.sin(pt.heading), np.cos(pt.heading)
    e_c = s * dx - c * dy
    e_l = -c * dx - s * dy
    # d/dtheta uses the reference derivatives and the heading rate
    g_c = np.stack([s, -c, pt.dheading * (c * dx + s * dy) - s * pt.dx + c * pt.dy], axis=1)
    g_l = np.stack([-c, -s, pt.dheading * (s * dx - c * dy) + c * pt.dx + s * pt.dy], axis=1)
    z = np.stack([xy[:, 0], xy[:, 1], theta], axis=1)
    h_c = e_c - np.sum(g_c * z, axis=1)
    h_l = e_l - np.sum(g_l * z, axis=1)
    gamma = q_c * g_c[:, :, None] * g_c[:, None, :] + q_l * g_l[:, :, None] * g_l[:, None, :]
    linear = 2.0 * (q_c * h_c[:, None] * g_c + q_l * h_l[:, None] * g_l)
    return TrackingTerms(gamma, linear, g_c, g_l, e_c, e_l)


@dataclass(frozen=True)
class HalfPlane:
    """Constraint ``normal . (p_ego - p_agent) >= margin`` at one (mode, agent, step)."""

    mode: int
    agent: int
    step: int
    normal: np.ndarray
    margin: float

    def slack(self, p_ego, p_agent) -> float:
        return float(self.normal @ (np.asarray(p_ego) - np.asarray(p_agent)) - self.margin)


def collision_halfplanes(ego_xy, agent_xy, margin: float, mode: int = 0, steps=None, min_separation: float = 1e-9) -> list:
    """Separating half-planes between ego nominal positions and agent mean positions.

    ``ego_xy`` is ``(T, 2)`` and ``agent_xy`` is ``(T, K, 2)``; agent indices
    in the result start at 1 (the ego is 0). The normal points from the agent
    to the ego. Where the nominal comes closer than ``margin`` its direction
    is unreliable (a nominal cutting through an agent flips it), so the
    previous step's normal is kept there and wherever the fresh normal would
    turn by more than 90 degrees in one step. When the points coincide and there is no
    previous normal the constraint is dropped with a warning.
    """
    ego_xy = np.asarray(ego_xy, dtype=float)
    agent_xy = np.asarray(agent_xy, dtype=float)
    if not (np.all(np.isfinite(ego_xy)) and np.all(np.isfinite(agent_xy))):
        raise ValueError("positions must be finite")
    horizon, n_agents = agent_xy.shape[:2]
    steps = range(horizon) if steps is None else steps
    out = []
    for k in range(n_agents):
        prev = None
        for t in steps:
            diff = ego_xy[t] - agent_xy[t, k]
            dist = float(np.hypot(*diff))
            fresh = diff / dist if dist > min_separation else None
            if fresh is not None and (prev is None or (dist >= margin and fresh @ prev > 0.0)):
                normal = fresh
            elif prev is not None:
                normal = prev
            else:
                logger.warning("ego and agent %d coincide at step %d; half-plane dropped", k + 1, t)
                continue
            prev = normal
            out.append(HalfPlane(mode, k + 1, t, normal, float(margin)))
    return out
