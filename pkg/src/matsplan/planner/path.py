"""Arc-length parameterized reference paths."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

logger = logging.getLogger(__name__)


class DegeneratePath(ValueError):
    pass


@dataclass(frozen=True)
class PathPoint:
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    dx: np.ndarray  # d x_ref / d theta
    dy: np.ndarray
    dheading: np.ndarray


class ReferencePath:
    """Planar cubic spline re-parameterized by arc length ``theta in [0, L]``.

    The waypoint spline is first fit against chord length, its true arc length
    is integrated numerically, and the curve is resampled densely and refit
    against arc length.
    """

    def __init__(self, waypoints, resample_step: float = 0.25):
        pts = np.asarray(waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
            raise DegeneratePath("need at least 4 planar waypoints")
        if not np.all(np.isfinite(pts)):
            raise DegeneratePath("waypoints must be finite")
        chords = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(chords < 1e-9):
            raise DegeneratePath("duplicate consecutive waypoints")
        u = np.concatenate([[0.0], np.cumsum(chords)])
        sx, sy = CubicSpline(u, pts[:, 0]), CubicSpline(u, pts[:, 1])
        dsx, dsy = sx.derivative(), sy.derivative()

        def speed(s):
            return np.hypot(dsx(s), dsy(s))

        seg = [quad(speed, u[k], u[k + 1], limit=200, epsabs=1e-12, epsrel=1e-12)[0] for k in range(len(u) - 1)]
        arc_at_knots = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(arc_at_knots[-1])

        # fine table of (u, arc) to invert arc length -> u
        n_fine = max(2000, int(self.length / resample_step) * 8)
        u_fine = np.linspace(0.0, u[-1], n_fine)
        sp_fine = speed(u_fine)
        arc_fine = np.zeros(n_fine)
        # Simpson increments between consecutive fine nodes, anchored to exact knot values
        mid = speed(0.5 * (u_fine[1:] + u_fine[:-1]))
        arc_fine[1:] = np.cumsum((u_fine[1:] - u_fine[:-1]) / 6.0 * (sp_fine[1:] + 4 * mid + sp_fine[:-1]))
        arc_fine *= self.length / arc_fine[-1]

        n_theta = max(int(np.ceil(self.length / resample_step)) + 1, 8)
        theta = np.linspace(0.0, self.length, n_theta)
        u_of_theta = np.interp(theta, arc_fine, u_fine)
        # one Newton correction of u(theta) using the exact speed
        for _ in range(2):
            arc_now = np.interp(u_of_theta, u_fine, arc_fine)
            u_of_theta = u_of_theta - (arc_now - theta) / speed(u_of_theta)
            u_of_theta = np.clip(u_of_theta, 0.0, u[-1])
        self._x = CubicSpline(theta, sx(u_of_theta))
        self._y = CubicSpline(theta, sy(u_of_theta))
        self._dx, self._dy = self._x.derivative(), self._y.derivative()
        self._ddx, self._ddy = self._dx.derivative(), self._dy.derivative()
        self._theta_grid = np.linspace(0.0, self.length, max(4 * n_theta, 200))
        self._heading_grid = np.unwrap(np.arctan2(self._dy(self._theta_grid), self._dx(self._theta_grid)))
        self.waypoints = pts

    def clamp(self, theta):
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < 0.0) or np.any(theta > self.length):
            logger.warning("path parameter outside [0, %.2f] clamped", self.length)
        return np.clip(theta, 0.0, self.length)

    def heading(self, theta):
        """Continuous (unwrapped) tangent angle."""
        theta = np.asarray(theta, dtype=float)
        raw = np.arctan2(self._dy(theta), self._dx(theta))
        ref = np.interp(theta, self._theta_grid, self._heading_grid)
        return ref + np.mod(raw - ref + np.pi, 2 * np.pi) - np.pi

    def __call__(self, theta) -> PathPoint:
        theta = self.clamp(theta)
        dx, dy = self._dx(theta), self._dy(theta)
        ddx, ddy = self._ddx(theta), self._ddy(theta)
        dheading = (dx * ddy - dy * ddx) / (dx * dx + dy * dy)
        return PathPoint(self._x(theta), self._y(theta), self.heading(theta), dx, dy, dheading)

    def xy(self, theta) -> np.ndarray:
        theta = np.clip(np.asarray(theta, dtype=float), 0.0, self.length)
        return np.stack([self._x(theta), self._y(theta)], axis=-1)

    def project(self, point, theta_guess: float | None = None, window: float | None = None) -> float:
        """Arc length of the closest path point (local search around ``theta_guess`` when given)."""
        p = np.asarray(point, dtype=float)
        if theta_guess is None or window is None:
            lo, hi = 0.0, self.length
        else:
            lo, hi = max(0.0, theta_guess - window), min(self.length, theta_guess + window)
        grid = np.linspace(lo, hi, max(int((hi - lo) / 0.05), 50))
        d2 = np.sum((self.xy(grid) - p) ** 2, axis=1)
        th = grid[int(np.argmin(d2))]
        for _ in range(8):
            pt = self(th)
            diff = np.array([pt.x - p[0], pt.y - p[1]])
            grad = diff @ np.array([pt.dx, pt.dy])
            hess = pt.dx**2 + pt.dy**2 + diff @ np.array([self._ddx(th), self._ddy(th)])
            if hess <= 0:
                break
            th = float(np.clip(th - grad / hess, 0.0, self.length))
        return float(th)


def fit_reference(waypoints, resample_step: float = 0.25) -> ReferencePath:
    return ReferencePath(waypoints, resample_step)
