"""Per-agent dynamics: exact zero-order-hold steps and their Jacobians.

Two state layouts are supported:

* double integrator ``[x, y, vx, vy]`` driven by planar acceleration ``[ax, ay]``
  (pedestrians and particles);
* dynamically-extended unicycle ``[X, Y, phi, v]`` driven by ``[omega, a]``
  (vehicles).

Both discretizations are exact for piecewise-constant controls.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from math import factorial

import numpy as np

STATE_DIM = 4
CONTROL_DIM = 2

# |omega * dt| below this uses the power-series form of the unicycle integrals.
SERIES_SWITCH = 1e-2
_SERIES_TERMS = 14


class AgentClass(str, enum.Enum):
    PEDESTRIAN = "Pedestrian"
    VEHICLE = "Vehicle"
    PARTICLE = "Particle"

    @property
    def is_unicycle(self) -> bool:
        return self is AgentClass.VEHICLE

    @property
    def state_dim(self) -> int:
        return STATE_DIM

    @property
    def control_dim(self) -> int:
        return CONTROL_DIM


@dataclass(frozen=True)
class LinearizedStep:
    """Affine one-step model ``s' = a_mat @ s + b_mat @ u + c_vec``."""

    a_mat: np.ndarray
    b_mat: np.ndarray
    c_vec: np.ndarray
    dt: float

    def __call__(self, state, control) -> np.ndarray:
        return self.a_mat @ np.asarray(state) + self.b_mat @ np.asarray(control) + self.c_vec


def _check(state, control, dt):
    state = np.asarray(state, dtype=float)
    control = np.asarray(control, dtype=float)
    if state.shape != (STATE_DIM,) or control.shape != (CONTROL_DIM,):
        raise ValueError(f"expected state (4,) and control (2,), got {state.shape} and {control.shape}")
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(control)) and np.isfinite(dt)):
        raise ValueError("non-finite input to dynamics step")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return state, control, float(dt)


def double_integrator_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    eye = np.eye(2)
    a_mat = np.block([[eye, dt * eye], [np.zeros((2, 2)), eye]])
    b_mat = np.vstack([0.5 * dt * dt * eye, dt * eye])
    return a_mat, b_mat


def double_integrator_step(state, control, dt: float) -> np.ndarray:
    state, control, dt = _check(state, control, dt)
    a_mat, b_mat = double_integrator_matrices(dt)
    return a_mat @ state + b_mat @ control


def _moments(omega: float, dt: float, order: int) -> np.ndarray:
    """Complex integrals ``E_k = int_0^dt tau^k exp(i omega tau) dtau`` for k = 0..order."""
    out = np.empty(order + 1, dtype=complex)
    x = omega * dt
    if abs(x) < SERIES_SWITCH:
        ix = 1j * x
        for k in range(order + 1):
            terms = [ix**n / (factorial(n) * (n + k + 1)) for n in range(_SERIES_TERMS)]
            out[k] = dt ** (k + 1) * sum(reversed(terms))
        return out
    iw = 1j * omega
    e = np.exp(1j * x)
    out[0] = (e - 1.0) / iw
    for k in range(1, order + 1):
        out[k] = (dt**k * e - k * out[k - 1]) / iw
    return out


def unicycle_step(state, control, dt: float) -> np.ndarray:
    """Exact ZOH update of the dynamically-extended unicycle.

    For ``|omega dt|`` above ``SERIES_SWITCH`` this is the closed form with
    ``D_S = (sin(phi + omega dt) - sin phi) / omega`` and
    ``D_C = (cos(phi + omega dt) - cos phi) / omega``. Below it, the same
    integrals are summed as a power series in ``omega dt``, which is free of the
    cancellation the closed form suffers as ``omega -> 0`` and reduces to
    straight-line motion at ``omega = 0``.
    """
    state, control, dt = _check(state, control, dt)
    x, y, phi, v = state
    omega, a = control
    if abs(omega * dt) >= SERIES_SWITCH:
        s0, c0 = np.sin(phi), np.cos(phi)
        s1, c1 = np.sin(phi + omega * dt), np.cos(phi + omega * dt)
        d_s = (s1 - s0) / omega
        d_c = (c1 - c0) / omega
        dx = v * d_s + a * s1 * dt / omega + a / omega * d_c
        dy = -v * d_c - a * c1 * dt / omega + a / omega * d_s
    else:
        m = _moments(omega, dt, 1)
        p = np.exp(1j * phi) * (v * m[0] + a * m[1])
        dx, dy = p.real, p.imag
    return np.array([x + dx, y + dy, phi + omega * dt, v + a * dt])


def unicycle_jacobians(state, control, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``d step / d state`` and ``d step / d control`` of :func:`unicycle_step`."""
    state, control, dt = _check(state, control, dt)
    _, _, phi, v = state
    omega, a = control
    m = _moments(omega, dt, 2)
    rot = np.exp(1j * phi)
    disp = rot * (v * m[0] + a * m[1])
    d_v = rot * m[0]
    d_a = rot * m[1]
    d_omega = rot * 1j * (v * m[1] + a * m[2])

    a_mat = np.eye(4)
    a_mat[0, 2], a_mat[1, 2] = -disp.imag, disp.real
    a_mat[0, 3], a_mat[1, 3] = d_v.real, d_v.imag

    b_mat = np.zeros((4, 2))
    b_mat[0, 0], b_mat[1, 0] = d_omega.real, d_omega.imag
    b_mat[0, 1], b_mat[1, 1] = d_a.real, d_a.imag
    b_mat[2, 0] = dt
    b_mat[3, 1] = dt
    return a_mat, b_mat


def step(agent_class: AgentClass, state, control, dt: float) -> np.ndarray:
    if AgentClass(agent_class).is_unicycle:
        return unicycle_step(state, control, dt)
    return double_integrator_step(state, control, dt)


def linearize(agent_class: AgentClass, nominal_state, nominal_control, dt: float) -> LinearizedStep:
    """Affine model of one step, exact at the nominal point.

    ``c_vec`` is chosen so that ``step(nominal) == a_mat @ nominal_state +
    b_mat @ nominal_control + c_vec``; for the double integrator the model is
    exact everywhere and ``c_vec`` is zero.
    """
    agent_class = AgentClass(agent_class)
    state, control, dt = _check(nominal_state, nominal_control, dt)
    if not agent_class.is_unicycle:
        a_mat, b_mat = double_integrator_matrices(dt)
        return LinearizedStep(a_mat, b_mat, np.zeros(STATE_DIM), dt)
    a_mat, b_mat = unicycle_jacobians(state, control, dt)
    c_vec = unicycle_step(state, control, dt) - a_mat @ state - b_mat @ control
    return LinearizedStep(a_mat, b_mat, c_vec, dt)


def rollout(agent_class: AgentClass, state, controls, dt: float) -> np.ndarray:
    """Iterate :func:`step` over a control sequence; returns ``len(controls) + 1`` states."""
    out = [np.asarray(state, dtype=float)]
    for u in np.asarray(controls, dtype=float):
        out.append(step(agent_class, out[-1], u, dt))
    return np.array(out)


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)
