"""Roll/pitch quadrotor kinematics and forward-Euler propagation.

State layout used by every array routine in the package::

    x = [px, py, pz, vx, vy, vz, phi, theta]
    u = [T, phi_d, theta_d]

Thrust is mass-normalised (m/s^2).  Yaw is not modelled and is treated as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

STATE_DIM = 8
INPUT_DIM = 3


def wrap_angle(a: float) -> float:
    """Map an angle into [-pi, pi]; values already in range are returned untouched."""
    if -math.pi <= a <= math.pi:
        return a
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _finite(name: str, values: Sequence[float]) -> None:
    for val in values:
        if not math.isfinite(val):
            raise ValueError(f"{name} must be finite, got {val!r}")


def _vec3(value) -> tuple[float, float, float]:
    out = tuple(float(c) for c in value)
    if len(out) != 3:
        raise ValueError(f"expected a 3-vector, got {len(out)} components")
    return out


@dataclass(frozen=True)
class VehicleState:
    p: tuple[float, float, float] = (0.0, 0.0, 0.0)
    v: tuple[float, float, float] = (0.0, 0.0, 0.0)
    phi: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        p, v = _vec3(self.p), _vec3(self.v)
        phi, theta = float(self.phi), float(self.theta)
        _finite("VehicleState", p + v + (phi, theta))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "phi", wrap_angle(phi))
        object.__setattr__(self, "theta", wrap_angle(theta))

    def as_array(self) -> np.ndarray:
        return np.array(self.p + self.v + (self.phi, self.theta), dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (STATE_DIM,):
            raise ValueError(f"state array must have shape (8,), got {a.shape}")
        return cls(tuple(a[0:3]), tuple(a[3:6]), a[6], a[7])


@dataclass(frozen=True)
class ControlInput:
    thrust: float
    phi_d: float = 0.0
    theta_d: float = 0.0

    def __post_init__(self):
        vals = (float(self.thrust), float(self.phi_d), float(self.theta_d))
        _finite("ControlInput", vals)
        if vals[0] < 0.0:
            raise ValueError(f"thrust must be >= 0, got {vals[0]}")
        object.__setattr__(self, "thrust", vals[0])
        object.__setattr__(self, "phi_d", vals[1])
        object.__setattr__(self, "theta_d", vals[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.thrust, self.phi_d, self.theta_d], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "ControlInput":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (INPUT_DIM,):
            raise ValueError(f"input array must have shape (3,), got {a.shape}")
        return cls(a[0], a[1], a[2])


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the model.

    ``drag`` holds the linear damping rates (1/s) acting on world-frame
    velocity; ``k_*``/``tau_*`` describe the first-order attitude response
    to the roll/pitch set-points.
    """

    g: float = 9.81
    drag: tuple[float, float, float] = (0.1, 0.1, 0.1)
    k_phi: float = 1.0
    k_theta: float = 1.0
    tau_phi: float = 0.5
    tau_theta: float = 0.5

    def __post_init__(self):
        drag = _vec3(self.drag)
        object.__setattr__(self, "drag", drag)
        _finite("ModelParams", (self.g, self.k_phi, self.k_theta, self.tau_phi, self.tau_theta) + drag)
        if self.g <= 0:
            raise ValueError("g must be positive")
        if min(drag) < 0:
            raise ValueError("drag coefficients must be non-negative")
        if self.k_phi <= 0 or self.k_theta <= 0:
            raise ValueError("attitude gains must be positive")
        if self.tau_phi <= 0 or self.tau_theta <= 0:
            raise ValueError("attitude time constants must be positive")

    def as_array(self) -> np.ndarray:
        """Packed as [g, Ax, Ay, Az, k_phi, k_theta, tau_phi, tau_theta]."""
        return np.array(
            (self.g,) + self.drag + (self.k_phi, self.k_theta, self.tau_phi, self.tau_theta),
            dtype=np.float64,
        )


# -- array kernels (shared with the optimiser) ---------------------------------


@numba.njit(cache=True, nogil=True)
def derivative_arr(x, u, prm, out):
    g = prm[0]
    sphi, cphi = math.sin(x[6]), math.cos(x[6])
    sth, cth = math.sin(x[7]), math.cos(x[7])
    t = u[0]
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    out[3] = sth * cphi * t - prm[1] * x[3]
    out[4] = -sphi * t - prm[2] * x[4]
    out[5] = cth * cphi * t - g - prm[3] * x[5]
    out[6] = (prm[4] * u[1] - x[6]) / prm[6]
    out[7] = (prm[5] * u[2] - x[7]) / prm[7]


@numba.njit(cache=True, nogil=True)
def _wrap(a):
    if -math.pi <= a <= math.pi:
        return a
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@numba.njit(cache=True, nogil=True)
def euler_step_arr(x, u, prm, dt, out):
    """``out = x + dt * f(x, u)``; ``out`` may alias ``x``."""
    sphi, cphi = math.sin(x[6]), math.cos(x[6])
    sth, cth = math.sin(x[7]), math.cos(x[7])
    t = u[0]
    ax = sth * cphi * t - prm[1] * x[3]
    ay = -sphi * t - prm[2] * x[4]
    az = cth * cphi * t - prm[0] - prm[3] * x[5]
    dphi = (prm[4] * u[1] - x[6]) / prm[6]
    dth = (prm[5] * u[2] - x[7]) / prm[7]
    vx, vy, vz = x[3], x[4], x[5]
    out[0] = x[0] + dt * vx
    out[1] = x[1] + dt * vy
    out[2] = x[2] + dt * vz
    out[3] = vx + dt * ax
    out[4] = vy + dt * ay
    out[5] = vz + dt * az
    out[6] = _wrap(x[6] + dt * dphi)
    out[7] = _wrap(x[7] + dt * dth)


@numba.njit(cache=True, nogil=True)
def rollout_arr(x0, inputs, prm, dt):
    n = inputs.shape[0]
    states = np.empty((n, 8))
    cur = x0.copy()
    for j in range(n):
        euler_step_arr(cur, inputs[j], prm, dt, cur)
        states[j, :] = cur
    return states


# -- public value-type API ------------------------------------------------------


def rotation_thrust(phi: float, theta: float, thrust: float) -> np.ndarray:
    """World-frame acceleration produced by ``thrust`` along the tilted body z axis.

    Rotation is roll about x followed by pitch about y: R = R_y(theta) @ R_x(phi).
    """
    _finite("rotation_thrust", (phi, theta, thrust))
    if thrust < 0:
        raise ValueError("thrust must be >= 0")
    cphi, sphi = math.cos(phi), math.sin(phi)
    cth, sth = math.cos(theta), math.sin(theta)
    return np.array([sth * cphi * thrust, -sphi * thrust, cth * cphi * thrust])


def derivative(x: VehicleState, u: ControlInput, params: ModelParams) -> np.ndarray:
    out = np.empty(STATE_DIM)
    derivative_arr(x.as_array(), u.as_array(), params.as_array(), out)
    return out


def euler_step(x: VehicleState, u: ControlInput, params: ModelParams, dt: float) -> VehicleState:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = np.empty(STATE_DIM)
    euler_step_arr(x.as_array(), u.as_array(), params.as_array(), float(dt), out)
    return VehicleState.from_array(out)


def rollout(
    x0: VehicleState, inputs: Sequence[ControlInput], params: ModelParams, dt: float
) -> list[VehicleState]:
    """Predicted states x_1..x_N; state j results from applying inputs[0..j-1]."""
    if len(inputs) == 0:
        raise ValueError("rollout needs at least one input")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    u = np.array([ui.as_array() for ui in inputs])
    states = rollout_arr(x0.as_array(), u, params.as_array(), float(dt))
    return [VehicleState.from_array(row) for row in states]


def hover_input(params: ModelParams) -> ControlInput:
    return ControlInput(params.g, 0.0, 0.0)
