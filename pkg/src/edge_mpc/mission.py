"""Mission sequencing: take-off, hover at the start point, then waypoint following."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .dynamics import ControlInput, ModelParams, VehicleState, hover_input

DEFAULT_TOLERANCE = 0.4
HOVER_POINT = (0.0, 0.0, 1.0)
HOVER_HOLD_S = 2.0


class Phase(enum.Enum):
    IDLE = "idle"
    TAKEOFF = "takeoff"
    HOVER = "hover"
    TRACKING = "tracking"
    DONE = "done"


@dataclass(frozen=True)
class TrajectorySpec:
    """Reference path.

    Circle and spiral share the horizontal motion ``center + R[cos wt, sin wt]``;
    the spiral additionally climbs at ``altitude_rate``.  Height is measured
    from ``center[2]``.  ``hover`` is a fixed point at the centre.
    """

    kind: str = "circle"
    radius: float = 2.0
    angular_rate: float = 2 * math.pi / 100.0
    altitude: float = 1.0
    altitude_rate: float = 0.0
    duration: float = 100.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("circle", "spiral", "hover"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != 3:
            raise ValueError("center must be a 3-vector")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.kind != "hover" and self.angular_rate == 0:
            raise ValueError("angular_rate must be non-zero for circle/spiral")

    @classmethod
    def circle(cls, **kw) -> "TrajectorySpec":
        return cls(kind="circle", **kw)

    @classmethod
    def spiral(cls, **kw) -> "TrajectorySpec":
        kw.setdefault("altitude_rate", 0.01)
        kw.setdefault("duration", 130.0)
        return cls(kind="spiral", **kw)

    @classmethod
    def hover(cls, **kw) -> "TrajectorySpec":
        kw.setdefault("duration", 20.0)
        return cls(kind="hover", **kw)


def trajectory_point(spec: TrajectorySpec, t: float) -> np.ndarray:
    cx, cy, cz = spec.center
    if spec.kind == "hover":
        return np.array([cx, cy, cz + spec.altitude])
    wt = spec.angular_rate * t
    z = cz + spec.altitude
    if spec.kind == "spiral":
        z += spec.altitude_rate * t
    return np.array([cx + spec.radius * math.cos(wt), cy + spec.radius * math.sin(wt), z])


def generate_waypoints(spec: TrajectorySpec, step_dt: float) -> np.ndarray:
    """Waypoints sampled every ``step_dt`` starting at t = 0, shape (n, 3)."""
    if not step_dt > 0:
        raise ValueError("step_dt must be positive")
    n = max(1, int(round(spec.duration / step_dt)))
    return np.array([trajectory_point(spec, i * step_dt) for i in range(n)])


@dataclass(frozen=True)
class MissionState:
    phase: Phase = Phase.IDLE
    k: int = 0
    tolerance: float = DEFAULT_TOLERANCE
    # highest waypoint index the reference may move to; grows by one per tracking cycle
    released: int = 1
    hover_held: float = 0.0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


def advance(mission: MissionState, current_p, waypoints) -> tuple[np.ndarray, MissionState]:
    """Move the waypoint index forward while the vehicle is within tolerance.

    Waypoint k is passed once ``|p - w_k| < tolerance``; every consecutive
    waypoint already inside the tolerance ball is passed in the same call, up
    to ``mission.released``.  Waypoint 0 is released immediately and one more
    waypoint is released per call after that, so the reference never runs
    ahead of the trajectory's own timing.
    """
    wps = np.asarray(waypoints, dtype=np.float64)
    if wps.ndim != 2 or len(wps) == 0:
        raise ValueError("waypoint list is empty")
    last = len(wps) - 1
    if mission.phase is Phase.DONE:
        return wps[last], mission
    p = np.asarray(current_p, dtype=np.float64)
    tol = mission.tolerance
    k = mission.k
    released = min(mission.released, last)
    while k < released and np.linalg.norm(p - wps[k]) < tol:
        k += 1
    phase = mission.phase
    if k == last and np.linalg.norm(p - wps[last]) < tol:
        phase = Phase.DONE
    if k >= 1:
        released = min(released + 1, last)
    return wps[k], replace(mission, phase=phase, k=k, released=released)


class Mission:
    """Controller-side state machine producing the MPC target each cycle."""

    def __init__(
        self,
        spec: TrajectorySpec,
        step_dt: float,
        params: Optional[ModelParams] = None,
        tolerance: float = DEFAULT_TOLERANCE,
        hover_point=HOVER_POINT,
        hover_hold: float = HOVER_HOLD_S,
    ):
        self.spec = spec
        self.step_dt = float(step_dt)
        self.params = params or ModelParams()
        self.hover_point = np.asarray(hover_point, dtype=np.float64)
        self.hover_hold = hover_hold
        self.waypoints = generate_waypoints(spec, step_dt)
        self.state = MissionState(tolerance=tolerance)
        self.reference = self.hover_point.copy()

    @property
    def phase(self) -> Phase:
        return self.state.phase

    @property
    def done(self) -> bool:
        return self.state.phase is Phase.DONE

    def step(self, odometry: VehicleState) -> tuple[VehicleState, ControlInput]:
        """Advance one control cycle; returns the target state and input."""
        st = self.state
        p = np.asarray(odometry.p)
        near_hover = np.linalg.norm(p - self.hover_point) < st.tolerance
        if st.phase is Phase.IDLE:
            st = replace(st, phase=Phase.TAKEOFF)
        if st.phase is Phase.TAKEOFF and near_hover:
            st = replace(st, phase=Phase.HOVER, hover_held=0.0)
        if st.phase is Phase.HOVER:
            held = st.hover_held + self.step_dt if near_hover else 0.0
            st = replace(st, hover_held=held)
            if held >= self.hover_hold - 1e-9:
                st = replace(st, phase=Phase.TRACKING)

        if st.phase in (Phase.TAKEOFF, Phase.HOVER):
            ref = self.hover_point
        else:
            ref, st = advance(st, p, self.waypoints)
        self.state = st
        self.reference = np.array(ref, dtype=np.float64)
        return reference_state(self.reference), hover_input(self.params)


def reference_state(position) -> VehicleState:
    """Target state: the given position, at rest, level."""
    return VehicleState(p=tuple(position))


def mission_step(mission: Mission, odometry: VehicleState) -> tuple[VehicleState, ControlInput]:
    return mission.step(odometry)
