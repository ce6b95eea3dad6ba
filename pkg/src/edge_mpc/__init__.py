"""Edge-hosted MPC for a simulated quadrotor over a delayed link."""

from .dynamics import ControlInput, ModelParams, VehicleState, derivative, euler_step, rollout
from .link import CommandMsg, LatencyRecord, OdometryMsg, ProtocolError, decode, encode
from .mission import Mission, Phase, TrajectorySpec, generate_waypoints
from .mpc import InputBounds, MpcConfig, MpcSolution, MpcSolver, MpcWeights, solve
from .stats import BoxStats, box_stats

__all__ = [
    "ControlInput", "ModelParams", "VehicleState", "derivative", "euler_step", "rollout",
    "CommandMsg", "LatencyRecord", "OdometryMsg", "ProtocolError", "decode", "encode",
    "Mission", "Phase", "TrajectorySpec", "generate_waypoints",
    "InputBounds", "MpcConfig", "MpcSolution", "MpcSolver", "MpcWeights", "solve",
    "BoxStats", "box_stats",
]
