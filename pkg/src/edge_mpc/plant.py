"""Simulated vehicle: fine-step integration, odometry publishing, command intake."""

from __future__ import annotations

import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import ModelParams, VehicleState, euler_step_arr, hover_input
from .link import CommandMsg, EchoTracker, LatencyRecord, OdometryMsg, ProtocolError, Sender, encode, iter_messages
from .logs import TrajectoryRow, q6

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_LINK_LOST = 3
EXIT_PROTOCOL = 4

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 7447


@dataclass(frozen=True)
class PlantConfig:
    params: ModelParams = field(default_factory=ModelParams)
    sim_dt: float = 0.005
    odom_rate: float = 20.0
    initial_state: VehicleState = field(default_factory=VehicleState)
    host: str = DEFAULT_HOST
    port: int = DEFAULT_PORT
    # reject commands tilting beyond this (rad); None accepts any finite set-point
    max_tilt: Optional[float] = None

    def __post_init__(self):
        if not self.odom_rate > 0:
            raise ValueError("odom_rate must be positive")
        if not self.sim_dt > 0:
            raise ValueError("sim_dt must be positive")
        period = 1.0 / self.odom_rate
        if self.sim_dt > period * (1 + 1e-9):
            raise ValueError("sim_dt must not exceed the odometry period")
        ratio = period / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-6:
            raise ValueError(f"odometry period must be an integer multiple of sim_dt (ratio {ratio:.6f})")

    @property
    def substeps(self) -> int:
        return int(round(1.0 / (self.odom_rate * self.sim_dt)))

    @classmethod
    def for_rate(cls, rate: float, target_dt: float = 0.005, **kw) -> "PlantConfig":
        """Pick the integration step closest to ``target_dt`` that divides the period."""
        n = max(1, int(round(1.0 / (rate * target_dt))))
        return cls(sim_dt=1.0 / (rate * n), odom_rate=rate, **kw)


class PlantSim:
    """Clock-agnostic plant core; drivers supply timestamps in ns."""

    def __init__(self, cfg: PlantConfig, t0_ns: int = 0):
        self.cfg = cfg
        self.t0_ns = t0_ns
        self._prm = cfg.params.as_array()
        self.x = cfg.initial_state.as_array()
        self.held = hover_input(cfg.params).as_array()
        self.seq = 0
        self.echo = EchoTracker()
        self.trajectory: list[TrajectoryRow] = []
        self.arrivals_ns: list[int] = []
        self.rejected = 0
        self._lock = threading.Lock()

    @property
    def state(self) -> VehicleState:
        return VehicleState.from_array(self.x)

    @property
    def records(self) -> list[LatencyRecord]:
        return self.echo.records

    def publish(self, now_ns: int) -> OdometryMsg:
        with self._lock:
            self.seq += 1
            msg = OdometryMsg(self.seq, now_ns, VehicleState.from_array(self.x))
            self.echo.sent(msg)
            x, u = self.x, self.held
            t = (now_ns - self.t0_ns) * 1e-9
            nan = math.nan
            self.trajectory.append(TrajectoryRow(
                q6(t), *(q6(c) for c in x), nan, nan, nan, q6(u[0]), q6(u[1]), q6(u[2])
            ))
        return msg

    def on_command(self, cmd: CommandMsg, now_ns: int) -> bool:
        """Validate and latch a command; returns False when it was dropped."""
        u = cmd.input
        if self.cfg.max_tilt is not None and max(abs(u.phi_d), abs(u.theta_d)) > self.cfg.max_tilt:
            self.rejected += 1
            return False
        with self._lock:
            if self.echo.accept(cmd, now_ns) is None:
                return False
            self.held = u.as_array()
            self.arrivals_ns.append(now_ns)
        return True

    def integrate(self, steps: int = 1) -> None:
        with self._lock:
            u = self.held
            for _ in range(steps):
                euler_step_arr(self.x, u, self._prm, self.cfg.sim_dt, self.x)

    def intervals_ms(self) -> np.ndarray:
        a = np.asarray(self.arrivals_ns, dtype=np.int64)
        return np.diff(a) / 1e6


@dataclass
class PlantRun:
    plant: PlantSim
    status: int = EXIT_OK
    error: Optional[str] = None


def _sleep_until(target_ns: int) -> None:
    while True:
        rem = target_ns - time.monotonic_ns()
        if rem <= 0:
            return
        time.sleep(rem * 1e-9)


def run_plant(
    cfg: PlantConfig,
    sock: socket.socket,
    stop: threading.Event,
    one_way_delay_ms: float = 0.0,
    max_duration: Optional[float] = None,
) -> PlantRun:
    """Real-time plant loop over an established connection.

    Integrates at ``sim_dt`` on wall-clock ticks, publishes odometry every
    ``substeps`` ticks and latches commands from a receiver thread.
    """
    warm = np.zeros(8)
    euler_step_arr(warm, hover_input(cfg.params).as_array(), cfg.params.as_array(), cfg.sim_dt, warm)
    t0 = time.monotonic_ns()
    plant = PlantSim(cfg, t0_ns=t0)
    run = PlantRun(plant)
    link_down = threading.Event()

    def lost(exc):
        if not stop.is_set():
            run.status, run.error = EXIT_LINK_LOST, f"send failed: {exc}"
        link_down.set()

    sender = Sender(sock, one_way_delay_ms, on_error=lost)

    def receive():
        try:
            for msg in iter_messages(sock):
                if isinstance(msg, CommandMsg):
                    plant.on_command(msg, time.monotonic_ns())
        except ProtocolError as exc:
            run.status, run.error = EXIT_PROTOCOL, str(exc)
        except OSError as exc:
            if not stop.is_set():
                run.status, run.error = EXIT_LINK_LOST, str(exc)
        else:
            if not stop.is_set():
                run.status, run.error = EXIT_LINK_LOST, "controller closed the connection"
        link_down.set()

    rx = threading.Thread(target=receive, name="plant-rx", daemon=True)
    rx.start()

    dt_ns = cfg.sim_dt * 1e9
    sub = cfg.substeps
    i = 0
    while not stop.is_set() and not link_down.is_set():
        target = t0 + int(round(i * dt_ns))
        if max_duration is not None and target - t0 > max_duration * 1e9:
            # planned end of run; a closed socket from here on is not a link loss
            stop.set()
            break
        _sleep_until(target)
        if i % sub == 0:
            msg = plant.publish(time.monotonic_ns())
            try:
                sender.send(encode(msg))
            except OSError as exc:
                lost(exc)
                break
        plant.integrate(1)
        i += 1

    sender.close()
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()
    rx.join(timeout=2.0)
    if run.status != EXIT_OK:
        log.warning("plant stopped: %s", run.error)
    return run
