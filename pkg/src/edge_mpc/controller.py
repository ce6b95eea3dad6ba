"""Edge-side controller: latest odometry in, paced MPC commands out."""

from __future__ import annotations

import dataclasses
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .link import CommandMsg, OdometryMsg, ProtocolError, Sender, encode, iter_messages
from .logs import CommandRow, ReferenceRow, q6
from .mission import DEFAULT_TOLERANCE, Mission, TrajectorySpec
from .mpc import MpcConfig, MpcSolver, warmup
from .plant import DEFAULT_HOST, DEFAULT_PORT, EXIT_LINK_LOST, EXIT_OK, EXIT_PROTOCOL

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerConfig:
    rate: float = 20.0
    mpc: MpcConfig = field(default_factory=MpcConfig)
    mission: TrajectorySpec = field(default_factory=TrajectorySpec)
    host: str = DEFAULT_HOST
    port: int = DEFAULT_PORT
    tolerance: float = DEFAULT_TOLERANCE
    # cycles start this long after the odometry arrival phase so fresh samples are in
    phase_guard_ms: float = 1.0

    def __post_init__(self):
        if not 1.0 <= self.rate <= 500.0:
            raise ValueError(f"rate must lie in [1, 500] Hz, got {self.rate}")
        if self.mpc.dt != 1.0 / self.rate:
            object.__setattr__(self, "mpc", dataclasses.replace(self.mpc, dt=1.0 / self.rate))

    @property
    def period_ns(self) -> int:
        return int(round(1e9 / self.rate))


class LatestMailbox:
    """Holds only the newest odometry; older arrivals never replace newer ones."""

    def __init__(self):
        self._cv = threading.Condition()
        self._msg: Optional[OdometryMsg] = None
        self._arrived_ns = 0

    def put(self, msg: OdometryMsg, now_ns: int) -> None:
        with self._cv:
            if self._msg is None or msg.seq > self._msg.seq:
                self._msg = msg
                self._arrived_ns = now_ns
                self._cv.notify_all()

    def latest(self) -> Optional[OdometryMsg]:
        with self._cv:
            return self._msg

    def wait_first(self, timeout: float) -> Optional[tuple[OdometryMsg, int]]:
        with self._cv:
            self._cv.wait_for(lambda: self._msg is not None, timeout)
            if self._msg is None:
                return None
            return self._msg, self._arrived_ns

    def wait_newer(self, seq: int, timeout: float) -> Optional[tuple[OdometryMsg, int]]:
        with self._cv:
            self._cv.wait_for(lambda: self._msg is not None and self._msg.seq > seq, timeout)
            if self._msg is None or self._msg.seq <= seq:
                return None
            return self._msg, self._arrived_ns


@dataclass
class CycleRecord:
    cycle: int
    t_ns: int
    exec_ns: int
    solve_ns: int
    input: np.ndarray
    echo_seq: int
    deadline_missed: bool
    reference: np.ndarray
    phase: str
    k: int
    iterations: int
    cost: float
    status: str
    descent_ok: bool
    cost_history: Optional[np.ndarray] = None


class ControllerCore:
    """One control cycle: mission target, warm-started solve, command message.

    With ``virtual=True`` the reported execution time is zero (compute is
    instantaneous in lockstep simulation); the measured solve time is still
    kept in the cycle log.
    """

    def __init__(self, cfg: ControllerConfig, clock: Callable[[], int] = time.monotonic_ns,
                 virtual: bool = False, keep_histories: bool = False):
        self.cfg = cfg
        self.clock = clock
        self.virtual = virtual
        self.keep_histories = keep_histories
        self.solver = MpcSolver(cfg.mpc)
        self.mission = Mission(cfg.mission, 1.0 / cfg.rate, cfg.mpc.params, tolerance=cfg.tolerance)
        self.seq = 0
        self.t0_ns = clock()
        self.cycles: list[CycleRecord] = []
        self.deadline_misses = 0

    def cycle(self, odom: OdometryMsg, tick_ns: Optional[int] = None) -> CommandMsg:
        x_d, u_d = self.mission.step(odom.state)
        started = time.perf_counter_ns()
        sol = self.solver.step(odom.state.as_array(), x_d.as_array(), u_d.as_array())
        solve_ns = time.perf_counter_ns() - started
        exec_ns = 0 if self.virtual else solve_ns
        self.seq += 1
        now = self.clock()
        cmd = CommandMsg(self.seq, now, odom.seq, odom.sent_at, exec_ns, sol.first_input)
        missed = tick_ns is not None and now - tick_ns > self.cfg.period_ns
        if missed:
            self.deadline_misses += 1
        hist = sol.cost_history
        self.cycles.append(CycleRecord(
            cycle=len(self.cycles), t_ns=now, exec_ns=exec_ns, solve_ns=solve_ns,
            input=sol.plan[0].copy(), echo_seq=odom.seq, deadline_missed=missed,
            reference=self.mission.reference.copy(), phase=self.mission.phase.value,
            k=self.mission.state.k, iterations=sol.iterations, cost=sol.cost, status=sol.status,
            descent_ok=bool(np.all(np.diff(hist) <= 0.0)),
            cost_history=hist if self.keep_histories else None,
        ))
        return cmd

    def command_rows(self) -> list[CommandRow]:
        return [
            CommandRow(c.cycle, q6((c.t_ns - self.t0_ns) * 1e-9), c.exec_ns / 1e6,
                       q6(c.input[0]), q6(c.input[1]), q6(c.input[2]), c.echo_seq, c.deadline_missed)
            for c in self.cycles
        ]

    def reference_rows(self) -> list[ReferenceRow]:
        return [
            ReferenceRow(c.echo_seq, q6(c.reference[0]), q6(c.reference[1]), q6(c.reference[2]), c.phase, c.k)
            for c in self.cycles
        ]


@dataclass
class ControllerRun:
    core: ControllerCore
    status: int = EXIT_OK
    error: Optional[str] = None


def _sleep_until(target_ns: int, stop: threading.Event) -> None:
    while not stop.is_set():
        rem = target_ns - time.monotonic_ns()
        if rem <= 0:
            return
        time.sleep(min(rem * 1e-9, 0.1))


def run_controller(
    cfg: ControllerConfig,
    sock: socket.socket,
    stop: threading.Event,
    one_way_delay_ms: float = 0.0,
    done: Optional[threading.Event] = None,
    core: Optional[ControllerCore] = None,
) -> ControllerRun:
    """Paced control loop over an established connection.

    Cycle starts are anchored to the arrival phase of the odometry stream
    (plus ``phase_guard_ms``) and then follow a fixed period.  Late
    cycles still complete and are counted as deadline misses; the schedule
    is not shifted, so the next cycle starts immediately.
    """
    warmup()
    core = core or ControllerCore(cfg)
    run = ControllerRun(core)
    box = LatestMailbox()
    link_down = threading.Event()

    def lost(exc):
        if not stop.is_set():
            run.status, run.error = EXIT_LINK_LOST, f"send failed: {exc}"
        link_down.set()

    sender = Sender(sock, one_way_delay_ms, on_error=lost)

    def receive():
        try:
            for msg in iter_messages(sock):
                if isinstance(msg, OdometryMsg):
                    box.put(msg, time.monotonic_ns())
        except ProtocolError as exc:
            run.status, run.error = EXIT_PROTOCOL, str(exc)
        except OSError as exc:
            if not stop.is_set():
                run.status, run.error = EXIT_LINK_LOST, str(exc)
        else:
            if not stop.is_set():
                run.status, run.error = EXIT_LINK_LOST, "plant closed the connection"
        link_down.set()

    rx = threading.Thread(target=receive, name="controller-rx", daemon=True)
    rx.start()

    # the first sample may have sat in the socket buffer; anchor on the next one
    first = None
    last_seq = -1
    while first is None and not stop.is_set() and not link_down.is_set():
        got = box.wait_newer(last_seq, 0.1)
        if got is None:
            continue
        if last_seq < 0:
            last_seq = got[0].seq
        else:
            first = got
    if first is not None:
        anchor = first[1] + int(round(cfg.phase_guard_ms * 1e6))
        period = cfg.period_ns
        k = 0
        while not stop.is_set() and not link_down.is_set():
            tick = anchor + k * period
            _sleep_until(tick, stop)
            if stop.is_set():
                break
            cmd = core.cycle(box.latest(), tick_ns=tick)
            try:
                sender.send(encode(cmd))
            except OSError as exc:
                lost(exc)
                break
            if done is not None and core.mission.done:
                done.set()
            k += 1

    sender.close()
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()
    rx.join(timeout=2.0)
    if run.status != EXIT_OK:
        log.warning("controller stopped: %s", run.error)
    return run
