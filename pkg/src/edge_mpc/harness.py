"""Experiment runner: horizon sweeps, rate sweeps and trajectory runs.

Runs either in real time (plant and controller as separate processes talking
over loopback TCP) or in lockstep virtual time (both cores stepped in one
process, messages still encoded and passed through delay channels).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import multiprocessing as mp
import os
import queue
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import logs
from .controller import ControllerConfig, ControllerCore, CycleRecord, run_controller
from .dynamics import ModelParams
from .link import CommandMsg, DelayChannel, FrameReader, LatencyRecord, OdometryMsg, encode
from .logs import ArrivalRow, CommandRow, ErrorRow, ReferenceRow, TrajectoryRow
from .mission import Phase, TrajectorySpec
from .mpc import InputBounds, MpcConfig, MpcWeights, warmup
from .plant import EXIT_LINK_LOST, EXIT_OK, PlantConfig, PlantSim, run_plant
from .stats import BoxStats, box_stats

log = logging.getLogger(__name__)

EXIT_MISSION_FAILED = 5
EXIT_PARTIAL = 6

MODES = ("horizon", "rate", "trajectory")
SWEEP_DURATION_S = 60.0
MISSION_SLACK = 1.5


@dataclass
class ExperimentConfig:
    mode: str = "trajectory"
    trajectory: str = "circle"
    rate: float = 20.0
    horizon: int = 20
    rates: list = field(default_factory=lambda: [20.0, 40.0, 60.0, 80.0, 100.0])
    horizons: list = field(default_factory=lambda: [20, 40, 60, 80, 100])
    delay_ms: float = 0.0
    duration: Optional[float] = None
    out: str = "runs"
    seed: int = 0
    virtual_time: bool = False
    sim_dt: float = 0.005
    # mission
    radius: float = 2.0
    period: float = 100.0
    altitude: float = 1.0
    altitude_rate: Optional[float] = None
    traj_duration: Optional[float] = None
    tolerance: float = 0.4
    # optimiser
    max_iters: int = 60
    grad_tol: float = 1e-4
    thrust_min: float = 0.0
    thrust_max: Optional[float] = None
    tilt_max: float = 0.3
    q_x: list = field(default_factory=lambda: [10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 2.0, 2.0])
    q_u: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    q_du: list = field(default_factory=lambda: [5.0, 5.0, 5.0])
    # vehicle model
    g: float = 9.81
    drag: list = field(default_factory=lambda: [0.1, 0.1, 0.1])
    k_phi: float = 1.0
    k_theta: float = 1.0
    tau_phi: float = 0.5
    tau_theta: float = 0.5
    # transport
    host: str = "127.0.0.1"
    port: int = 7447
    phase_guard_ms: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.trajectory not in ("circle", "spiral", "hover"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.mode == "rate" and (not self.rates or min(self.rates) <= 0):
            raise ValueError("rate sweep needs non-empty positive rates")
        if self.mode == "horizon" and (not self.horizons or min(self.horizons) <= 0):
            raise ValueError("horizon sweep needs non-empty positive horizons")
        if self.delay_ms < 0:
            raise ValueError("delay must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text()) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    # -- derived component configs --

    def model_params(self) -> ModelParams:
        return ModelParams(self.g, tuple(self.drag), self.k_phi, self.k_theta, self.tau_phi, self.tau_theta)

    def trajectory_spec(self) -> TrajectorySpec:
        kw = dict(radius=self.radius, angular_rate=2 * math.pi / self.period, altitude=self.altitude)
        if self.traj_duration is not None:
            kw["duration"] = self.traj_duration
        if self.altitude_rate is not None:
            kw["altitude_rate"] = self.altitude_rate
        return getattr(TrajectorySpec, self.trajectory)(**kw)

    def controller_config(self, rate: float, horizon: int) -> ControllerConfig:
        params = self.model_params()
        bounds = InputBounds(self.thrust_min, self.thrust_max if self.thrust_max is not None else 2 * params.g,
                             self.tilt_max)
        mpc = MpcConfig(
            horizon=int(horizon), dt=1.0 / rate,
            weights=MpcWeights(np.diag(self.q_x), np.diag(self.q_u), np.diag(self.q_du)),
            bounds=bounds, max_iters=self.max_iters, grad_tol=self.grad_tol, params=params,
        )
        return ControllerConfig(rate=rate, mpc=mpc, mission=self.trajectory_spec(), host=self.host,
                                port=self.port, tolerance=self.tolerance, phase_guard_ms=self.phase_guard_ms)

    def plant_config(self, rate: float) -> PlantConfig:
        return PlantConfig.for_rate(rate, self.sim_dt, params=self.model_params(), host=self.host, port=self.port)


@dataclass
class RunResult:
    param: float
    trajectory: list[TrajectoryRow]
    latency: list[LatencyRecord]
    arrivals: list[ArrivalRow]
    commands: list[CommandRow]
    references: list[ReferenceRow]
    errors: list[ErrorRow]
    plant_status: int = EXIT_OK
    controller_status: int = EXIT_OK
    done: bool = False
    deadline_misses: int = 0
    stale_discards: int = 0
    unknown_echoes: int = 0
    cycles: Optional[list[CycleRecord]] = None

    @property
    def ok(self) -> bool:
        return self.plant_status == EXIT_OK and self.controller_status == EXIT_OK

    def intervals_ms(self) -> np.ndarray:
        return np.array([a.interval_ms for a in self.arrivals[1:]])

    def exec_ms(self) -> np.ndarray:
        return np.array([c.exec_ms for c in self.commands])

    def tracking_errors(self) -> np.ndarray:
        """Error norms from the moment the first waypoint is reached."""
        return np.array([e.e_norm for e in self.errors
                         if e.phase in (Phase.TRACKING.value, Phase.DONE.value) and e.k >= 1])


# -- assembling results ------------------------------------------------------------


def _arrival_rows(arrivals_ns: Sequence[int], t0_ns: int) -> list[ArrivalRow]:
    rows = []
    for i, a in enumerate(arrivals_ns):
        interval = (a - arrivals_ns[i - 1]) / 1e6 if i else math.nan
        rows.append(ArrivalRow(i, logs.q6((a - t0_ns) * 1e-9), interval))
    return rows


def merge_references(trajectory: Sequence[TrajectoryRow], references: Sequence[ReferenceRow]):
    """Attach to every odometry sample the reference computed from it.

    Samples the controller never consumed inherit the previous reference.
    Returns (trajectory rows with ref columns, error rows).
    """
    by_seq = {r.echo_seq: r for r in references}
    out, errs = [], []
    cur: Optional[ReferenceRow] = None
    for i, row in enumerate(trajectory):
        cur = by_seq.get(i + 1, cur)
        if cur is None:
            out.append(row)
            continue
        row = dataclasses.replace(row, ref_x=cur.ref_x, ref_y=cur.ref_y, ref_z=cur.ref_z)
        out.append(row)
        e = (row.px - cur.ref_x, row.py - cur.ref_y, row.pz - cur.ref_z)
        errs.append(ErrorRow(row.t_s, *(logs.q6(c) for c in e), logs.q6(math.sqrt(sum(c * c for c in e))),
                             cur.phase, cur.k))
    return out, errs


def write_run(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    logs.write_dataclasses(out_dir / "trajectory.csv", result.trajectory, TrajectoryRow)
    logs.write_dataclasses(out_dir / "errors.csv", result.errors, ErrorRow)
    logs.write_latency(out_dir / "latency.csv", result.latency)
    logs.write_dataclasses(out_dir / "arrivals.csv", result.arrivals, ArrivalRow)
    logs.write_dataclasses(out_dir / "commands.csv", result.commands, CommandRow)
    logs.write_dataclasses(out_dir / "references.csv", result.references, ReferenceRow)


# -- lockstep virtual time ---------------------------------------------------------------


class VirtualClock:
    def __init__(self):
        self.now_ns = 0

    def __call__(self) -> int:
        return self.now_ns


def run_lockstep(
    pcfg: PlantConfig,
    ccfg: ControllerConfig,
    duration: float,
    delay_ms: float = 0.0,
    stop_on_done: bool = False,
    keep_histories: bool = False,
    param: float = math.nan,
) -> RunResult:
    """Deterministic closed loop on a virtual clock.

    Ticks every ``sim_dt``.  Controller cycles are aligned with odometry
    arrivals and compute takes zero virtual time.
    """
    if abs(pcfg.odom_rate - ccfg.rate) > 1e-9:
        raise ValueError("lockstep mode needs odometry rate == control rate")
    clock = VirtualClock()
    plant = PlantSim(pcfg, t0_ns=0)
    core = ControllerCore(ccfg, clock=clock, virtual=True, keep_histories=keep_histories)
    core.t0_ns = 0
    up, down = DelayChannel(delay_ms, clock), DelayChannel(delay_ms, clock)
    up_rx, down_rx = FrameReader(), FrameReader()
    sub = pcfg.substeps
    latest: Optional[OdometryMsg] = None
    anchor: Optional[int] = None
    n_ticks = int(round(duration / pcfg.sim_dt))

    def deliver_commands():
        for frame in down.pop_ready():
            for msg in down_rx.feed(frame):
                if isinstance(msg, CommandMsg):
                    plant.on_command(msg, clock.now_ns)

    for i in range(n_ticks):
        clock.now_ns = int(round(i * pcfg.sim_dt * 1e9))
        deliver_commands()
        if i % sub == 0:
            up.put(encode(plant.publish(clock.now_ns)))
        for frame in up.pop_ready():
            for msg in up_rx.feed(frame):
                if isinstance(msg, OdometryMsg) and (latest is None or msg.seq > latest.seq):
                    latest = msg
        if latest is not None and anchor is None:
            anchor = i
        if anchor is not None and (i - anchor) % sub == 0:
            down.put(encode(core.cycle(latest)))
            deliver_commands()
        plant.integrate(1)
        if stop_on_done and core.mission.done:
            break

    traj, errs = merge_references(plant.trajectory, core.reference_rows())
    return RunResult(
        param=param, trajectory=traj, latency=list(plant.records),
        arrivals=_arrival_rows(plant.arrivals_ns, 0), commands=core.command_rows(),
        references=core.reference_rows(), errors=errs, done=core.mission.done,
        deadline_misses=core.deadline_misses, stale_discards=plant.echo.stale_discards,
        unknown_echoes=plant.echo.unknown_echoes, cycles=core.cycles,
    )


# -- real time, two processes ----------------------------------------------------------------


def _controller_proc(ccfg, delay_ms, port_q, stop, done, out_dir):
    logging.basicConfig(level=logging.WARNING)
    warmup()
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((ccfg.host, 0))
    srv.listen(1)
    port_q.put(srv.getsockname()[1])
    srv.settimeout(60.0)
    try:
        conn, _ = srv.accept()
    except socket.timeout:
        os._exit(EXIT_LINK_LOST)
    srv.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    run = run_controller(ccfg, conn, stop, delay_ms, done=done)
    out_dir = Path(out_dir)
    logs.write_dataclasses(out_dir / "commands.csv", run.core.command_rows(), CommandRow)
    logs.write_dataclasses(out_dir / "references.csv", run.core.reference_rows(), ReferenceRow)
    (out_dir / "controller.json").write_text(json.dumps({
        "status": run.status, "error": run.error, "deadline_misses": run.core.deadline_misses,
        "done": run.core.mission.done,
    }))
    raise SystemExit(run.status)


def _plant_proc(pcfg, delay_ms, host, port, stop, out_dir, max_duration):
    logging.basicConfig(level=logging.WARNING)
    sock = socket.create_connection((host, port), timeout=30.0)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    run = run_plant(pcfg, sock, stop, delay_ms, max_duration=max_duration)
    p = run.plant
    out_dir = Path(out_dir)
    logs.write_dataclasses(out_dir / "trajectory_raw.csv", p.trajectory, TrajectoryRow)
    logs.write_latency(out_dir / "latency.csv", p.records)
    logs.write_dataclasses(out_dir / "arrivals.csv", _arrival_rows(p.arrivals_ns, p.t0_ns), ArrivalRow)
    (out_dir / "plant.json").write_text(json.dumps({
        "status": run.status, "error": run.error, "stale_discards": p.echo.stale_discards,
        "unknown_echoes": p.echo.unknown_echoes, "rejected": p.rejected,
    }))
    raise SystemExit(run.status)


def run_realtime(
    pcfg: PlantConfig,
    ccfg: ControllerConfig,
    duration: float,
    out_dir: Path,
    delay_ms: float = 0.0,
    stop_on_done: bool = False,
    param: float = math.nan,
) -> RunResult:
    """Spawn controller and plant processes, run for ``duration`` s of plant time."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = mp.get_context("spawn")
    stop, done = ctx.Event(), ctx.Event()
    port_q = ctx.Queue()
    cproc = ctx.Process(target=_controller_proc, args=(ccfg, delay_ms, port_q, stop, done, str(out_dir)),
                        name="controller")
    cproc.start()
    try:
        port = port_q.get(timeout=120.0)
    except queue.Empty:
        cproc.terminate()
        raise RuntimeError("controller process did not start")
    pproc = ctx.Process(target=_plant_proc,
                        args=(pcfg, delay_ms, ccfg.host, port, stop, str(out_dir), duration), name="plant")
    pproc.start()

    deadline = time.monotonic() + duration + 120.0
    while time.monotonic() < deadline:
        if not pproc.is_alive() or not cproc.is_alive():
            break
        if stop_on_done and done.is_set():
            break
        time.sleep(0.05)
    stop.set()
    for proc in (pproc, cproc):
        proc.join(timeout=15.0)
        if proc.is_alive():
            proc.terminate()
            proc.join()
    return load_run(out_dir, param=param)


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return {}


def load_run(out_dir: Path, param: float = math.nan) -> RunResult:
    out_dir = Path(out_dir)

    def read(name, cls):
        path = out_dir / name
        return logs.read_dataclasses(path, cls) if path.exists() else []

    pj, cj = _read_json(out_dir / "plant.json"), _read_json(out_dir / "controller.json")
    raw = read("trajectory_raw.csv", TrajectoryRow) or read("trajectory.csv", TrajectoryRow)
    refs = read("references.csv", ReferenceRow)
    traj, errs = merge_references(raw, refs)
    lat_path = out_dir / "latency.csv"
    result = RunResult(
        param=param, trajectory=traj,
        latency=logs.read_latency(lat_path) if lat_path.exists() else [],
        arrivals=read("arrivals.csv", ArrivalRow), commands=read("commands.csv", CommandRow),
        references=refs, errors=errs,
        plant_status=pj.get("status", EXIT_LINK_LOST), controller_status=cj.get("status", EXIT_LINK_LOST),
        done=bool(cj.get("done", False)), deadline_misses=int(cj.get("deadline_misses", 0)),
        stale_discards=int(pj.get("stale_discards", 0)), unknown_echoes=int(pj.get("unknown_echoes", 0)),
    )
    write_run(result, out_dir)
    return result


# -- experiments --------------------------------------------------------------------------------


def run_once(exp: ExperimentConfig, rate: float, horizon: int, out_dir: Path, duration: float,
             stop_on_done: bool = False, param: float = math.nan) -> RunResult:
    pcfg, ccfg = exp.plant_config(rate), exp.controller_config(rate, horizon)
    if exp.virtual_time:
        result = run_lockstep(pcfg, ccfg, duration, exp.delay_ms, stop_on_done=stop_on_done, param=param)
        write_run(result, Path(out_dir))
        return result
    return run_realtime(pcfg, ccfg, duration, out_dir, exp.delay_ms, stop_on_done=stop_on_done, param=param)


@dataclass
class SweepResult:
    name: str
    runs: list[RunResult]
    stats: list[tuple[float, BoxStats]]
    failed: list[float]

    @property
    def partial(self) -> bool:
        return bool(self.failed)

    def table(self) -> list[tuple]:
        return [(param,) + s.as_tuple() for param, s in self.stats]


def _sweep(exp: ExperimentConfig, name: str, values, make) -> SweepResult:
    out = Path(exp.out)
    duration = exp.duration if exp.duration is not None else SWEEP_DURATION_S
    runs, stats, failed = [], [], []
    for v in values:
        rate, horizon = make(v)
        log.info("%s sweep: %s=%s", name, name, v)
        res = run_once(exp, rate, horizon, out / f"{name}_{v:g}", duration, param=v)
        runs.append(res)
        iv = res.intervals_ms()
        if not res.ok or len(iv) < 5:
            failed.append(v)
            continue
        stats.append((v, box_stats(iv)))
    result = SweepResult(name, runs, stats, failed)
    write_sweep(result, out)
    return result


def write_sweep(result: SweepResult, out: Path) -> None:
    logs.write_rows(out / "boxstats.csv", logs.BOXSTATS_HEADER, result.table())
    rows = []
    for r in result.runs:
        lat = r.latency
        rows.append((
            r.param, len(r.arrivals), float(np.median(r.intervals_ms())) if len(r.arrivals) > 1 else math.nan,
            float(np.median(r.exec_ms())) if r.commands else math.nan,
            float(np.median([x.l_rtd for x in lat])) if lat else math.nan,
            float(np.median([x.l_total for x in lat])) if lat else math.nan,
            r.deadline_misses, int(r.ok),
        ))
    logs.write_rows(out / "sweep_summary.csv",
                    ["param", "commands", "median_interval_ms", "median_exec_ms", "median_rtd_ms",
                     "median_total_ms", "deadline_misses", "ok"], rows)


def run_horizon_sweep(exp: ExperimentConfig) -> SweepResult:
    return _sweep(exp, "horizon", [int(h) for h in exp.horizons], lambda h: (exp.rate, h))


def run_rate_sweep(exp: ExperimentConfig) -> SweepResult:
    return _sweep(exp, "rate", [float(r) for r in exp.rates], lambda r: (r, exp.horizon))


@dataclass
class TrajectoryResult:
    run: RunResult
    limit_s: float

    @property
    def ok(self) -> bool:
        return self.run.ok and self.run.done


def run_trajectory(exp: ExperimentConfig) -> TrajectoryResult:
    spec = exp.trajectory_spec()
    limit = exp.duration if exp.duration is not None else MISSION_SLACK * spec.duration
    out = Path(exp.out)
    res = run_once(exp, exp.rate, exp.horizon, out, limit, stop_on_done=True, param=exp.horizon)
    if not res.done:
        (out / "FAILED").write_text(f"mission not done within {limit:.1f} s\n")
    return TrajectoryResult(res, limit)
