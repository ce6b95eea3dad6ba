"""CSV writers/readers for run artefacts.

Every real number is written with 6 decimals.  Values are quantised with
``round(x, 6)`` when a row is recorded, so reading a file back reproduces the
in-memory rows exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence, Type, TypeVar

from .link import LatencyRecord

TRAJECTORY_HEADER = "t_s,px,py,pz,vx,vy,vz,phi,theta,ref_x,ref_y,ref_z,T,phi_d,theta_d".split(",")
LATENCY_HEADER = "cycle,l_exec_ms,l_rtd_ms,l_total_ms".split(",")
COMMAND_HEADER = "cycle,t_s,exec_ms,T,phi_d,theta_d,echo_seq,deadline_missed".split(",")
REFERENCE_HEADER = "echo_seq,ref_x,ref_y,ref_z,phase,k".split(",")
ARRIVAL_HEADER = "cycle,t_s,interval_ms".split(",")
BOXSTATS_HEADER = "param,min,lower_adj,q25,median,q75,upper_adj,max".split(",")
ERROR_HEADER = "t_s,ex,ey,ez,e_norm,phase,k".split(",")


def q6(x: float) -> float:
    return round(float(x), 6)


def fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.6f}"
    return str(x)


@dataclass(frozen=True)
class TrajectoryRow:
    t_s: float
    px: float
    py: float
    pz: float
    vx: float
    vy: float
    vz: float
    phi: float
    theta: float
    ref_x: float
    ref_y: float
    ref_z: float
    T: float
    phi_d: float
    theta_d: float


@dataclass(frozen=True)
class CommandRow:
    cycle: int
    t_s: float
    exec_ms: float
    T: float
    phi_d: float
    theta_d: float
    echo_seq: int
    deadline_missed: bool


@dataclass(frozen=True)
class ReferenceRow:
    echo_seq: int
    ref_x: float
    ref_y: float
    ref_z: float
    phase: str
    k: int


@dataclass(frozen=True)
class ArrivalRow:
    cycle: int
    t_s: float
    interval_ms: float


@dataclass(frozen=True)
class ErrorRow:
    t_s: float
    ex: float
    ey: float
    ez: float
    e_norm: float
    phase: str
    k: int


R = TypeVar("R")


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_dataclasses(path: Path, rows: Sequence, cls: Type) -> None:
    write_rows(path, [f.name for f in fields(cls)], (astuple(r) for r in rows))


def read_dataclasses(path: Path, cls: Type[R]) -> list[R]:
    types = {f.name: f.type for f in fields(cls)}
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for name, typ in types.items():
                raw = rec[name]
                if typ in ("int", int):
                    kw[name] = int(raw)
                elif typ in ("bool", bool):
                    kw[name] = raw in ("1", "True", "true")
                elif typ in ("str", str):
                    kw[name] = raw
                else:
                    kw[name] = float(raw)
            out.append(cls(**kw))
    return out


def write_latency(path: Path, records: Sequence[LatencyRecord]) -> None:
    write_rows(path, LATENCY_HEADER, ((r.cycle, r.l_exec, r.l_rtd, r.l_total) for r in records))


def read_latency(path: Path) -> list[LatencyRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            # ms values carry exactly 6 decimals, i.e. integer nanoseconds
            exec_ns = int(round(float(rec["l_exec_ms"]) * 1e6))
            rtd_ns = int(round(float(rec["l_rtd_ms"]) * 1e6))
            out.append(LatencyRecord(int(rec["cycle"]), exec_ns, rtd_ns))
    return out
