"""Plant/controller wire protocol, stream reassembly and delay injection.

Frame layout (all integers unsigned little-endian, all reals IEEE-754 float64 LE)::

    u32 payload_length
    payload:
        u8  tag          0x01 odometry, 0x02 command
        u64 seq
        u64 sent_at      sender monotonic clock, ns
        odometry: 8 x f64  px py pz vx vy vz phi theta
        command:  u64 echo_seq, u64 echo_sent_at, u64 exec_ns, 3 x f64 T phi_d theta_d
"""

from __future__ import annotations

import heapq
import itertools
import queue
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

from .dynamics import ControlInput, VehicleState

TAG_ODOMETRY = 0x01
TAG_COMMAND = 0x02

_LEN = struct.Struct("<I")
_HEADER = struct.Struct("<BQQ")
_ODOM_BODY = struct.Struct("<8d")
_CMD_BODY = struct.Struct("<QQQ3d")

ODOMETRY_PAYLOAD = _HEADER.size + _ODOM_BODY.size  # 81
COMMAND_PAYLOAD = _HEADER.size + _CMD_BODY.size  # 65
_PAYLOAD_SIZES = {TAG_ODOMETRY: ODOMETRY_PAYLOAD, TAG_COMMAND: COMMAND_PAYLOAD}

U64_MAX = 2**64 - 1


class ProtocolError(Exception):
    """Malformed stream; the connection cannot be trusted any further."""


def _check_u64(name: str, value: int) -> int:
    value = int(value)
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"{name} out of u64 range: {value}")
    return value


@dataclass(frozen=True)
class OdometryMsg:
    seq: int
    sent_at: int
    state: VehicleState

    def __post_init__(self):
        object.__setattr__(self, "seq", _check_u64("seq", self.seq))
        object.__setattr__(self, "sent_at", _check_u64("sent_at", self.sent_at))


@dataclass(frozen=True)
class CommandMsg:
    seq: int
    sent_at: int
    echo_seq: int
    echo_sent_at: int
    exec_ns: int
    input: ControlInput

    def __post_init__(self):
        for name in ("seq", "sent_at", "echo_seq", "echo_sent_at", "exec_ns"):
            object.__setattr__(self, name, _check_u64(name, getattr(self, name)))


Message = Union[OdometryMsg, CommandMsg]


def encode(msg: Message) -> bytes:
    if isinstance(msg, OdometryMsg):
        s = msg.state
        payload = _HEADER.pack(TAG_ODOMETRY, msg.seq, msg.sent_at) + _ODOM_BODY.pack(
            *s.p, *s.v, s.phi, s.theta
        )
    elif isinstance(msg, CommandMsg):
        u = msg.input
        payload = _HEADER.pack(TAG_COMMAND, msg.seq, msg.sent_at) + _CMD_BODY.pack(
            msg.echo_seq, msg.echo_sent_at, msg.exec_ns, u.thrust, u.phi_d, u.theta_d
        )
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return _LEN.pack(len(payload)) + payload


def _decode_payload(payload: bytes) -> Message:
    tag = payload[0]
    expected = _PAYLOAD_SIZES.get(tag)
    if expected is None:
        raise ProtocolError(f"unknown message tag 0x{tag:02x}")
    if len(payload) != expected:
        raise ProtocolError(f"tag 0x{tag:02x} expects {expected} payload bytes, got {len(payload)}")
    _, seq, sent_at = _HEADER.unpack_from(payload)
    try:
        if tag == TAG_ODOMETRY:
            f = _ODOM_BODY.unpack_from(payload, _HEADER.size)
            return OdometryMsg(seq, sent_at, VehicleState(f[0:3], f[3:6], f[6], f[7]))
        echo_seq, echo_sent_at, exec_ns, t, phi_d, theta_d = _CMD_BODY.unpack_from(payload, _HEADER.size)
        return CommandMsg(seq, sent_at, echo_seq, echo_sent_at, exec_ns, ControlInput(t, phi_d, theta_d))
    except ValueError as exc:
        raise ProtocolError(f"invalid field value: {exc}") from exc


def decode(buf: Union[bytes, bytearray, memoryview]) -> Optional[tuple[Message, int]]:
    """Decode the frame at the start of ``buf``.

    Returns ``(message, bytes_consumed)``, or ``None`` when ``buf`` does not
    yet hold a complete frame.  Raises :class:`ProtocolError` on bad frames.
    """
    if len(buf) < _LEN.size:
        return None
    (length,) = _LEN.unpack_from(buf)
    if length == 0 or length > max(_PAYLOAD_SIZES.values()):
        raise ProtocolError(f"implausible frame length {length}")
    end = _LEN.size + length
    if len(buf) < end:
        if len(buf) > _LEN.size and buf[_LEN.size] not in _PAYLOAD_SIZES:
            raise ProtocolError(f"unknown message tag 0x{buf[_LEN.size]:02x}")
        return None
    return _decode_payload(bytes(buf[_LEN.size:end])), end


class FrameReader:
    """Incremental decoder for a byte stream split at arbitrary boundaries."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf.extend(data)
        out = []
        while True:
            res = decode(self._buf)
            if res is None:
                return out
            msg, used = res
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- latency accounting ------------------------------------------------------------


@dataclass(frozen=True)
class LatencyRecord:
    """One command's latency split; stored in integer ns so the sum is exact."""

    cycle: int
    exec_ns: int
    rtd_ns: int

    @property
    def total_ns(self) -> int:
        return self.exec_ns + self.rtd_ns

    @property
    def l_exec(self) -> float:
        return self.exec_ns / 1e6

    @property
    def l_rtd(self) -> float:
        return self.rtd_ns / 1e6

    @property
    def l_total(self) -> float:
        return self.total_ns / 1e6


def rtl_from_echo(cmd: CommandMsg, now: int, cycle: int = 0) -> LatencyRecord:
    """Split ``now - echo_sent_at`` into controller compute and round trip.

    Both timestamps come from the receiver's own monotonic clock.
    """
    total = int(now) - cmd.echo_sent_at
    return LatencyRecord(cycle=cycle, exec_ns=cmd.exec_ns, rtd_ns=total - cmd.exec_ns)


class EchoTracker:
    """Matches command echoes against odometry this side actually sent.

    Also enforces the staleness rule: a command answering older odometry than
    the last accepted one is discarded.
    """

    def __init__(self, history: int = 4096):
        self._sent: dict[int, int] = {}
        self._order: list[int] = []
        self._history = history
        self.last_echo_seq: Optional[int] = None
        self.unknown_echoes = 0
        self.stale_discards = 0
        self.records: list[LatencyRecord] = []

    def sent(self, msg: OdometryMsg) -> None:
        self._sent[msg.seq] = msg.sent_at
        self._order.append(msg.seq)
        if len(self._order) > self._history:
            old = self._order[: len(self._order) - self._history]
            self._order = self._order[len(old):]
            for s in old:
                self._sent.pop(s, None)

    def accept(self, cmd: CommandMsg, now: int) -> Optional[LatencyRecord]:
        """Record latency and return it, or ``None`` when the command must be dropped."""
        if self.last_echo_seq is not None and cmd.echo_seq < self.last_echo_seq:
            self.stale_discards += 1
            return None
        sent_at = self._sent.get(cmd.echo_seq)
        if sent_at is None or sent_at != cmd.echo_sent_at:
            self.unknown_echoes += 1
            return None
        self.last_echo_seq = cmd.echo_seq
        rec = rtl_from_echo(cmd, now, cycle=len(self.records))
        self.records.append(rec)
        return rec


# -- delay injection ------------------------------------------------------------------


class DelayChannel:
    """FIFO that releases each item no earlier than ``put time + delay``.

    Safe for one producer and one consumer in different threads.  ``clock``
    returns nanoseconds; pass a virtual clock for lockstep simulation.
    """

    def __init__(self, one_way_delay_ms: float, clock: Callable[[], int] = time.monotonic_ns):
        if not one_way_delay_ms >= 0:
            raise ValueError("delay must be >= 0")
        self.delay_ns = int(round(one_way_delay_ms * 1e6))
        self._clock = clock
        self._heap: list[tuple[int, int, object]] = []
        self._counter = itertools.count()
        self._cv = threading.Condition()
        self._closed = False

    def put(self, item, now: Optional[int] = None) -> None:
        t = self._clock() if now is None else now
        with self._cv:
            # the counter keeps FIFO order for equal due times
            heapq.heappush(self._heap, (t + self.delay_ns, next(self._counter), item))
            self._cv.notify()

    def get(self, timeout: Optional[float] = None):
        """Block until the head item is due; raises ``queue.Empty`` on timeout or close."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                if self._heap:
                    wait_ns = self._heap[0][0] - self._clock()
                    if wait_ns <= 0:
                        return heapq.heappop(self._heap)[2]
                    wait = wait_ns * 1e-9
                elif self._closed:
                    raise queue.Empty
                else:
                    wait = None
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise queue.Empty
                    wait = remaining if wait is None else min(wait, remaining)
                self._cv.wait(wait)

    def pop_ready(self, now: Optional[int] = None) -> list:
        t = self._clock() if now is None else now
        out = []
        with self._cv:
            while self._heap and self._heap[0][0] <= t:
                out.append(heapq.heappop(self._heap)[2])
        return out

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def __len__(self) -> int:
        with self._cv:
            return len(self._heap)


def delay_channel(one_way_delay_ms: float, clock: Callable[[], int] = time.monotonic_ns) -> DelayChannel:
    return DelayChannel(one_way_delay_ms, clock)


class Sender:
    """Writes frames to a socket, through a pump thread when a delay is configured."""

    def __init__(self, sock, one_way_delay_ms: float = 0.0, on_error: Optional[Callable[[Exception], None]] = None):
        self._sock = sock
        self._lock = threading.Lock()
        self._on_error = on_error
        self._thread = None
        self.channel = None
        if one_way_delay_ms > 0:
            self.channel = DelayChannel(one_way_delay_ms)
            self._thread = threading.Thread(target=self._pump, name="delay-pump", daemon=True)
            self._thread.start()

    def send(self, frame: bytes) -> None:
        if self.channel is None:
            self._write(frame)
        else:
            self.channel.put(frame)

    def _write(self, frame: bytes) -> None:
        with self._lock:
            self._sock.sendall(frame)

    def _pump(self) -> None:
        while True:
            try:
                frame = self.channel.get()
            except queue.Empty:
                return
            try:
                self._write(frame)
            except OSError as exc:
                if self._on_error:
                    self._on_error(exc)
                return

    def close(self) -> None:
        if self.channel is not None:
            self.channel.close()
            self._thread.join(timeout=1.0)


def iter_messages(sock, bufsize: int = 65536) -> Iterable[Message]:
    """Yield decoded messages until the peer closes the stream."""
    reader = FrameReader()
    while True:
        data = sock.recv(bufsize)
        if not data:
            if reader.pending:
                raise ProtocolError(f"stream closed mid-frame ({reader.pending} bytes pending)")
            return
        yield from reader.feed(data)
