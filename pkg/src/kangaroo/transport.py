"""Wire format, a shaped network simulator, TCP loopback transport and transcripts."""
from __future__ import annotations

import csv
import enum
import io
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from .errors import FramingError, ProtocolError

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IBQ")  # payload length, type tag, sequence number
MAX_PAYLOAD = 64 << 20


class MsgType(enum.IntEnum):
    HELLO = 0x01
    PUBLIC_BUNDLE = 0x02
    QUERY = 0x03
    COMPARE_BLINDED = 0x04
    COMPARE_RESULT = 0x05
    PATH_BLINDED = 0x06
    PATH_COSTS = 0x07
    PATH_CMP_BLINDED = 0x08
    PATH_CMP_RESULT = 0x09
    RESPONSE = 0x0A
    ERROR = 0x0B


SETUP_TYPES = frozenset({MsgType.HELLO, MsgType.PUBLIC_BUNDLE})
QUERY_SEQUENCE = (MsgType.QUERY, MsgType.COMPARE_BLINDED, MsgType.COMPARE_RESULT, MsgType.PATH_BLINDED,
                  MsgType.PATH_COSTS, MsgType.PATH_CMP_BLINDED, MsgType.PATH_CMP_RESULT, MsgType.RESPONSE)


@dataclass(frozen=True)
class Message:
    type: MsgType
    payload: bytes = b""
    seq: int = 0

    @property
    def size(self) -> int:
        return HEADER.size + len(self.payload)


def frame(msg: Message, max_payload: int = MAX_PAYLOAD) -> bytes:
    if len(msg.payload) > max_payload:
        raise FramingError(f"payload of {len(msg.payload)} bytes exceeds the {max_payload} byte limit")
    return HEADER.pack(len(msg.payload), int(msg.type), msg.seq) + msg.payload


def _parse_header(head: bytes, max_payload: int):
    length, tag, seq = HEADER.unpack(head)
    if length > max_payload:
        raise FramingError(f"frame announces {length} bytes, limit is {max_payload}")
    try:
        kind = MsgType(tag)
    except ValueError:
        raise FramingError(f"unknown message tag 0x{tag:02x}") from None
    return length, kind, seq


def deframe(data: bytes, max_payload: int = MAX_PAYLOAD) -> tuple[Message, bytes]:
    """Parse one frame from the front of ``data``; returns (message, remaining bytes)."""
    if len(data) < HEADER.size:
        raise FramingError(f"truncated header: {len(data)} of {HEADER.size} bytes")
    length, kind, seq = _parse_header(data[:HEADER.size], max_payload)
    end = HEADER.size + length
    if len(data) < end:
        raise FramingError(f"truncated payload: {len(data) - HEADER.size} of {length} bytes")
    return Message(kind, bytes(data[HEADER.size:end]), seq), data[end:]


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise FramingError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock, max_payload: int = MAX_PAYLOAD) -> Message:
    length, kind, seq = _parse_header(_recv_exact(sock, HEADER.size), max_payload)
    return Message(kind, _recv_exact(sock, length), seq)


def write_frame(sock, msg: Message) -> int:
    data = frame(msg)
    sock.sendall(data)
    return len(data)


# network profiles --------------------------------------------------------------

@dataclass(frozen=True)
class NetProfile:
    name: str
    bandwidth_bps: float
    rtt_ms: float

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth must be positive")
        if self.rtt_ms < 0:
            raise ValueError("round-trip time must be non-negative")

    def transit_ms(self, nbytes: int) -> float:
        return self.rtt_ms / 2 + nbytes * 8 / self.bandwidth_bps * 1000

    @classmethod
    def parse(cls, text: str) -> "NetProfile":
        """'lan', 'man', 'wan' or 'name:bandwidth_bps:rtt_ms'."""
        key = text.strip().lower()
        if key in PROFILES:
            return PROFILES[key]
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"network profile {text!r} is not a preset or name:bps:rtt_ms")
        return cls(parts[0], float(parts[1]), float(parts[2]))


PROFILES = {
    "lan": NetProfile("lan", 1e9, 0.1),
    "man": NetProfile("man", 100e6, 6.0),
    "wan": NetProfile("wan", 40e6, 80.0),
}


def load_profiles(path) -> dict:
    """Profiles from a config file: one 'name:bandwidth_bps:rtt_ms' per line, '#' comments."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                p = NetProfile.parse(line)
                out[p.name] = p
    return out


def simulate_send(profile: NetProfile, nbytes: int, clock: float, link_free: float = 0.0) -> float:
    """Arrival time (ms) of a message handed to a link at ``clock``.

    A message cannot start serializing before the previous one on the same
    direction has finished (``link_free``).
    """
    start = max(clock, link_free)
    return start + profile.transit_ms(nbytes)


# transcripts -----------------------------------------------------------------

UP, DOWN = "up", "down"  # client -> server, server -> client


@dataclass
class Record:
    seq: int
    direction: str
    type: str
    bytes: int
    t_send_ms: float
    t_recv_ms: float
    setup: bool


@dataclass
class Transcript:
    records: list = field(default_factory=list)
    profile: NetProfile | None = None

    def add(self, rec: Record):
        self.records.append(rec)

    def _select(self, setup):
        return [r for r in self.records if setup is None or r.setup == setup]

    def message_count(self, setup: bool | None = False) -> int:
        return len(self._select(setup))

    def bytes_up(self, setup: bool | None = False) -> int:
        return sum(r.bytes for r in self._select(setup) if r.direction == UP)

    def bytes_down(self, setup: bool | None = False) -> int:
        return sum(r.bytes for r in self._select(setup) if r.direction == DOWN)

    def total_bytes(self, setup: bool | None = None) -> int:
        return sum(r.bytes for r in self._select(setup))

    def round_trips(self, setup: bool | None = False) -> float:
        """Direction alternations (counting the first message) divided by two."""
        recs = self._select(setup)
        if not recs:
            return 0
        changes = 1 + sum(1 for a, b in zip(recs, recs[1:]) if a.direction != b.direction)
        return changes / 2

    def query_types(self) -> list[str]:
        return [r.type for r in self._select(False)]

    def wall_ms(self, setup: bool | None = None) -> float:
        recs = self._select(setup)
        if not recs:
            return 0.0
        return recs[-1].t_recv_ms - recs[0].t_send_ms

    def to_csv(self, path_or_buf=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "direction", "type", "bytes", "t_send_ms", "t_recv_ms"])
        for r in self.records:
            w.writerow([r.seq, r.direction, r.type, r.bytes, f"{r.t_send_ms:.6f}", f"{r.t_recv_ms:.6f}"])
        text = buf.getvalue()
        if path_or_buf is not None:
            if hasattr(path_or_buf, "write"):
                path_or_buf.write(text)
            else:
                with open(path_or_buf, "w") as fh:
                    fh.write(text)
        return text

    def resimulate(self, profile: NetProfile) -> "Transcript":
        """Same messages replayed on a virtual clock under ``profile``."""
        clock = SimClock(profile)
        out = Transcript(profile=profile)
        for r in self.records:
            t0, t1 = clock.send(r.direction, r.bytes)
            out.add(Record(r.seq, r.direction, r.type, r.bytes, t0, t1, r.setup))
        return out

    def summary(self) -> dict:
        return {
            "setup_bytes": self.total_bytes(True),
            "query_bytes": self.total_bytes(False),
            "total_bytes": self.total_bytes(None),
            "query_messages": self.message_count(False),
            "round_trips": self.round_trips(False),
            "query_wall_ms": self.wall_ms(False),
        }


class SimClock:
    """Virtual clock for one scenario; local compute time can be charged explicitly."""

    def __init__(self, profile: NetProfile, charge_compute: bool = False):
        self.profile = profile
        self.now = 0.0
        self.link_free = {UP: 0.0, DOWN: 0.0}
        self.charge_compute = charge_compute

    def send(self, direction: str, nbytes: int) -> tuple[float, float]:
        t_send = self.now
        arrival = simulate_send(self.profile, nbytes, t_send, self.link_free[direction])
        serial = nbytes * 8 / self.profile.bandwidth_bps * 1000
        self.link_free[direction] = max(t_send, self.link_free[direction]) + serial
        self.now = arrival
        return t_send, arrival

    def compute(self, ms: float):
        if self.charge_compute:
            self.now += ms


# drivers -----------------------------------------------------------------------

def _record(transcript, msg, direction, t_send, t_recv):
    transcript.add(Record(msg.seq, direction, msg.type.name, msg.size, t_send, t_recv, msg.type in SETUP_TYPES))


def _after_send(endpoint):
    hook = getattr(endpoint, "after_send", None)
    if hook is not None:
        hook()


def _sim_loop(client, server, first: Message, clock: SimClock, transcript: Transcript):
    """Deliver messages back and forth until the client has nothing more to send."""
    msg = first
    while msg is not None:
        data = frame(msg)
        t0, t1 = clock.send(UP, len(data))
        msg, _ = deframe(data)
        _record(transcript, msg, UP, t0, t1)
        _after_send(client)
        tick = time.perf_counter()
        reply = server.handle(msg)
        clock.compute((time.perf_counter() - tick) * 1000)
        if reply is None:
            return
        data = frame(reply)
        t0, t1 = clock.send(DOWN, len(data))
        reply, _ = deframe(data)
        _record(transcript, reply, DOWN, t0, t1)
        _after_send(server)
        tick = time.perf_counter()
        msg = client.handle(reply)
        clock.compute((time.perf_counter() - tick) * 1000)


class _TcpServer:
    def __init__(self, server_factory, host="127.0.0.1", port=0):
        self.factory = server_factory
        self.sock = socket.create_server((host, port))
        self.address = self.sock.getsockname()
        self._threads = []
        self._stop = threading.Event()

    def serve_forever(self):
        self.sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._handle, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _handle(self, conn):
        server = self.factory()
        with conn:
            try:
                while True:
                    try:
                        msg = read_frame(conn)
                    except FramingError:
                        return
                    reply = server.handle(msg)
                    if reply is not None:
                        write_frame(conn, reply)
                        _after_send(server)
            except OSError as e:
                log.warning("connection dropped: %s", e)

    def close(self):
        self._stop.set()
        self.sock.close()


def serve_tcp(server_factory, host="127.0.0.1", port=0):
    """Start a threaded TCP server (one session object per connection). Returns the server."""
    srv = _TcpServer(server_factory, host, port)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv


def tcp_exchange(client, address, first: Message, transcript: Transcript, sock=None):
    own = sock is None
    sock = sock or socket.create_connection(address)
    t_base = time.perf_counter()
    try:
        msg = first
        while msg is not None:
            t0 = (time.perf_counter() - t_base) * 1000
            write_frame(sock, msg)
            _record(transcript, msg, UP, t0, t0)
            _after_send(client)
            reply = read_frame(sock)
            t1 = (time.perf_counter() - t_base) * 1000
            _record(transcript, reply, DOWN, t1, t1)
            msg = client.handle(reply)
    finally:
        if own:
            sock.close()
    return sock


def run_session(client, server, transport: str = "sim", profile: NetProfile | str = "lan", queries=(),
                charge_compute: bool = False):
    """Run setup plus one query per entry of ``queries`` (quantized inputs).

    ``server`` is a ServerSession for "sim", or a zero-argument factory for
    "tcp" (a fresh session per connection). Returns (list of pi, Transcript).
    """
    if isinstance(profile, str):
        profile = NetProfile.parse(profile)
    transcript = Transcript(profile=profile)
    results = []
    if transport == "sim":
        clock = SimClock(profile, charge_compute)
        _sim_loop(client, server, client.hello(), clock, transcript)
        for xq in queries:
            _sim_loop(client, server, client.query(xq), clock, transcript)
            results.append(client.result)
    elif transport == "tcp":
        factory = server if callable(server) and not hasattr(server, "handle") else (lambda: server)
        srv = serve_tcp(factory)
        try:
            with socket.create_connection(srv.address) as sock:
                tcp_exchange(client, None, client.hello(), transcript, sock)
                for xq in queries:
                    tcp_exchange(client, None, client.query(xq), transcript, sock)
                    results.append(client.result)
        finally:
            srv.close()
    else:
        raise ProtocolError("transport", f"unknown transport {transport!r}")
    return results, transcript


__all__ = [
    "HEADER", "MAX_PAYLOAD", "Message", "MsgType", "NetProfile", "PROFILES", "QUERY_SEQUENCE", "Record",
    "SETUP_TYPES", "SimClock", "Transcript", "deframe", "frame", "load_profiles", "read_frame",
    "run_session", "serve_tcp", "simulate_send", "write_frame",
]
