"""Message layer between team masters and the client worker.

Two interchangeable back-ends sit behind one endpoint contract: multiprocess
queues (default) and TCP sockets. Both transmit the same checksummed wire
frame, so every message -- whichever back-end carries it -- piggybacks the
sender's full load array, and the codec is exercised constantly.

Delivery is reliable and in order per (sender, receiver) pair. The queue
back-end can inject randomized per-message delays and the TCP back-end a
fixed added latency; both emulate slower links without reordering a pair.
"""

from __future__ import annotations

import json
import socket
import struct
import time
import zlib
from collections import deque
from random import Random
from typing import Optional

from .errors import EngineCreationError, EngineError, ProtocolViolation

CLIENT_ID = 0xFFFF

# inter-team message kinds (the client link uses GOAL/ANSWER/TERMINATE/FAULT)
GOAL = 1
ROOT_INFO = 2
SHARE_REQUEST = 3
SHARE_ACCEPT = 4
SHARE_REFUSE = 5
ANSWER = 6
TERMINATE = 7
ENGINE_FREE = 8
FAULT = 9
# transport-internal kinds, consumed by barrier() and never surfaced
_BARRIER_ENTER = 200
_BARRIER_GO = 201

KIND_NAMES = {
    GOAL: "GOAL", ROOT_INFO: "ROOT_INFO", SHARE_REQUEST: "SHARE_REQUEST",
    SHARE_ACCEPT: "SHARE_ACCEPT", SHARE_REFUSE: "SHARE_REFUSE", ANSWER: "ANSWER",
    TERMINATE: "TERMINATE", ENGINE_FREE: "ENGINE_FREE", FAULT: "FAULT",
    _BARRIER_ENTER: "BARRIER_ENTER", _BARRIER_GO: "BARRIER_GO",
}

MAGIC = b"YTOR"
VERSION = 1
_FIXED = struct.Struct("<4sBBHH")    # magic, version, kind, sender, n_teams
_ENTRY = struct.Struct("<qQ")        # load (signed), timestamp (unsigned)
_PLEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")


class TeamMessage:
    """Decoded frame: kind, sender, piggybacked load array, payload."""

    __slots__ = ("kind", "sender", "loads", "meta", "raw")

    def __init__(self, kind, sender, loads, meta=None, raw=b""):
        self.kind = kind
        self.sender = sender
        self.loads = loads
        self.meta = meta or {}
        self.raw = raw

    @property
    def goal_id(self) -> int:
        return self.meta.get("goal", -1)

    def __repr__(self):
        return (f"TeamMessage({KIND_NAMES.get(self.kind, self.kind)}, "
                f"from={self.sender:#x}, meta={self.meta}, raw={len(self.raw)}B)")


def encode_payload(meta: dict, raw: bytes = b"") -> bytes:
    blob = json.dumps(meta, separators=(",", ":")).encode()
    return struct.pack("<I", len(blob)) + blob + raw


def decode_payload(payload: bytes) -> tuple[dict, bytes]:
    if len(payload) < 4:
        raise ProtocolViolation("payload shorter than its meta length prefix")
    (n,) = struct.unpack_from("<I", payload, 0)
    if len(payload) < 4 + n:
        raise ProtocolViolation("payload meta truncated")
    meta = json.loads(payload[4:4 + n].decode())
    return meta, payload[4 + n:]


def encode_frame(kind: int, sender: int, loads, payload: bytes) -> bytes:
    head = [_FIXED.pack(MAGIC, VERSION, kind, sender, len(loads))]
    for load, ts in loads:
        head.append(_ENTRY.pack(load, ts))
    head.append(_PLEN.pack(len(payload)))
    head.append(payload)
    body = b"".join(head)
    return body + _CRC.pack(zlib.crc32(body))


def decode_frame(data: bytes) -> TeamMessage:
    kind, sender, loads, payload, used = _decode_prefix(data)
    if used != len(data):
        raise ProtocolViolation("trailing bytes after frame")
    meta, raw = decode_payload(payload)
    return TeamMessage(kind, sender, loads, meta, raw)


def _decode_prefix(data: bytes):
    """Decode one frame at the head of ``data``; returns fields + bytes used."""
    if len(data) < _FIXED.size:
        raise ProtocolViolation("frame shorter than fixed header")
    magic, version, kind, sender, n_teams = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolViolation("bad frame magic")
    if version != VERSION:
        raise ProtocolViolation(f"unsupported frame version {version}")
    off = _FIXED.size
    need = off + n_teams * _ENTRY.size + _PLEN.size
    if len(data) < need:
        raise ProtocolViolation("frame truncated in load array")
    loads = []
    for _ in range(n_teams):
        loads.append(_ENTRY.unpack_from(data, off))
        off += _ENTRY.size
    (plen,) = _PLEN.unpack_from(data, off)
    off += _PLEN.size
    total = off + plen + _CRC.size
    if len(data) < total:
        raise ProtocolViolation("frame truncated in payload")
    payload = data[off:off + plen]
    (crc,) = _CRC.unpack_from(data, off + plen)
    if crc != zlib.crc32(data[:off + plen]):
        raise ProtocolViolation("frame checksum mismatch")
    return kind, sender, loads, payload, total


def frame_length(buf) -> Optional[int]:
    """Total length of the frame at the head of ``buf``, or None if unknown yet."""
    if len(buf) < _FIXED.size:
        return None
    _, _, _, _, n_teams = _FIXED.unpack_from(buf, 0)
    need = _FIXED.size + n_teams * _ENTRY.size + _PLEN.size
    if len(buf) < need:
        return None
    (plen,) = _PLEN.unpack_from(buf, need - _PLEN.size)
    return need + plen + _CRC.size


class Endpoint:
    """One communication endpoint: a team master's (or the client's) port.

    Single consumer: only the owning process touches it. Keeps the local
    load-array snapshot and stamps it (with a freshly incremented own
    timestamp) into every outgoing frame.
    """

    def __init__(self, engine_id: str, team_id: int, n_teams: int, own_load_fn=None):
        self.engine_id = engine_id
        self.team_id = team_id
        self.n_teams = n_teams
        self.own_load_fn = own_load_fn
        self.loads: list[tuple[int, int]] = [(-1, 0)] * n_teams
        self._ts = 0
        self._pending: deque[TeamMessage] = deque()
        self.capture = None   # optional list collecting (direction, frame bytes)

    # -- back-end hooks --------------------------------------------------------
    def _transmit(self, dest: int, frame: bytes) -> None:
        raise NotImplementedError

    def _receive(self) -> Optional[bytes]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # -- contract ----------------------------------------------------------------
    def peers(self):
        return [t for t in range(self.n_teams) if t != self.team_id]

    def stamp(self) -> list[tuple[int, int]]:
        self._ts += 1
        if self.own_load_fn is not None and self.team_id < self.n_teams:
            self.loads[self.team_id] = (self.own_load_fn(), self._ts)
        return list(self.loads)

    def send(self, dest: int, kind: int, meta: dict | None = None, raw: bytes = b"") -> None:
        if dest != CLIENT_ID and not 0 <= dest < self.n_teams:
            raise EngineError(f"unknown destination team {dest}")
        if dest == self.team_id:
            raise EngineError("a team does not message itself")
        frame = encode_frame(kind, self.team_id, self.stamp(),
                             encode_payload(meta or {}, raw))
        if self.capture is not None:
            self.capture.append(("send", dest, frame))
        self._transmit(dest, frame)

    def poll(self) -> Optional[TeamMessage]:
        """Next in-order message, or None. Never blocks."""
        if self._pending:
            return self._pending.popleft()
        frame = self._receive()
        if frame is None:
            return None
        if self.capture is not None:
            self.capture.append(("recv", self.team_id, frame))
        return decode_frame(frame)

    def poll_wait(self, timeout: float) -> Optional[TeamMessage]:
        deadline = time.monotonic() + timeout
        while True:
            msg = self.poll()
            if msg is not None:
                return msg
            if time.monotonic() >= deadline:
                return None
            time.sleep(0.0002)

    def push_back(self, msg: TeamMessage) -> None:
        self._pending.appendleft(msg)

    def barrier(self, timeout: float = 30.0) -> None:
        """Block until every team master has entered; team 0 aggregates."""
        if self.n_teams <= 1:
            return
        deadline = time.monotonic() + timeout
        parked: list[TeamMessage] = []
        try:
            if self.team_id == 0:
                waiting = set(range(1, self.n_teams))
                while waiting:
                    msg = self.poll_wait(min(0.05, timeout))
                    if msg is None:
                        if time.monotonic() >= deadline:
                            raise EngineCreationError(
                                f"barrier timed out waiting for teams {sorted(waiting)}")
                        continue
                    if msg.kind == _BARRIER_ENTER:
                        waiting.discard(msg.sender)
                    else:
                        parked.append(msg)
                for t in range(1, self.n_teams):
                    self.send(t, _BARRIER_GO)
            else:
                self.send(0, _BARRIER_ENTER)
                while True:
                    msg = self.poll_wait(min(0.05, timeout))
                    if msg is None:
                        if time.monotonic() >= deadline:
                            raise EngineCreationError("barrier timed out waiting for release")
                        continue
                    if msg.kind == _BARRIER_GO:
                        break
                    parked.append(msg)
        finally:
            for msg in reversed(parked):
                self.push_back(msg)


class _DelayGate:
    """Receiver-side hold queue emulating link latency per sender."""

    def __init__(self, seed: int, lo: float, hi: float):
        self._rng = Random(seed)
        self._lo = lo
        self._hi = hi
        self._held: deque[tuple[float, bytes]] = deque()

    def admit(self, frame: bytes) -> None:
        delay = self._lo + (self._hi - self._lo) * self._rng.random()
        self._held.append((time.monotonic() + delay, frame))

    def release(self) -> Optional[bytes]:
        if self._held and self._held[0][0] <= time.monotonic():
            return self._held.popleft()[1]
        return None

    def __bool__(self):
        return bool(self._held)


class QueueMesh:
    """All queue-pair links of one engine; build before forking the masters."""

    def __init__(self, n_teams: int, ctx, delay: tuple[int, float, float] | None = None):
        self.n_teams = n_teams
        self.delay = delay
        ids = list(range(n_teams)) + [CLIENT_ID]
        self.links = {}
        for a in ids:
            for b in ids:
                if a != b:
                    self.links[(a, b)] = ctx.SimpleQueue()

    def endpoint(self, engine_id: str, team_id: int, own_load_fn=None) -> "QueueEndpoint":
        return QueueEndpoint(self, engine_id, team_id, own_load_fn)


class QueueEndpoint(Endpoint):
    def __init__(self, mesh: QueueMesh, engine_id: str, team_id: int, own_load_fn=None):
        super().__init__(engine_id, team_id, mesh.n_teams, own_load_fn)
        self._mesh = mesh
        ids = [t for t in range(mesh.n_teams) if t != team_id]
        if team_id == 0:
            ids.append(CLIENT_ID)
        elif team_id == CLIENT_ID:
            ids = [0]
        self._sources = ids
        self._rr = 0
        if mesh.delay is not None:
            seed, lo, hi = mesh.delay
            self._gates = {s: _DelayGate(seed ^ (team_id << 20) ^ s, lo, hi) for s in ids}
        else:
            self._gates = None

    def _transmit(self, dest: int, frame: bytes) -> None:
        try:
            link = self._mesh.links[(self.team_id, dest)]
        except KeyError:
            raise EngineError(f"no link from {self.team_id:#x} to {dest:#x}") from None
        link.put(frame)

    def _receive(self) -> Optional[bytes]:
        n = len(self._sources)
        for i in range(n):
            src = self._sources[(self._rr + i) % n]
            link = self._mesh.links[(src, self.team_id)]
            if self._gates is None:
                if not link.empty():
                    self._rr = (self._rr + i + 1) % n
                    return link.get()
            else:
                gate = self._gates[src]
                while not link.empty():
                    gate.admit(link.get())
                frame = gate.release()
                if frame is not None:
                    self._rr = (self._rr + i + 1) % n
                    return frame
        return None


class TcpEndpoint(Endpoint):
    """Socket back-end: one duplex connection per peer, frames on the stream."""

    def __init__(self, engine_id: str, team_id: int, n_teams: int,
                 own_load_fn=None, latency: float = 0.0):
        super().__init__(engine_id, team_id, n_teams, own_load_fn)
        self._conns: dict[int, socket.socket] = {}
        self._bufs: dict[int, bytearray] = {}
        self._order: deque[int] = deque()
        self._latency = latency
        self._gates: dict[int, deque[tuple[float, bytes]]] = {}

    # -- connection setup ---------------------------------------------------------
    def listen(self, host: str = "127.0.0.1") -> tuple[socket.socket, int]:
        srv = socket.create_server((host, 0))
        srv.settimeout(0.1)
        return srv, srv.getsockname()[1]

    def attach(self, peer: int, conn: socket.socket) -> None:
        conn.setblocking(False)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conns[peer] = conn
        self._bufs[peer] = bytearray()
        self._gates[peer] = deque()
        self._order.append(peer)

    def dial(self, peer: int, host: str, port: int, timeout: float = 10.0) -> None:
        conn = socket.create_connection((host, port), timeout=timeout)
        conn.sendall(struct.pack("<H", self.team_id))
        self.attach(peer, conn)

    def accept_peers(self, srv: socket.socket, expected: set[int],
                     timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        pending = set(expected)
        while pending:
            if time.monotonic() >= deadline:
                raise EngineCreationError(f"peers never connected: {sorted(pending)}")
            try:
                conn, _ = srv.accept()
            except (TimeoutError, socket.timeout):
                continue
            conn.settimeout(5.0)
            (peer,) = struct.unpack("<H", _recv_exactly(conn, 2))
            if peer not in pending:
                conn.close()
                raise EngineCreationError(f"unexpected peer {peer:#x}")
            pending.discard(peer)
            self.attach(peer, conn)

    # -- back-end hooks ---------------------------------------------------------
    def _transmit(self, dest: int, frame: bytes) -> None:
        try:
            conn = self._conns[dest]
        except KeyError:
            raise EngineError(f"no connection to {dest:#x}") from None
        conn.setblocking(True)
        try:
            conn.sendall(frame)
        finally:
            conn.setblocking(False)

    def _receive(self) -> Optional[bytes]:
        for _ in range(len(self._order)):
            peer = self._order[0]
            self._order.rotate(-1)
            buf = self._bufs[peer]
            conn = self._conns[peer]
            try:
                while True:
                    chunk = conn.recv(1 << 16)
                    if not chunk:
                        raise EngineError(f"peer {peer:#x} closed the connection")
                    buf.extend(chunk)
                    if len(chunk) < (1 << 16):
                        break
            except (BlockingIOError, InterruptedError):
                pass
            while True:
                total = frame_length(buf)
                if total is None or len(buf) < total:
                    break
                frame = bytes(buf[:total])
                del buf[:total]
                if self._latency > 0:
                    self._gates[peer].append((time.monotonic() + self._latency, frame))
                else:
                    return frame
            gate = self._gates[peer]
            if gate and gate[0][0] <= time.monotonic():
                return gate.popleft()[1]
        return None

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._conns.clear()


def _recv_exactly(conn: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise EngineCreationError("peer hung up during handshake")
        buf += chunk
    return buf


def parse_topology_file(text: str) -> list[tuple[str, int, int]]:
    """Parse newline-delimited ``team <host>:<port> <n_workers>`` entries."""
    teams = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "team" or ":" not in parts[1]:
            raise ValueError(f"line {ln}: expected 'team <host>:<port> <n_workers>'")
        host, port = parts[1].rsplit(":", 1)
        teams.append((host, int(port), int(parts[2])))
    if not teams:
        raise ValueError("topology file defines no teams")
    return teams
