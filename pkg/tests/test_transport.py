"""Transport layer: wire frames, queue and tcp back-ends, barrier."""

import multiprocessing
import random
import threading
import time

import pytest

from layered_or import transport
from layered_or.errors import EngineCreationError, EngineError, ProtocolViolation
from layered_or.transport import (
    QueueMesh,
    TcpEndpoint,
    decode_frame,
    encode_frame,
    encode_payload,
    parse_topology_file,
)

CTX = multiprocessing.get_context("fork")


def make_pair(n_teams=2, delay=None):
    mesh = QueueMesh(n_teams, CTX, delay=delay)
    return [mesh.endpoint("t", i, own_load_fn=lambda: 3) for i in range(n_teams)]


# -- wire frames ------------------------------------------------------------------

def random_frame(rng):
    loads = [(rng.randrange(-1, 50), rng.randrange(0, 1000))
             for _ in range(rng.randrange(1, 6))]
    payload = encode_payload({"goal": rng.randrange(100)},
                             bytes(rng.randrange(256) for _ in range(rng.randrange(200))))
    kind = rng.choice([transport.GOAL, transport.ANSWER, transport.SHARE_ACCEPT])
    return kind, rng.randrange(0, 8), loads, payload


def test_wireframe_roundtrip_on_random_instances():
    rng = random.Random(2024)
    for _ in range(1000):
        kind, sender, loads, payload = random_frame(rng)
        msg = decode_frame(encode_frame(kind, sender, loads, payload))
        assert msg.kind == kind and msg.sender == sender
        assert msg.loads == loads


def test_wireframe_rejects_corruption():
    frame = bytearray(encode_frame(transport.GOAL, 1, [(0, 1)], encode_payload({})))
    frame[len(frame) // 2] ^= 0xFF
    with pytest.raises(ProtocolViolation):
        decode_frame(bytes(frame))


def test_wireframe_rejects_bad_magic_and_truncation():
    frame = encode_frame(transport.GOAL, 1, [(0, 1)], encode_payload({}))
    with pytest.raises(ProtocolViolation):
        decode_frame(b"NOPE" + frame[4:])
    with pytest.raises(ProtocolViolation):
        decode_frame(frame[:-3])


# -- queue back-end ------------------------------------------------------------------

def test_send_increments_own_timestamp_per_message():
    a, b = make_pair()
    a.send(1, transport.SHARE_REQUEST, {"goal": 1})
    a.send(1, transport.SHARE_REQUEST, {"goal": 1})
    first = b.poll_wait(1.0)
    second = b.poll_wait(1.0)
    assert second.loads[0][1] == first.loads[0][1] + 1
    assert first.loads[0][0] == 3  # stamped through own_load_fn


def test_every_frame_carries_a_full_load_array():
    a, b, _ = make_pair(n_teams=3)
    a.capture = []
    for kind in (transport.SHARE_REQUEST, transport.ANSWER, transport.TERMINATE):
        a.send(1, kind, {"goal": 1})
    for direction, dest, frame in a.capture:
        msg = decode_frame(frame)
        assert len(msg.loads) == 3


def test_send_to_unknown_team_is_a_local_error():
    a, _ = make_pair()
    with pytest.raises(EngineError):
        a.send(7, transport.GOAL, {})
    with pytest.raises(EngineError):
        a.send(0, transport.GOAL, {})  # itself


def test_poll_on_empty_returns_none():
    a, b = make_pair()
    assert b.poll() is None


def test_per_sender_fifo_with_interleaved_senders():
    mesh = QueueMesh(3, CTX)
    eps = [mesh.endpoint("t", i) for i in range(3)]
    rng = random.Random(1)
    sent = {0: [], 1: []}
    for i in range(200):
        sender = rng.choice([0, 1])
        eps[sender].send(2, transport.ANSWER, {"goal": i, "n": len(sent[sender])})
        sent[sender].append(len(sent[sender]))
    seen = {0: [], 1: []}
    while len(seen[0]) + len(seen[1]) < 200:
        msg = eps[2].poll_wait(1.0)
        assert msg is not None
        seen[msg.sender].append(msg.meta["n"])
    assert seen[0] == sent[0] and seen[1] == sent[1]


def test_fifo_preserved_under_injected_delays():
    mesh = QueueMesh(2, CTX, delay=(99, 0.0, 0.003))
    a = mesh.endpoint("t", 0)
    b = mesh.endpoint("t", 1)
    for i in range(50):
        a.send(1, transport.ANSWER, {"n": i})
    got = []
    while len(got) < 50:
        msg = b.poll()
        if msg is not None:
            got.append(msg.meta["n"])
    assert got == list(range(50))


def test_terminate_after_refuse_keeps_order():
    a, b = make_pair()
    a.send(1, transport.SHARE_REFUSE, {"goal": 1})
    a.send(1, transport.TERMINATE, {"goal": 1})
    assert b.poll_wait(1.0).kind == transport.SHARE_REFUSE
    assert b.poll_wait(1.0).kind == transport.TERMINATE


# -- barrier ----------------------------------------------------------------------

def test_barrier_single_team_returns_immediately():
    mesh = QueueMesh(1, CTX)
    ep = mesh.endpoint("t", 0)
    ep.barrier(timeout=0.1)


def test_barrier_releases_after_last_arrival():
    mesh = QueueMesh(4, CTX)
    eps = [mesh.endpoint("t", i) for i in range(4)]
    released = []

    def enter(i, delay):
        time.sleep(delay)
        eps[i].barrier(timeout=5.0)
        released.append((i, time.monotonic()))

    threads = [threading.Thread(target=enter, args=(i, 0.05 * i)) for i in range(4)]
    t0 = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(released) == 4
    # nobody passes before the last (slowest) team has entered
    assert min(ts for _, ts in released) >= t0 + 0.15 - 0.01


def test_barrier_times_out_when_a_team_never_arrives():
    mesh = QueueMesh(2, CTX)
    ep = mesh.endpoint("t", 0)
    with pytest.raises(EngineCreationError):
        ep.barrier(timeout=0.2)


# -- tcp back-end -----------------------------------------------------------------

def tcp_pair(latency=0.0):
    a = TcpEndpoint("t", 0, 2, latency=latency)
    b = TcpEndpoint("t", 1, 2, latency=latency)
    srv, port = a.listen()
    t = threading.Thread(target=b.dial, args=(0, "127.0.0.1", port))
    t.start()
    a.accept_peers(srv, {1}, timeout=5.0)
    t.join()
    srv.close()
    return a, b


def test_tcp_roundtrip_byte_identity_on_large_payload():
    a, b = tcp_pair()
    blob = bytes(random.Random(3).randrange(256) for _ in range(1 << 20))
    a.send(1, transport.SHARE_ACCEPT, {"goal": 1, "req": 0}, blob)
    msg = b.poll_wait(10.0)
    assert msg is not None and msg.raw == blob
    a.close()
    b.close()


def test_tcp_preserves_order_and_latency_holds_delivery():
    a, b = tcp_pair(latency=0.02)
    t0 = time.monotonic()
    for i in range(5):
        a.send(1, transport.ANSWER, {"n": i})
    got = [b.poll_wait(5.0).meta["n"] for _ in range(5)]
    assert got == list(range(5))
    assert time.monotonic() - t0 >= 0.02
    a.close()
    b.close()


def test_tcp_barrier_and_client_link():
    mesh_n = 3
    eps = [TcpEndpoint("t", i, mesh_n) for i in range(mesh_n)]
    srvs = {}
    ports = {}
    for i, ep in enumerate(eps):
        srvs[i], ports[i] = ep.listen()

    def wire(i):
        for j in range(i):
            eps[i].dial(j, "127.0.0.1", ports[j])
        eps[i].accept_peers(srvs[i], set(range(i + 1, mesh_n)), timeout=5.0)

    threads = [threading.Thread(target=wire, args=(i,)) for i in range(mesh_n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    outcome = []
    threads = [threading.Thread(target=lambda ep=ep: outcome.append(ep.barrier(2.0)))
               for ep in eps]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(outcome) == mesh_n
    for ep in eps:
        ep.close()
    for s in srvs.values():
        s.close()


# -- topology file ------------------------------------------------------------------

def test_parse_topology_file():
    text = "# two hosts\nteam n1:9001 3\nteam n1:9002 4\n\nteam n2:9001 8\n"
    assert parse_topology_file(text) == [("n1", 9001, 3), ("n1", 9002, 4),
                                         ("n2", 9001, 8)]


def test_parse_topology_file_rejects_garbage():
    with pytest.raises(ValueError):
        parse_topology_file("team n1 3\n")
    with pytest.raises(ValueError):
        parse_topology_file("\n")
