"""Client-side engine registry and the five-call engine lifecycle.

The client process creates engines (spawning one master process per team,
which in turn forks its teammates), submits goals, and drains answers. All
calls are non-blocking except ``par_get_answers`` in ``exact`` mode, which
waits until enough answers exist or the goal finishes.

Worker processes are forked, so engines must be created from a process
without running threads (the POSIX fork constraint). Remote teams are hosted
by ``layered-or serve-agent`` processes and require the tcp transport.
"""

from __future__ import annotations

import atexit
import json
import logging
import multiprocessing
import os
import re
import socket
import time
import traceback
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

from .config import EngineOptions
from .errors import EngineCreationError, EngineError, GoalError
from .oracle import _CopyStore
from .programs import get_program
from .team import TeamShared
from .transport import (
    ANSWER,
    CLIENT_ID,
    ENGINE_FREE,
    FAULT,
    GOAL,
    TERMINATE,
    QueueMesh,
    TcpEndpoint,
)
from .worker import Master, TeamContext, _unpack_answers, worker_process_main
from .engine import WorkerState

log = logging.getLogger("layered_or")

READY = "ready"
RUNNING = "running"
FINISHED = "finished"
FREED = "freed"

_REGISTRY: dict[str, "EngineHandle"] = {}
_LOCAL_HOSTS = ("local", "localhost", "127.0.0.1")


@dataclass
class TeamSpec:
    """One team of the engine topology: where, how many workers, which programs."""
    host: str = "local"
    n_workers: int = 1
    program: str = "builtin"


@dataclass
class GoalSpec:
    program: str
    args: list = field(default_factory=list)
    template: Optional[str] = None


# ---------------------------------------------------------------------------
# goal parsing
# ---------------------------------------------------------------------------

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_INT = re.compile(r"-?[0-9]+")


def parse_goal(text: str) -> GoalSpec:
    """Parse ``name``, ``name(arg, ...)``, optionally with ``-> slot``.

    Arguments are integers or atoms; whitespace is insignificant. Raises
    ``GoalError`` naming the 1-based column of the first offending character.
    """
    s = text
    i = 0

    def skip_ws():
        nonlocal i
        while i < len(s) and s[i].isspace():
            i += 1

    def fail(expected):
        raise GoalError(f"syntax error at column {i + 1}: expected {expected}")

    skip_ws()
    m = _NAME.match(s, i)
    if not m:
        fail("a program name")
    name = m.group()
    i = m.end()
    args: list = []
    skip_ws()
    if i < len(s) and s[i] == "(":
        i += 1
        while True:
            skip_ws()
            m = _INT.match(s, i)
            if m:
                args.append(int(m.group()))
                i = m.end()
            else:
                m = _NAME.match(s, i)
                if not m:
                    fail("an integer or atom argument")
                args.append(m.group())
                i = m.end()
            skip_ws()
            if i < len(s) and s[i] == ",":
                i += 1
                continue
            if i < len(s) and s[i] == ")":
                i += 1
                break
            fail("',' or ')'")
    template = None
    skip_ws()
    if i < len(s):
        if s.startswith("->", i):
            i += 2
            skip_ws()
            m = _NAME.match(s, i)
            if not m:
                fail("a template slot name")
            template = m.group()
            i = m.end()
            skip_ws()
        if i < len(s):
            fail("end of goal")
    return GoalSpec(name, args, template)


def _validate_goal(goal: GoalSpec) -> None:
    try:
        program = get_program(goal.program)
    except KeyError as exc:
        raise GoalError(exc.args[0]) from None
    if len(goal.args) != program.arity:
        raise GoalError(f"{goal.program} takes {program.arity} argument(s), "
                        f"got {len(goal.args)}")
    try:
        scratch = _CopyStore()
        program.setup(scratch, goal.args)
        slots = program.slots(goal.args)
    except (ValueError, TypeError) as exc:
        raise GoalError(f"bad arguments for {goal.program}: {exc}") from None
    if goal.template is not None and goal.template not in slots:
        raise GoalError(f"unknown template slot {goal.template!r}; "
                        f"slots: {sorted(slots)}")


# ---------------------------------------------------------------------------
# master process bootstrap
# ---------------------------------------------------------------------------

@dataclass
class _MasterBoot:
    engine_id: str
    team_id: int
    n_teams: int
    n_workers: int
    options: EngineOptions
    transport_kind: str
    mesh: object = None            # queue back-end only
    bind_host: str = "127.0.0.1"
    trace_queue: object = None
    channel: object = None         # ctrl channel back to the client


class _QueueChannel:
    """Bidirectional ctrl channel over a pair of multiprocess queues."""

    def __init__(self, ctx):
        self._a = ctx.SimpleQueue()
        self._b = ctx.SimpleQueue()

    def master_side(self):
        return _QueueHalf(self._a, self._b)

    def client_side(self):
        return _QueueHalf(self._b, self._a)


class _QueueHalf:
    def __init__(self, inbound, outbound):
        self._in = inbound
        self._out = outbound

    def put(self, obj) -> None:
        self._out.put(obj)

    def get(self, timeout: float):
        deadline = time.monotonic() + timeout
        while self._in.empty():
            if time.monotonic() >= deadline:
                raise TimeoutError("ctrl channel timed out")
            time.sleep(0.002)
        return self._in.get()

    def close(self) -> None:
        pass


class SocketChannel:
    """Ctrl channel as newline-delimited json over a socket (agent teams)."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._buf = b""

    def put(self, obj) -> None:
        self._sock.sendall(json.dumps(obj).encode() + b"\n")

    def get(self, timeout: float):
        self._sock.settimeout(timeout)
        while b"\n" not in self._buf:
            chunk = self._sock.recv(4096)
            if not chunk:
                raise TimeoutError("ctrl channel closed")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return json.loads(line.decode())

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def master_entry(boot: _MasterBoot) -> None:
    """Entry point of a team-master process."""
    from .errors import EngineShutdown

    chan = boot.channel
    shared = None
    workers = []
    ep = None
    try:
        ctx = multiprocessing.get_context("fork")
        shared = TeamShared(boot.n_workers, boot.options.frame_pool, ctx=ctx)
        mailboxes = [ctx.SimpleQueue() for _ in range(boot.n_workers)]
        answers = ctx.SimpleQueue()
        tctx = TeamContext(boot.engine_id, boot.team_id, boot.n_teams,
                           boot.n_workers, boot.options, shared, mailboxes,
                           answers, boot.trace_queue)
        for rank in range(1, boot.n_workers):
            p = ctx.Process(target=worker_process_main, args=(tctx, rank),
                            daemon=True, name=f"{boot.engine_id}-t{boot.team_id}w{rank}")
            p.start()
            workers.append(p)

        ws = WorkerState(team_id=boot.team_id, worker_id=0)
        ws.frames = shared
        ws.load_sink = lambda load: shared.set_load(0, load)
        ws.public_sink = lambda n: shared.set_public_nodes(0, n)

        if boot.transport_kind == "inproc":
            ep = boot.mesh.endpoint(boot.engine_id, boot.team_id)
            chan.put({"ready": True})
        else:
            ep = TcpEndpoint(boot.engine_id, boot.team_id, boot.n_teams,
                             latency=boot.options.tcp_latency_s)
            srv, port = ep.listen(boot.bind_host)
            chan.put({"port": port})
            portmap = chan.get(boot.options.ready_timeout_s)["portmap"]
            for peer in range(boot.team_id):
                host, pport = portmap[str(peer)]
                ep.dial(peer, host, pport)
            expected = set(range(boot.team_id + 1, boot.n_teams))
            if boot.team_id == 0:
                expected.add(CLIENT_ID)
            ep.accept_peers(srv, expected, boot.options.ready_timeout_s)
            srv.close()
            chan.put({"ready": True})

        master = Master(tctx, ws, ep)
        ep.own_load_fn = master.own_load
        if boot.options.extra.get("capture_wire") and boot.trace_queue is not None:
            ep.capture = []
        master.getwork_first_time()
    except EngineShutdown:
        pass
    except Exception:
        if boot.trace_queue is not None:
            boot.trace_queue.put((boot.team_id, 0, "master_crash",
                                  {"error": traceback.format_exc()}))
        try:
            chan.put({"error": traceback.format_exc()})
        except Exception:
            pass
    finally:
        if shared is not None:
            shared.signal_abort()
        for p in workers:
            p.join(timeout=2.0)
        for p in workers:
            if p.is_alive():
                p.terminate()
        if ep is not None:
            ep.close()
        try:
            chan.put({"bye": True})
        except Exception:
            pass


# ---------------------------------------------------------------------------
# the engine handle and the five calls
# ---------------------------------------------------------------------------

class EngineHandle:
    """A created engine: topology, lifecycle state, and the answer buffer."""

    def __init__(self, name: str, topology: list[TeamSpec], strategy: str,
                 options: EngineOptions, transport_kind: str):
        self.name = name
        self.topology = topology
        self.strategy = strategy
        self.options = options
        self.transport_kind = transport_kind
        self.state = READY
        self.answers: deque = deque()
        self.goal_seq = 0
        self.current_goal: Optional[GoalSpec] = None
        self._ep = None
        self._mesh = None
        self._procs: list = []
        self._channels: list = []
        self._trace_queue = None
        self._trace_buffer: list = []
        self._error: Optional[str] = None

    # -- client-side message pump ---------------------------------------------
    def _pump(self) -> None:
        if self._ep is None:
            return
        self._drain_trace()
        while True:
            msg = self._ep.poll()
            if msg is None:
                return
            if msg.kind == ANSWER and msg.goal_id == self.goal_seq:
                self.answers.extend(_unpack_answers(msg.raw))
            elif msg.kind == TERMINATE and msg.goal_id == self.goal_seq:
                self.state = FINISHED
            elif msg.kind == FAULT and msg.goal_id == self.goal_seq:
                self.state = FINISHED
                self._error = msg.meta.get("error", "engine fault")

    def _drain_trace(self) -> None:
        # tracing processes block once the trace pipe fills, so the client
        # moves events into this buffer on every pump
        if self._trace_queue is not None:
            while not self._trace_queue.empty():
                self._trace_buffer.append(self._trace_queue.get())

    def _raise_if_faulted(self) -> None:
        if self._error is not None:
            err, self._error = self._error, None
            raise GoalError(f"goal aborted by an engine fault:\n{err}")

    def _check_masters(self) -> None:
        for team_id, proc in enumerate(self._procs):
            if proc is not None and not proc.is_alive() and self.state == RUNNING:
                detail = ""
                try:
                    detail = f": {self._channels[team_id].get(0.1)}"
                except Exception:
                    pass
                raise EngineError(f"master of team {team_id} died{detail}")

    def trace_events(self) -> list:
        self._drain_trace()
        events = list(self._trace_buffer)
        self._trace_buffer.clear()
        return events

    def __repr__(self):
        return f"EngineHandle({self.name!r}, {self.state}, {len(self.topology)} teams)"


def par_create_parallel_engine(name: str, teams: Sequence[Union[TeamSpec, tuple]],
                               strategy: str = "vs",
                               transport: Optional[str] = None,
                               options: Optional[EngineOptions] = None) -> EngineHandle:
    """Create and launch the teams and workers of a new engine.

    ``teams`` is a sequence of ``TeamSpec`` (or ``(host, n_workers, program)``
    tuples). The first team is the master team; its master worker receives
    goals and returns answers. The back-end comes from ``transport``, the
    LAYERED_OR_TRANSPORT environment variable, or defaults to ``inproc``.
    """
    if name in _REGISTRY:
        raise EngineCreationError(f"engine name {name!r} is already in use")
    specs = []
    for t in teams:
        spec = t if isinstance(t, TeamSpec) else TeamSpec(*t)
        if spec.n_workers < 1:
            raise EngineCreationError("every team needs at least one worker")
        specs.append(spec)
    if not specs:
        raise EngineCreationError("an engine needs at least one team")
    if strategy not in ("vs", "hs"):
        raise EngineCreationError(f"unknown strategy {strategy!r}")
    transport_kind = transport or os.environ.get("LAYERED_OR_TRANSPORT", "inproc")
    if transport_kind not in ("inproc", "tcp"):
        raise EngineCreationError(f"unknown transport {transport_kind!r}")
    remote = [s for s in specs if s.host not in _LOCAL_HOSTS]
    if remote and transport_kind != "tcp":
        raise EngineCreationError("remote hosts require the tcp transport")
    options = options or EngineOptions()

    handle = EngineHandle(name, specs, strategy, options, transport_kind)
    n_teams = len(specs)
    ctx = multiprocessing.get_context("fork")
    if options.trace:
        handle._trace_queue = ctx.SimpleQueue()
    if transport_kind == "inproc":
        handle._mesh = QueueMesh(n_teams, ctx, delay=options.delay)
    try:
        _launch_teams(handle, ctx)
    except Exception:
        _teardown(handle, force=True)
        raise
    _REGISTRY[name] = handle
    return handle


def _launch_teams(handle: EngineHandle, ctx) -> None:
    opts = handle.options
    n_teams = len(handle.topology)
    for team_id, spec in enumerate(handle.topology):
        boot = _MasterBoot(
            engine_id=handle.name, team_id=team_id, n_teams=n_teams,
            n_workers=spec.n_workers, options=opts,
            transport_kind=handle.transport_kind, mesh=handle._mesh,
            trace_queue=handle._trace_queue)
        if spec.host in _LOCAL_HOSTS:
            chan = _QueueChannel(ctx)
            boot.channel = chan.master_side()
            proc = ctx.Process(target=master_entry, args=(boot,),
                               name=f"{handle.name}-master{team_id}")
            proc.start()
            handle._procs.append(proc)
            handle._channels.append(chan.client_side())
        else:
            host, _, port = spec.host.partition(":")
            if not port:
                raise EngineCreationError(
                    f"remote host {spec.host!r} must be '<host>:<port>'")
            try:
                sock = socket.create_connection((host, int(port)), timeout=10)
            except OSError as exc:
                raise EngineCreationError(
                    f"cannot reach agent at {spec.host}: {exc}") from None
            chan = SocketChannel(sock)
            chan.put({"cmd": "create_team", "engine": handle.name,
                      "team_id": team_id, "n_teams": n_teams,
                      "n_workers": spec.n_workers, "options": asdict(opts),
                      "bind_host": "0.0.0.0"})
            handle._procs.append(None)
            handle._channels.append(chan)

    if handle.transport_kind == "tcp":
        portmap = {}
        for team_id, (spec, chan) in enumerate(zip(handle.topology, handle._channels)):
            reply = _ctrl_get(chan, opts.ready_timeout_s)
            host = spec.host.partition(":")[0] if spec.host not in _LOCAL_HOSTS \
                else "127.0.0.1"
            portmap[str(team_id)] = (host, reply["port"])
        for chan in handle._channels:
            chan.put({"portmap": portmap})
        # team 0 reports ready only after accepting the client, so dial first
        handle._ep = TcpEndpoint(handle.name, CLIENT_ID, n_teams)
        host, port = portmap["0"]
        handle._ep.dial(0, host, port)
    else:
        handle._ep = handle._mesh.endpoint(handle.name, CLIENT_ID)

    for chan in handle._channels:
        _ctrl_get(chan, opts.ready_timeout_s, expect="ready")


def _ctrl_get(chan, timeout: float, expect: Optional[str] = None):
    reply = chan.get(timeout)
    if "error" in reply:
        raise EngineCreationError(f"team failed to start:\n{reply['error']}")
    if expect is not None and expect not in reply:
        raise EngineCreationError(f"unexpected ctrl reply {reply!r}")
    return reply


def par_run_goal(engine: EngineHandle, goal: Union[GoalSpec, str]) -> None:
    """Asynchronously start a goal; answers stream back while you poll."""
    _check_live(engine)
    if engine.state == RUNNING:
        raise GoalError("engine is already running a goal")
    if engine.state not in (READY, FINISHED):
        raise GoalError(f"engine is {engine.state}")
    spec = parse_goal(goal) if isinstance(goal, str) else goal
    _validate_goal(spec)
    engine.goal_seq += 1
    engine.current_goal = spec
    engine.answers.clear()
    engine._error = None
    engine.state = RUNNING
    engine._ep.send(0, GOAL, {
        "goal": engine.goal_seq, "program": spec.program, "args": spec.args,
        "template": spec.template, "strategy": engine.strategy,
    })


def par_probe_answers(engine: EngineHandle) -> bool:
    """True iff unread answers exist or the goal finished. Never blocks."""
    _check_live(engine)
    if engine.current_goal is None:
        raise GoalError("no goal was ever submitted to this engine")
    engine._pump()
    engine._raise_if_faulted()
    return bool(engine.answers) or engine.state == FINISHED


def par_get_answers(engine: EngineHandle, mode: tuple[str, int]):
    """Retrieve answers: ("max", n) returns at once, ("exact", n) blocks.

    Returns ``(answers, count)``; returns ``None`` once every answer has been
    consumed and the goal has finished (the retrieval "fails").
    """
    _check_live(engine)
    if engine.current_goal is None:
        raise GoalError("no goal was ever submitted to this engine")
    kind, n = mode
    if kind not in ("max", "exact") or n < 1:
        raise GoalError(f"bad retrieval mode {mode!r}")
    engine._pump()
    engine._raise_if_faulted()
    if kind == "exact":
        while len(engine.answers) < n and engine.state != FINISHED:
            time.sleep(0.0002)
            engine._pump()
            engine._raise_if_faulted()
            engine._check_masters()
    take = min(n, len(engine.answers))
    if take == 0:
        if engine.state == FINISHED:
            return None
        return [], 0
    batch = [engine.answers.popleft() for _ in range(take)]
    return batch, take


def par_free_parallel_engine(engine: Union[EngineHandle, str]) -> None:
    """Terminate all workers and teams; the engine name becomes reusable."""
    handle = _REGISTRY.get(engine) if isinstance(engine, str) else engine
    if handle is None or handle.state == FREED:
        log.warning("par_free_parallel_engine: engine already freed")
        return
    _teardown(handle, force=False)


def _teardown(handle: EngineHandle, force: bool) -> None:
    if handle.state == FREED:
        return
    try:
        if handle._ep is not None and not force:
            handle._ep.send(0, ENGINE_FREE, {})
    except EngineError:
        pass
    deadline = time.monotonic() + 5.0
    for proc in handle._procs:
        if proc is None:
            continue
        proc.join(timeout=max(0.1, deadline - time.monotonic()))
        if proc.is_alive():
            proc.terminate()
            proc.join(timeout=1.0)
            if proc.is_alive():
                proc.kill()
    for chan in handle._channels:
        chan.close()
    if handle._ep is not None:
        handle._ep.close()
    handle.state = FREED
    _REGISTRY.pop(handle.name, None)


def _check_live(engine: EngineHandle) -> None:
    if engine.state == FREED:
        raise GoalError(f"engine {engine.name!r} was freed")


@atexit.register
def _free_all() -> None:
    for handle in list(_REGISTRY.values()):
        _teardown(handle, force=False)
