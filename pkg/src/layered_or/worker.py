"""Team processes: worker loops, intra-team sharing, and the master's
idle/busy scheduling.

Every worker of a team is a forked process sharing the team's ``TeamShared``
region. Worker 0 is the team master: it alone owns the transport endpoint,
launches its teammates, and runs the two inter-team scheduler halves (the
idle scheduler when the whole team is out of work, the busy scheduler woven
into its execution loop). The client's goals enter through the master team's
master, and every worker parks in ``getwork_first_time`` between goals.
"""

from __future__ import annotations

import time
import traceback

from . import scheduler, splitting, transport
from .config import EngineOptions
from .engine import (
    WorkerState,
    allocate_dead_root,
    install_segments,
    run_loop,
    setup_goal,
)
from .errors import EngineShutdown, ProtocolViolation
from .programs import get_program
from .team import FramePoolExhausted, TeamShared, publish_private_nodes
from .transport import CLIENT_ID, TeamMessage

# intra-team notification kinds
N_HAS_WORK = "team_has_work"
N_DELEGATE_REQUEST = "delegate_request"
N_DELEGATE_ACCEPT = "delegate_accept"
N_DELEGATE_REFUSE = "delegate_refuse"
N_IDLE_AGAIN = "team_idle_again"
N_GOAL_DONE = "goal_done"
N_FAULT = "fault"

_WORK = "work"
_DONE = "done"


class GoalDone(Exception):
    """The current goal ended (termination, fault, or a newer goal appeared)."""


class TeamContext:
    """Per-team plumbing inherited by every worker at fork time."""

    def __init__(self, engine_id, team_id, n_teams, n_workers, options,
                 shared, mailboxes, answers, trace_queue):
        self.engine_id = engine_id
        self.team_id = team_id
        self.n_teams = n_teams
        self.n_workers = n_workers
        self.options: EngineOptions = options
        self.shared: TeamShared = shared
        self.mailboxes = mailboxes
        self.answers = answers
        self.trace_queue = trace_queue

    def notify(self, rank: int, kind: str, meta: dict, payload=None) -> None:
        self.mailboxes[rank].put((kind, meta, payload))

    def trace(self, rank: int, kind: str, **data) -> None:
        if self.trace_queue is not None:
            self.trace_queue.put((self.team_id, rank, kind, data))


def _parse_goal_meta(meta: dict):
    program = get_program(meta["program"])
    return program, list(meta["args"]), meta.get("template"), meta["goal"], meta.get("strategy", "vs")


# ---------------------------------------------------------------------------
# non-master workers
# ---------------------------------------------------------------------------

def worker_process_main(ctx: TeamContext, rank: int) -> None:
    ws = WorkerState(team_id=ctx.team_id, worker_id=rank)
    ws.frames = ctx.shared
    ws.load_sink = lambda load: ctx.shared.set_load(rank, load)
    ws.public_sink = lambda n: ctx.shared.set_public_nodes(rank, n)
    w = _Worker(ctx, ws, rank)
    try:
        w.getwork_first_time()
    except EngineShutdown:
        pass
    except Exception:
        ctx.trace(rank, "worker_crash", error=traceback.format_exc())
        ctx.notify(0, N_FAULT, {"goal": w.goal_id, "error": traceback.format_exc()})


class _Worker:
    """A non-master worker: local scheduling plus delegated inter-team shares."""

    def __init__(self, ctx: TeamContext, ws: WorkerState, rank: int):
        self.ctx = ctx
        self.ws = ws
        self.rank = rank
        self.goal_id = -1
        self.goal_meta = None

    # -- Alg. getwork: park, run, repeat ------------------------------------
    def getwork_first_time(self) -> None:
        ctx = self.ctx
        ctx.shared.set_ready(self.rank)
        while True:
            goal = self._wait_for_work_in_team()
            self._begin_goal(goal)
            try:
                self._local_cycle()
            except GoalDone:
                pass
            self.ws.reset_to_base()
            ctx.shared.set_idle(self.rank, False)

    def _wait_for_work_in_team(self) -> dict:
        ctx = self.ctx
        box = ctx.mailboxes[self.rank]
        while True:
            if ctx.shared.aborted():
                raise EngineShutdown
            if box.empty():
                time.sleep(0.001)
                continue
            kind, meta, payload = box.get()
            if kind == N_HAS_WORK:
                return meta
            if kind == N_GOAL_DONE and meta.get("shutdown"):
                raise EngineShutdown
            if kind == N_DELEGATE_REQUEST:
                self._refuse(meta)
            # stale notifications of a finished goal are dropped

    def _begin_goal(self, meta: dict) -> None:
        program, args, template, goal_id, _ = _parse_goal_meta(meta)
        self.goal_id = goal_id
        self.goal_meta = meta
        setup_goal(self.ws, program, args, template)
        allocate_dead_root(self.ws)
        self.ctx.shared.set_idle(self.rank, True)
        self.ctx.trace(self.rank, "root_allocated", goal=goal_id)

    # -- execution + local scheduler ------------------------------------------
    def _local_cycle(self) -> None:
        while True:
            got = self._acquire_locally()
            if got == _DONE:
                return
            self.ctx.shared.set_idle(self.rank, False)
            self._run()
            self.ws.reset_to_base()
            self.ctx.shared.set_idle(self.rank, True)

    def _run(self) -> None:
        ws = self.ws
        try:
            run_loop(ws, self._emit, service=self._service,
                     service_every=self.ctx.options.k_backtracks)
        except (GoalDone, EngineShutdown, ProtocolViolation):
            raise
        except Exception:
            # a program fault aborts the goal engine-wide, not this worker
            self.ctx.notify(0, N_FAULT, {"goal": self.goal_id,
                                         "error": traceback.format_exc()})
            raise GoalDone

    def _emit(self, answer: tuple) -> None:
        self.ctx.answers.put((self.goal_id, self.rank, answer))

    def _service(self) -> None:
        if self.ctx.shared.aborted():
            raise EngineShutdown
        self._drain_mailbox(busy=True)

    def _drain_mailbox(self, busy: bool) -> None:
        box = self.ctx.mailboxes[self.rank]
        while not box.empty():
            self._dispatch(*box.get(), busy=busy)

    def _dispatch(self, kind, meta, payload, busy: bool) -> None:
        if kind == N_DELEGATE_REQUEST:
            if meta.get("goal") != self.goal_id:
                self._refuse(meta)
            elif "req" in meta:
                self._serve_remote(meta)
            else:
                self._serve_local(meta)
        elif kind == N_GOAL_DONE:
            if meta.get("shutdown"):
                raise EngineShutdown
            if meta.get("goal") == self.goal_id:
                raise GoalDone
        elif kind in (N_DELEGATE_ACCEPT, N_DELEGATE_REFUSE):
            # reply to a request this worker abandoned (goal ended meanwhile)
            pass

    def _refuse(self, meta: dict) -> None:
        if "req" in meta:
            self.ctx.notify(0, N_DELEGATE_REFUSE, meta)
        else:
            self.ctx.notify(meta["local"], N_DELEGATE_REFUSE, meta)

    # -- sharing: this worker is the sharer ------------------------------------
    def _serve_local(self, meta: dict) -> None:
        requester = meta["local"]
        ws = self.ws
        if ws.load <= 0:
            self.ctx.notify(requester, N_DELEGATE_REFUSE, meta)
            return
        try:
            publish_private_nodes(ws, self.ctx.shared)
        except FramePoolExhausted:
            self.ctx.notify(requester, N_DELEGATE_REFUSE, meta)
            return
        segments = splitting.snapshot_segments(ws)
        self.ctx.notify(requester, N_DELEGATE_ACCEPT, meta, segments)
        self.ctx.trace(self.rank, "shared_locally", requester=requester,
                       frames=[f for f in segments["frames"] if f >= 0])

    def _has_live_public_node(self) -> bool:
        for cp in self.ws.cps:
            if cp.frame >= 0:
                n, c, _, _ = self.ctx.shared.frame_state(cp.frame)
                if c < n:
                    return True
        return False

    def _serve_remote(self, meta: dict) -> None:
        ws = self.ws
        opts = self.ctx.options
        if ws.load < opts.l_min and not self._has_live_public_node():
            self.ctx.notify(0, N_DELEGATE_REFUSE, meta)
            return
        aux = splitting.split_for_transfer(ws, meta["goal"], meta.get("strategy", "vs"))
        if aux.load <= 0:
            self.ctx.notify(0, N_DELEGATE_REFUSE, meta)
            return
        self.ctx.notify(0, N_DELEGATE_ACCEPT, meta, splitting.serialize_aux(aux))
        self.ctx.trace(self.rank, "shared_remotely", req=meta["req"], load=aux.load)

    # -- this worker is the requester -------------------------------------------
    def _acquire_locally(self):
        ctx = self.ctx
        shared = ctx.shared
        backoff = ctx.options.backoff_min_s
        signalled_idle = False
        while True:
            self._drain_mailbox(busy=False)
            target = scheduler.select_local_target(shared.loads(), self.rank)
            if target is not None:
                got = self._request_from(target)
                if got:
                    return _WORK
                backoff = ctx.options.backoff_min_s
                continue
            if not signalled_idle and shared.idle_count() == ctx.n_workers:
                ctx.notify(0, N_IDLE_AGAIN, {"goal": self.goal_id, "rank": self.rank})
                signalled_idle = True
            if shared.aborted():
                raise EngineShutdown
            time.sleep(backoff)
            backoff = min(backoff * 2, ctx.options.backoff_max_s)

    def _request_from(self, target: int) -> bool:
        ctx = self.ctx
        meta = {"goal": self.goal_id, "local": self.rank}
        ctx.notify(target, N_DELEGATE_REQUEST, meta)
        box = ctx.mailboxes[self.rank]
        while True:
            if ctx.shared.aborted():
                raise EngineShutdown
            if box.empty():
                time.sleep(0.00002)
                continue
            kind, m, payload = box.get()
            if kind == N_DELEGATE_ACCEPT and m.get("local") == self.rank \
                    and m.get("goal") == self.goal_id:
                self._install_local(payload)
                return True
            if kind == N_DELEGATE_REFUSE and m.get("local") == self.rank \
                    and m.get("goal") == self.goal_id:
                return False
            self._dispatch(kind, m, payload, busy=False)

    def _install_local(self, seg: dict) -> None:
        ws = self.ws
        ws.reset_to_base()
        install_segments(ws, seg["store_lo"], seg["store_cells"], seg["cp_records"],
                         seg["trail_lo"], seg["trail_entries"], frames=seg["frames"])
        self.ctx.trace(self.rank, "installed_locally", load=ws.load)


# ---------------------------------------------------------------------------
# the team master (worker 0)
# ---------------------------------------------------------------------------

class Master(_Worker):
    """Worker 0: also runs the inter-team idle/busy scheduler halves."""

    def __init__(self, ctx: TeamContext, ws: WorkerState, endpoint):
        super().__init__(ctx, ws, rank=0)
        self.ep = endpoint
        self.team_idle = False
        self._next_req = 0
        self._outstanding = None          # (req_id, target team)
        self._delegations = {}            # req_id -> DelegationFrame
        self._last_poll = 0.0
        self._next_poll_count = 0
        self._goal_finished = False
        self._client_done_sent = False
        self._install_pending = None
        self._flushed: set[int] = set()   # teams whose answer stream ended

    # -- load array stamping -----------------------------------------------------
    def own_load(self) -> int:
        if self.team_idle:
            return -1
        return self.ctx.shared.team_load()

    # -- Alg. getwork, master branches ---------------------------------------------
    def getwork_first_time(self) -> None:
        ctx = self.ctx
        self._wait_for_teammates()
        self.ep.barrier(ctx.options.barrier_timeout_s)
        ctx.trace(0, "barrier_passed")
        while True:
            if ctx.team_id == 0:
                goal = self._wait_for_client_goal()
                try:
                    self._run_goal_with_root(goal)
                except (KeyError, ValueError) as exc:
                    # the client validates goals, so this is defensive only
                    self.goal_id = goal.get("goal", -1)
                    self._client_done_sent = False
                    self._client_fault(f"goal rejected: {exc}")
            else:
                goal = self._wait_for_work_in_engine()
                self._run_goal_idle(goal)

    def _wait_for_teammates(self) -> None:
        ctx = self.ctx
        deadline = time.monotonic() + ctx.options.ready_timeout_s
        want = ctx.n_workers - 1
        while ctx.shared.ready_count() < want:
            if time.monotonic() >= deadline:
                raise ProtocolViolation(f"only {ctx.shared.ready_count()} of "
                                        f"{want} teammates became ready")
            if ctx.shared.aborted():
                raise EngineShutdown
            time.sleep(0.0005)
        ctx.trace(0, "teammates_ready", count=ctx.shared.ready_count())

    def _wait_for_client_goal(self) -> dict:
        while True:
            msg = self.ep.poll_wait(0.05)
            if msg is None:
                if self.ctx.shared.aborted():
                    raise EngineShutdown
                continue
            self._merge(msg)
            if msg.kind == transport.GOAL:
                return msg.meta
            if msg.kind == transport.ENGINE_FREE:
                self._engine_free(rebroadcast=True)
            if msg.kind == transport.SHARE_REQUEST:
                self.ep.send(msg.sender, transport.SHARE_REFUSE,
                             {"goal": msg.goal_id, "req": msg.meta.get("req")})
            # other stale frames from the previous goal are dropped here

    def _wait_for_work_in_engine(self) -> dict:
        while True:
            msg = self.ep.poll_wait(0.05)
            if msg is None:
                if self.ctx.shared.aborted():
                    raise EngineShutdown
                continue
            self._merge(msg)
            if msg.kind == transport.ROOT_INFO:
                return msg.meta
            if msg.kind == transport.ENGINE_FREE:
                self._engine_free(rebroadcast=False)
            if msg.kind == transport.SHARE_REQUEST:
                self.ep.send(msg.sender, transport.SHARE_REFUSE,
                             {"goal": msg.goal_id, "req": msg.meta.get("req")})
            # TERMINATE / FAULT / replies of the finished goal: dropped

    # -- goal execution ---------------------------------------------------------
    def _begin_goal_common(self, meta: dict) -> None:
        program, args, template, goal_id, _ = _parse_goal_meta(meta)
        self.goal_id = goal_id
        self.goal_meta = meta
        self._goal_finished = False
        self._client_done_sent = False
        self._outstanding = None
        self._delegations.clear()
        self._install_pending = None
        self._flushed.clear()
        self.ctx.shared.set_goal_seq(goal_id)
        setup_goal(self.ws, program, args, template)

    def _run_goal_with_root(self, meta: dict) -> None:
        ctx = self.ctx
        self._begin_goal_common(meta)
        self.team_idle = False
        for team in range(1, ctx.n_teams):
            self.ep.send(team, transport.ROOT_INFO, meta)
        for rank in range(1, ctx.n_workers):
            ctx.notify(rank, N_HAS_WORK, meta)
        ctx.trace(0, "goal_started", goal=self.goal_id)
        try:
            self._master_cycle(start_tag=self.ws.program.root_tag)
        except GoalDone:
            pass
        self._finish_goal()

    def _run_goal_idle(self, meta: dict) -> None:
        self._begin_goal_common(meta)
        allocate_dead_root(self.ws)
        self.ctx.shared.set_idle(0, True)
        self.team_idle = True
        self.ctx.trace(0, "root_allocated", goal=self.goal_id)
        try:
            self._team_idle_scheduler()     # returns once stacks were installed
            self._master_cycle(start_tag=None)
        except GoalDone:
            pass
        self._finish_goal()

    def _master_cycle(self, start_tag=None) -> None:
        """Run own work, then keep the team fed until the goal ends."""
        ctx = self.ctx
        shared = ctx.shared
        while True:
            if start_tag is not _DONE:
                shared.set_idle(0, False)
                try:
                    run_loop(self.ws, self._emit, start_tag=start_tag,
                             service=self._service,
                             service_every=ctx.options.k_backtracks)
                except (GoalDone, EngineShutdown, ProtocolViolation):
                    raise
                except Exception:
                    self._propagate_fault({"goal": self.goal_id,
                                           "error": traceback.format_exc()})
                self.ws.reset_to_base()
                shared.set_idle(0, True)
            start_tag = _DONE
            got = self._acquire_locally_master()
            if got == _WORK:
                start_tag = None
                continue
            # team out of work: enter the inter-team idle scheduler
            self.team_idle = True
            self.ctx.trace(0, "team_idle", goal=self.goal_id)
            self._team_idle_scheduler()
            start_tag = None

    def _service(self) -> None:
        ctx = self.ctx
        if ctx.shared.aborted():
            raise EngineShutdown
        self._forward_answers()
        self._drain_mailbox(busy=True)
        now = time.monotonic()
        if now - self._last_poll >= ctx.options.master_poll_s:
            self._last_poll = now
            self._drain_transport(busy=True)

    # -- answers -------------------------------------------------------------------
    def _forward_answers(self) -> None:
        ctx = self.ctx
        batch = []
        while not ctx.answers.empty():
            goal_id, rank, answer = ctx.answers.get()
            if goal_id == self.goal_id:
                batch.append(answer)
        if not batch:
            return
        if ctx.team_id == 0:
            self._deliver_answers(ctx.team_id, batch)
        else:
            self.ep.send(0, transport.ANSWER, {"goal": self.goal_id},
                         _pack_answers(batch))

    def _deliver_answers(self, origin: int, batch) -> None:
        """Master team only: pass answers on to the client."""
        ctx = self.ctx
        for answer in batch:
            ctx.trace(0, "client_answer", origin=origin, answer=tuple(answer))
        self.ep.send(CLIENT_ID, transport.ANSWER, {"goal": self.goal_id},
                     _pack_answers(batch))

    # -- intra-team servicing ----------------------------------------------------
    def _dispatch(self, kind, meta, payload, busy: bool) -> None:
        if kind == N_DELEGATE_ACCEPT and "req" in meta:
            self._delegate_reply(meta, payload)
        elif kind == N_DELEGATE_REFUSE and "req" in meta:
            self._delegate_reply(meta, None)
        elif kind == N_DELEGATE_REQUEST:
            if meta.get("goal") != self.goal_id:
                self._refuse(meta)
            else:
                self._serve_local(meta)     # the master itself is the sharer
        elif kind == N_IDLE_AGAIN:
            pass                            # flags in shared memory already say so
        elif kind == N_FAULT:
            self._propagate_fault(meta)
        elif kind == N_GOAL_DONE:
            if meta.get("shutdown"):
                raise EngineShutdown

    def _delegate_reply(self, meta: dict, aux_bytes) -> None:
        # request ids are per requesting team; the pair is the unique key
        frame = self._delegations.pop((meta.get("team"), meta["req"]), None)
        if frame is None or meta.get("goal") != self.goal_id:
            return
        if aux_bytes is None:
            frame.resolve(scheduler.REFUSED)
            self.ep.send(frame.requesting_team, transport.SHARE_REFUSE,
                         {"goal": self.goal_id, "req": frame.request_id})
        else:
            frame.resolve(scheduler.ACCEPTED)
            shipped = splitting.deserialize_aux(aux_bytes).load
            self.ep.send(frame.requesting_team, transport.SHARE_ACCEPT,
                         {"goal": self.goal_id, "req": frame.request_id},
                         aux_bytes)
            scheduler.record_receiver_busy(self.ep.loads, frame.requesting_team, shipped)
            self.ctx.trace(0, "share_accepted", to=frame.requesting_team, load=shipped)

    def _propagate_fault(self, meta: dict) -> None:
        if meta.get("goal") != self.goal_id:
            return
        for team in self.ep.peers():
            self.ep.send(team, transport.FAULT,
                         {"goal": self.goal_id, "error": meta.get("error", "")})
        if self.ctx.team_id == 0:
            self._client_fault(meta.get("error", ""))
        raise GoalDone

    def _client_fault(self, error: str) -> None:
        if not self._client_done_sent:
            self.ep.send(CLIENT_ID, transport.FAULT,
                         {"goal": self.goal_id, "error": error})
            self._client_done_sent = True

    # -- transport servicing -------------------------------------------------------
    def _drain_transport(self, busy: bool) -> None:
        while self._install_pending is None:
            # a pending install flips this team to busy; traffic behind it in
            # the inbox must be answered from the post-install state
            msg = self.ep.poll()
            if msg is None:
                return
            self._next_poll_count += 1
            self._handle_message(msg, busy)

    def _merge(self, msg: TeamMessage) -> None:
        if msg.sender != CLIENT_ID and len(msg.loads) == self.ep.n_teams:
            self.ep.loads = scheduler.merge_load_arrays(
                self.ep.loads, msg.loads, keep=self.ctx.team_id)

    def _handle_message(self, msg: TeamMessage, busy: bool) -> None:
        self._merge(msg)
        kind = msg.kind
        if kind == transport.SHARE_REQUEST:
            self._delegate_request(msg)
        elif kind == transport.ANSWER:
            if self.ctx.team_id != 0:
                raise ProtocolViolation("answers routed to a non-master team")
            if msg.goal_id == self.goal_id:
                if msg.meta.get("flush"):
                    self._flushed.add(msg.sender)
                else:
                    self._deliver_answers(msg.sender, _unpack_answers(msg.raw))
        elif kind == transport.TERMINATE:
            if msg.goal_id == self.goal_id:
                if busy:
                    raise ProtocolViolation(
                        f"TERMINATE for goal {msg.goal_id} reached a busy team")
                raise GoalDone
        elif kind == transport.FAULT:
            if msg.goal_id == self.goal_id:
                if self.ctx.team_id == 0:
                    self._client_fault(msg.meta.get("error", ""))
                raise GoalDone
        elif kind == transport.ENGINE_FREE:
            self._engine_free(rebroadcast=self.ctx.team_id == 0)
        elif kind in (transport.SHARE_ACCEPT, transport.SHARE_REFUSE):
            self._share_reply(msg, busy)
        elif kind == transport.GOAL:
            raise ProtocolViolation("GOAL frame reached a running team")
        elif kind == transport.ROOT_INFO:
            if msg.goal_id > self.goal_id and not busy:
                self.ep.push_back(msg)
                raise GoalDone
            raise ProtocolViolation("ROOT_INFO during a running goal")

    def _delegate_request(self, msg: TeamMessage) -> None:
        """Pick the best-placed worker for an inbound request, or refuse now."""
        ctx = self.ctx
        req = msg.meta.get("req", -1)
        if msg.goal_id != self.goal_id or self.team_idle:
            self.ep.send(msg.sender, transport.SHARE_REFUSE,
                         {"goal": msg.goal_id, "req": req})
            return
        shared = ctx.shared
        target = scheduler.select_delegate(
            shared.loads(), [shared.public_nodes_of(r) for r in range(ctx.n_workers)],
            shared.idle_flags())
        if target is None:
            self.ep.send(msg.sender, transport.SHARE_REFUSE,
                         {"goal": msg.goal_id, "req": req})
            return
        frame = scheduler.DelegationFrame(req, msg.sender, target)
        self._delegations[(msg.sender, req)] = frame
        meta = {"goal": self.goal_id, "req": req, "team": msg.sender,
                "strategy": self.goal_meta.get("strategy", "vs")}
        if target == 0:
            aux = None
            if self.ws.load >= ctx.options.l_min or self.ws.public_node_count():
                got = splitting.split_for_transfer(self.ws, self.goal_id,
                                                   meta["strategy"])
                if got.load > 0:
                    aux = splitting.serialize_aux(got)
            self._delegate_reply(dict(meta), aux)
        else:
            ctx.notify(target, N_DELEGATE_REQUEST, meta)
        ctx.trace(0, "delegated", req=req, worker=target, team=msg.sender)

    def _share_reply(self, msg: TeamMessage, busy: bool) -> None:
        if self._outstanding is None or msg.goal_id != self.goal_id:
            return
        req_id, target = self._outstanding
        if msg.meta.get("req") != req_id or msg.sender != target:
            return
        self._outstanding = None
        if msg.kind == transport.SHARE_ACCEPT:
            if busy:
                raise ProtocolViolation("SHARE_ACCEPT while this team is busy")
            self._install_pending = msg.raw

    # -- master as local requester ---------------------------------------------
    def _acquire_locally_master(self):
        """Try to pull work from a teammate; None when the team looks idle."""
        ctx = self.ctx
        shared = ctx.shared
        tries = 0
        while True:
            self._forward_answers()
            self._drain_mailbox(busy=False)
            self._drain_transport(busy=False)
            if self._install_pending is not None:
                raise ProtocolViolation("install pending outside the idle scheduler")
            target = scheduler.select_local_target(shared.loads(), 0)
            if target is not None:
                meta = {"goal": self.goal_id, "local": 0}
                ctx.notify(target, N_DELEGATE_REQUEST, meta)
                got = self._await_local_reply()
                if got:
                    return _WORK
                tries = 0
                continue
            if shared.idle_count() == ctx.n_workers and shared.public_alts() == 0:
                self._forward_answers()
                if ctx.answers.empty():
                    return None
            tries += 1
            time.sleep(min(ctx.options.backoff_min_s * (1 << min(tries, 10)),
                           ctx.options.backoff_max_s))

    def _await_local_reply(self) -> bool:
        ctx = self.ctx
        box = ctx.mailboxes[0]
        while True:
            if ctx.shared.aborted():
                raise EngineShutdown
            self._drain_transport(busy=False)
            if box.empty():
                time.sleep(0.00002)
                continue
            kind, m, payload = box.get()
            if kind == N_DELEGATE_ACCEPT and m.get("local") == 0 \
                    and m.get("goal") == self.goal_id:
                self._install_local(payload)
                self.ctx.shared.set_idle(0, False)
                return True
            if kind == N_DELEGATE_REFUSE and m.get("local") == 0 \
                    and m.get("goal") == self.goal_id:
                return False
            self._dispatch(kind, m, payload, busy=False)

    # -- the team idle scheduler ---------------------------------------------------
    def _team_idle_scheduler(self) -> None:
        """All workers idle: hunt other teams for work, or end the goal."""
        ctx = self.ctx
        opts = ctx.options
        self.team_idle = True
        retry_at = 0.0
        # back off while nothing arrives: idle masters must not starve the
        # busy teams' workers of cpu
        nap = 0.00001
        while True:
            if ctx.shared.aborted():
                raise EngineShutdown
            self._drain_mailbox(busy=False)
            before = self._next_poll_count
            self._drain_transport(busy=False)
            if self._next_poll_count != before:
                nap = 0.00001
            if self._install_pending is not None:
                self._install_stacks(self._install_pending)
                self._install_pending = None
                return
            if self._outstanding is None and time.monotonic() >= retry_at:
                target = scheduler.select_request_target(self.ep.loads, ctx.team_id)
                if target is None:
                    if self._try_termination():
                        raise GoalDone
                else:
                    req = self._next_req
                    self._next_req += 1
                    self._outstanding = (req, target)
                    self.ep.send(target, transport.SHARE_REQUEST,
                                 {"goal": self.goal_id, "req": req})
                    ctx.trace(0, "share_requested", team=target, req=req)
                retry_at = time.monotonic() + opts.retry_delay_s
            time.sleep(nap)
            nap = min(nap * 2, 0.0005)

    def _try_termination(self) -> bool:
        if not scheduler.all_others_idle(self.ep.loads, self.ctx.team_id):
            return False
        if self.own_load() >= 0:
            return False
        for team in self.ep.peers():
            self.ep.send(team, transport.TERMINATE, {"goal": self.goal_id})
        self.ctx.trace(0, "terminate_broadcast", goal=self.goal_id)
        return True

    def _install_stacks(self, aux_bytes: bytes) -> None:
        """Unpack received stacks, wake the team, resume with a fail."""
        ctx = self.ctx
        aux = splitting.deserialize_aux(aux_bytes)
        if aux.goal_id != self.goal_id:
            raise ProtocolViolation("installed stacks belong to another goal")
        ws = self.ws
        ws.reset_to_base()
        splitting.install_aux(ws, aux)
        self.team_idle = False
        ctx.shared.set_idle(0, False)
        for rank in range(1, ctx.n_workers):
            ctx.notify(rank, N_HAS_WORK, self.goal_meta)
        ctx.trace(0, "installed", load=ws.load, goal=self.goal_id)

    # -- goal wind-down ---------------------------------------------------------
    def _finish_goal(self) -> None:
        ctx = self.ctx
        if self._goal_finished:
            return
        self._goal_finished = True
        # answers already queued locally or in transit must reach the client
        self._forward_answers()
        if ctx.team_id == 0:
            self._drain_transport_final()
            self._forward_answers()
            if not self._client_done_sent:
                # trace first: its queue write completes before the client
                # can possibly observe the TERMINATE that ends the goal
                ctx.trace(0, "goal_done", goal=self.goal_id)
                self.ep.send(CLIENT_ID, transport.TERMINATE, {"goal": self.goal_id})
                self._client_done_sent = True
        else:
            # end-of-stream marker: FIFO per pair puts it after every answer
            # this team ever sent, so the master team can finish exactly when
            # all markers are in instead of sitting out a quiet window
            self.ep.send(0, transport.ANSWER,
                         {"goal": self.goal_id, "flush": True}, _pack_answers([]))
        for rank in range(1, ctx.n_workers):
            ctx.notify(rank, N_GOAL_DONE, {"goal": self.goal_id})
        if self.ep.capture:
            ctx.trace(0, "wire_capture", frames=list(self.ep.capture))
            self.ep.capture.clear()
        self.ws.reset_to_base()
        self.team_idle = True
        ctx.shared.set_idle(0, True)

    def _drain_transport_final(self) -> None:
        """Collect the other teams' end-of-stream markers and late answers."""
        ctx = self.ctx
        everyone = set(range(1, ctx.n_teams))
        opts = ctx.options
        window = 5.0 + (4 * opts.delay[2] if opts.delay is not None else 0.0) \
            + 4 * opts.tcp_latency_s
        deadline = time.monotonic() + window
        while not everyone <= self._flushed:
            msg = self.ep.poll()
            if msg is None:
                if time.monotonic() >= deadline:
                    ctx.trace(0, "flush_timeout",
                              missing=sorted(everyone - self._flushed))
                    return
                time.sleep(0.0002)
                continue
            self._merge(msg)
            if msg.kind == transport.ANSWER and msg.goal_id == self.goal_id:
                if msg.meta.get("flush"):
                    self._flushed.add(msg.sender)
                else:
                    self._deliver_answers(msg.sender, _unpack_answers(msg.raw))
            elif msg.kind == transport.ENGINE_FREE:
                self._engine_free(rebroadcast=True)
            # everything else at this point is stale scheduler traffic

    def _engine_free(self, rebroadcast: bool) -> None:
        ctx = self.ctx
        if rebroadcast:
            for team in self.ep.peers():
                self.ep.send(team, transport.ENGINE_FREE, {})
        ctx.shared.signal_abort()
        for rank in range(1, ctx.n_workers):
            ctx.notify(rank, N_GOAL_DONE, {"shutdown": True})
        raise EngineShutdown


# ---------------------------------------------------------------------------
# answer batch codec (ANSWER frame payload)
# ---------------------------------------------------------------------------

def _pack_answers(batch) -> bytes:
    import struct

    out = [struct.pack("<I", len(batch))]
    for answer in batch:
        out.append(struct.pack(f"<I{len(answer)}q", len(answer), *answer))
    return b"".join(out)


def _unpack_answers(raw: bytes):
    import struct

    (count,) = struct.unpack_from("<I", raw, 0)
    off = 4
    batch = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        batch.append(tuple(struct.unpack_from(f"<{n}q", raw, off)))
        off += 8 * n
    return batch
