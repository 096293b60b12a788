"""Inter-team scheduling kernels: load arrays, target selection, delegation.

A load array holds one ``(load, timestamp)`` entry per team: load -1 means
the team is out of work, load >= 0 is the sum of its workers' open private
alternatives (frame-held work is deliberately excluded, which is why load-0
teams remain legal request targets). A team's own timestamp increases with
every message it sends, so entries are totally ordered per team and arrays
merge as a join: larger timestamp wins, and on equal timestamps the larger
load wins. The load tie-break keeps a "this team just received work" record
written by the work's giver from being shadowed by the receiver's own
equally-stamped idle entry -- the property the termination check leans on.

Termination: a team that finds every entry (its own included) at -1 may end
the goal. Work moves only through SHARE_ACCEPT, and an accepting team both
stays visible as busy itself and records its requester as busy, so an
all–minus-one view cannot form while any alternative is still open.
"""

from __future__ import annotations

from typing import Optional, Sequence

Entry = tuple[int, int]           # (load, timestamp)

PENDING = "pending"
ACCEPTED = "accepted"
REFUSED = "refused"


def merge_load_arrays(local: Sequence[Entry], received: Sequence[Entry],
                      keep: int = -1) -> list[Entry]:
    """Entry-wise join of two load arrays; index ``keep`` stays local.

    A team is the only authority on its own entry, so the merging master
    passes its own index in ``keep``.
    """
    if len(local) != len(received):
        raise ValueError("load arrays index different team sets")
    out = []
    for i, ((ll, lt), (rl, rt)) in enumerate(zip(local, received)):
        if i != keep and (rt, rl) > (lt, ll):
            out.append((rl, rt))
        else:
            out.append((ll, lt))
    return out


def record_receiver_busy(loads: list[Entry], receiver: int, shipped_load: int) -> None:
    """Note that ``receiver`` just got ``shipped_load`` alternatives from us.

    Stamped at the receiver's latest known timestamp: the load tie-break then
    beats any same-stamp idle entry still circulating, and the receiver's own
    later messages (strictly newer) take over naturally.
    """
    load, ts = loads[receiver]
    if shipped_load > load:
        loads[receiver] = (shipped_load, ts)


def select_request_target(loads: Sequence[Entry], self_id: int) -> Optional[int]:
    """Busiest team to ask for work; load-0 teams count (they may hold
    frame-held work). Ties go to the lowest team id; None when every other
    team looks idle."""
    best = None
    best_load = -1
    for team, (load, _) in enumerate(loads):
        if team == self_id or load < 0:
            continue
        if load > best_load:
            best, best_load = team, load
    return best


def all_others_idle(loads: Sequence[Entry], self_id: int) -> bool:
    return all(load < 0 for team, (load, _) in enumerate(loads) if team != self_id)


def select_local_target(worker_loads: Sequence[int], self_rank: int) -> Optional[int]:
    """Teammate with the highest load register; ties to the lowest rank."""
    best = None
    best_load = 0
    for rank, load in enumerate(worker_loads):
        if rank == self_rank:
            continue
        if load > best_load:
            best, best_load = rank, load
    return best


def select_delegate(worker_loads: Sequence[int], public_nodes: Sequence[int],
                    idle_flags: Sequence[bool]) -> Optional[int]:
    """Worker best placed to serve an inter-team request.

    Highest load register first, then most live public nodes, then lowest
    rank. Idle workers own nothing to split, so they are not candidates.
    """
    best = None
    best_key = (0, 0)
    for rank, load in enumerate(worker_loads):
        if idle_flags[rank]:
            continue
        key = (load, public_nodes[rank])
        if key <= (0, 0):
            continue
        if best is None or key > best_key:
            best, best_key = rank, key
    return best


class DelegationFrame:
    """Ties one inbound share request to the worker chosen to serve it."""

    __slots__ = ("request_id", "requesting_team", "state", "worker")

    def __init__(self, request_id: int, requesting_team: int, worker: int):
        self.request_id = request_id
        self.requesting_team = requesting_team
        self.state = PENDING
        self.worker = worker

    def resolve(self, state: str) -> None:
        assert self.state == PENDING, "delegation resolved twice"
        assert state in (ACCEPTED, REFUSED)
        self.state = state
