"""Host agent: pre-started process that spawns team masters on request.

Remote entries in an engine topology name a ``host:port`` where one of these
agents listens. The client connects, sends a one-line json create request,
and keeps the connection as the team's control channel; the agent forks the
master process (handing it the connection) and goes back to accepting.
"""

from __future__ import annotations

import json
import multiprocessing
import socket

from .api import SocketChannel, _MasterBoot, master_entry
from .config import EngineOptions


def _boot_from_request(req: dict, chan: SocketChannel) -> _MasterBoot:
    opts = dict(req["options"])
    if opts.get("delay") is not None:
        opts["delay"] = tuple(opts["delay"])
    return _MasterBoot(
        engine_id=req["engine"], team_id=req["team_id"], n_teams=req["n_teams"],
        n_workers=req["n_workers"], options=EngineOptions(**opts),
        transport_kind="tcp", bind_host=req.get("bind_host", "0.0.0.0"),
        channel=chan)


def serve_agent(port: int, host: str = "0.0.0.0", max_teams: int | None = None,
                on_bound=None) -> None:
    """Accept create-team requests forever (or for ``max_teams`` of them)."""
    ctx = multiprocessing.get_context("fork")
    children: list = []
    srv = socket.create_server((host, port))
    srv.settimeout(0.5)
    if on_bound is not None:
        on_bound(srv.getsockname()[1])
    served = 0
    try:
        while max_teams is None or served < max_teams:
            children = [c for c in children if c.is_alive()]
            try:
                conn, peer = srv.accept()
            except (TimeoutError, socket.timeout):
                continue
            chan = SocketChannel(conn)
            try:
                req = chan.get(timeout=10.0)
            except (TimeoutError, json.JSONDecodeError):
                chan.close()
                continue
            if req.get("cmd") != "create_team":
                chan.put({"error": f"unknown command {req.get('cmd')!r}"})
                chan.close()
                continue
            boot = _boot_from_request(req, chan)
            proc = ctx.Process(target=master_entry, args=(boot,),
                               name=f"agent-{req['engine']}-t{req['team_id']}")
            proc.start()
            children.append(proc)
            conn.close()          # the forked master owns its copy now
            served += 1
        for c in children:
            c.join()
    finally:
        srv.close()
