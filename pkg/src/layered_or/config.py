"""Tunables for one engine; every process of the engine carries a copy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


@dataclass
class EngineOptions:
    # busy-scheduler cadence: worker mailboxes drain every k engine steps,
    # the master additionally polls the transport at this interval
    k_backtracks: int = 32
    master_poll_s: float = 0.0002
    # a delegated worker accepts an inter-team request only with this many
    # open private alternatives (or a live public node of its own)
    l_min: int = 2
    # idle teams wait this long after a refusal before re-targeting
    retry_delay_s: float = 0.001
    # idle workers poll teammate loads with exponential backoff
    backoff_min_s: float = 0.000001
    backoff_max_s: float = 0.001
    frame_pool: int = 8192
    ready_timeout_s: float = 30.0
    barrier_timeout_s: float = 30.0
    # queue back-end: (seed, lo_s, hi_s) randomized per-message delivery delay
    delay: Optional[tuple[int, float, float]] = None
    # tcp back-end: fixed added latency per message
    tcp_latency_s: float = 0.0
    trace: bool = False
    extra: dict = field(default_factory=dict)
