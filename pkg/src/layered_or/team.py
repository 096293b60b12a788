"""Shared-memory team plumbing: the or-frame pool and per-worker registers.

One ``TeamShared`` region backs a team. It is an anonymous shared ``mmap``
created before the team's worker processes fork, so every worker addresses
the same physical pages. It holds the or-frame pool (the only hot shared
mutable state), per-worker load registers / flags, and a few counters.
Everything bulky (stack segments, answers, notifications) travels through
per-worker message queues instead.

Frame cursor/offset fields are read and written only under the frame's
stripe lock. ``public_alts`` counts open alternatives currently owned by
live frames; the team is out of work exactly when every worker is idle and
this counter is zero.
"""

from __future__ import annotations

import mmap
import multiprocessing as mp
from contextlib import contextmanager

from .engine import count_open

_HDR = 8                   # header slots before the per-worker arrays
_SLOT_PUBLIC_ALTS = 0
_SLOT_ABORT = 1
_SLOT_GOAL_SEQ = 2
_SLOT_FREE_HEAD = 3
_SLOT_HIGH_WATER = 4

_FRAME_SLOTS = 6           # n_alts, cursor, split_offset, members, depth, next_free
_F_NALTS, _F_CURSOR, _F_OFFSET, _F_MEMBERS, _F_DEPTH, _F_NEXT = range(_FRAME_SLOTS)

_N_STRIPES = 64


class FramePoolExhausted(RuntimeError):
    """No free or-frame slot; the sharing attempt must be refused."""


class TeamShared:
    """Team-wide shared state. Fork the workers after constructing this."""

    def __init__(self, n_workers: int, n_frames: int = 8192, ctx=None):
        ctx = ctx or mp.get_context("fork")
        self.n_workers = n_workers
        self.n_frames = n_frames
        self._frames_off = _HDR + 4 * n_workers
        size = 8 * (self._frames_off + n_frames * _FRAME_SLOTS)
        self._mm = mmap.mmap(-1, size)
        self._mv = memoryview(self._mm).cast("q")
        self._mv[_SLOT_FREE_HEAD] = -1
        self._pool_lock = ctx.Lock()
        self._counter_lock = ctx.Lock()
        self._stripes = [ctx.Lock() for _ in range(_N_STRIPES)]

    # -- per-worker registers -------------------------------------------------
    def _warr(self, bank: int, rank: int) -> int:
        return _HDR + bank * self.n_workers + rank

    def set_ready(self, rank: int) -> None:
        self._mv[self._warr(0, rank)] = 1

    def ready_count(self) -> int:
        base = _HDR
        return sum(1 for r in range(self.n_workers) if self._mv[base + r])

    def set_idle(self, rank: int, idle: bool) -> None:
        self._mv[self._warr(1, rank)] = 1 if idle else 0

    def idle_count(self) -> int:
        base = _HDR + self.n_workers
        return sum(1 for r in range(self.n_workers) if self._mv[base + r])

    def idle_flags(self) -> list[bool]:
        base = _HDR + self.n_workers
        return [bool(self._mv[base + r]) for r in range(self.n_workers)]

    def set_load(self, rank: int, load: int) -> None:
        self._mv[self._warr(2, rank)] = load

    def load_of(self, rank: int) -> int:
        return self._mv[self._warr(2, rank)]

    def loads(self) -> list[int]:
        base = _HDR + 2 * self.n_workers
        return [self._mv[base + r] for r in range(self.n_workers)]

    def team_load(self) -> int:
        return sum(self.loads())

    def set_public_nodes(self, rank: int, n: int) -> None:
        self._mv[self._warr(3, rank)] = n

    def public_nodes_of(self, rank: int) -> int:
        return self._mv[self._warr(3, rank)]

    # -- counters / flags -------------------------------------------------------
    def public_alts(self) -> int:
        return self._mv[_SLOT_PUBLIC_ALTS]

    def _counter_add(self, delta: int) -> None:
        with self._counter_lock:
            self._mv[_SLOT_PUBLIC_ALTS] += delta

    def signal_abort(self) -> None:
        self._mv[_SLOT_ABORT] = 1

    def aborted(self) -> bool:
        return bool(self._mv[_SLOT_ABORT])

    def set_goal_seq(self, seq: int) -> None:
        self._mv[_SLOT_GOAL_SEQ] = seq

    def goal_seq(self) -> int:
        return self._mv[_SLOT_GOAL_SEQ]

    # -- or-frame pool ----------------------------------------------------------
    def _base(self, idx: int) -> int:
        return self._frames_off + idx * _FRAME_SLOTS

    @contextmanager
    def lock(self, idx: int):
        lk = self._stripes[idx % _N_STRIPES]
        lk.acquire()
        try:
            yield
        finally:
            lk.release()

    def alloc(self, n_alts: int, cursor: int, split_offset: int, depth: int) -> int:
        """Create a frame for a freshly published node; counts its open load."""
        mv = self._mv
        with self._pool_lock:
            idx = mv[_SLOT_FREE_HEAD]
            if idx >= 0:
                mv[_SLOT_FREE_HEAD] = mv[self._base(idx) + _F_NEXT]
            else:
                idx = mv[_SLOT_HIGH_WATER]
                if idx >= self.n_frames:
                    raise FramePoolExhausted(f"frame pool of {self.n_frames} full")
                mv[_SLOT_HIGH_WATER] = idx + 1
        base = self._base(idx)
        mv[base + _F_NALTS] = n_alts
        mv[base + _F_CURSOR] = cursor
        mv[base + _F_OFFSET] = split_offset
        mv[base + _F_MEMBERS] = 2          # publisher plus the receiving worker
        mv[base + _F_DEPTH] = depth
        self._counter_add(count_open(n_alts, cursor, split_offset))
        return idx

    def read_locked(self, idx: int) -> tuple[int, int, int]:
        """(n_alts, cursor, split_offset); caller holds the frame lock."""
        base = self._base(idx)
        mv = self._mv
        return mv[base + _F_NALTS], mv[base + _F_CURSOR], mv[base + _F_OFFSET]

    def take(self, idx: int) -> int:
        """Hand out the next alternative index, or -1 if the frame is dead."""
        base = self._base(idx)
        mv = self._mv
        with self.lock(idx):
            n = mv[base + _F_NALTS]
            c = mv[base + _F_CURSOR]
            if c >= n:
                return -1
            mv[base + _F_CURSOR] = c + mv[base + _F_OFFSET]
            self._counter_add(-1)
            return c

    def join(self, idx: int) -> None:
        base = self._base(idx)
        with self.lock(idx):
            self._mv[base + _F_MEMBERS] += 1

    def leave(self, idx: int) -> None:
        """Drop membership; the last member of a dead frame recycles it."""
        base = self._base(idx)
        mv = self._mv
        with self.lock(idx):
            mv[base + _F_MEMBERS] -= 1
            recycle = mv[base + _F_MEMBERS] == 0 and mv[base + _F_CURSOR] >= mv[base + _F_NALTS]
            if recycle:
                with self._pool_lock:
                    mv[base + _F_NEXT] = mv[_SLOT_FREE_HEAD]
                    mv[_SLOT_FREE_HEAD] = idx

    def kill_locked(self, idx: int) -> int:
        """Move all remaining alternatives out of the frame (caller holds lock).

        Returns how many were removed; used when a split assigns a public
        node wholesale to the outgoing copy.
        """
        base = self._base(idx)
        mv = self._mv
        n, c, s = mv[base + _F_NALTS], mv[base + _F_CURSOR], mv[base + _F_OFFSET]
        remaining = count_open(n, c, s)
        mv[base + _F_CURSOR] = n
        if remaining:
            self._counter_add(-remaining)
        return remaining

    def hsplit_locked(self, idx: int) -> tuple[int, int]:
        """Double the frame's offset, keeping its cursor (caller holds lock).

        Returns the pre-split (cursor, offset); the outgoing side owns the
        arithmetic sequence starting at cursor+offset with the doubled step.
        """
        base = self._base(idx)
        mv = self._mv
        n, c, s = mv[base + _F_NALTS], mv[base + _F_CURSOR], mv[base + _F_OFFSET]
        mv[base + _F_OFFSET] = 2 * s
        moved = count_open(n, c + s, 2 * s)
        if moved:
            self._counter_add(-moved)
        return c, s

    def frame_state(self, idx: int) -> tuple[int, int, int, int]:
        """(n_alts, cursor, split_offset, members) snapshot for tests/inspection."""
        base = self._base(idx)
        mv = self._mv
        with self.lock(idx):
            return (mv[base + _F_NALTS], mv[base + _F_CURSOR],
                    mv[base + _F_OFFSET], mv[base + _F_MEMBERS])

    def live_frame_count(self) -> int:
        mv = self._mv
        total = 0
        for idx in range(mv[_SLOT_HIGH_WATER]):
            base = self._base(idx)
            if mv[base + _F_MEMBERS] > 0 and mv[base + _F_CURSOR] < mv[base + _F_NALTS]:
                total += 1
        return total

    def close(self) -> None:
        self._mv.release()
        self._mm.close()


def publish_private_nodes(ws, shared: TeamShared) -> int:
    """Make every live private node public and pre-count the receiving member.

    Returns the number of alternatives moved from the private load register
    into frames. Cursor/offset authority moves to the frame; the private
    cursor is frozen where it was.
    """
    moved = 0
    for cp in ws.cps:
        if cp.frame >= 0:
            shared.join(cp.frame)      # receiver will reference this frame too
            continue
        if cp.is_dead():
            continue
        open_here = cp.open_count()
        cp.frame = shared.alloc(cp.n_alts, cp.cursor, cp.split_offset, cp.depth)
        moved += open_here
    if moved:
        ws.set_load(ws.load - moved)
    ws.sync_public_nodes()
    return moved
