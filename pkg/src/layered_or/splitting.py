"""Static work splitting and the packed stack-transfer area.

A sharing worker copies its stack segments into an auxiliary area, applies
one of two strategies between its live stacks and the copy, and ships the
copy to the requesting team:

* vertical: live nodes alternate wholesale between the two sides, walking
  from the root; the side keeping a public node leaves its or-frame alone,
  the side giving one away empties the frame under its lock.
* horizontal: every live node is split internally; both sides double the
  node's split offset and the outgoing side starts one original step later,
  so the two cursors enumerate complementary alternative sets.

The serialized layout is little-endian 8-byte integers with no padding:
header fields in declaration order, store cells, choice points as 7-tuples,
trail entries as (cell index, previous value) pairs.
"""

from __future__ import annotations

import struct

from .engine import WorkerState, count_open
from .errors import ProtocolViolation

HEADER_FIELDS = ("store_lo", "store_hi", "cp_count", "trail_lo", "trail_hi",
                 "load", "goal_id", "root_depth")
_HEADER = struct.Struct("<8q")
CP_RECORD_LEN = 7


class AuxArea:
    """Header plus gap-free packed copies of store/choice-point/trail segments."""

    __slots__ = ("store_lo", "store_hi", "cp_count", "trail_lo", "trail_hi",
                 "load", "goal_id", "root_depth",
                 "store_cells", "cp_records", "trail_entries")

    def __init__(self, store_lo, store_hi, trail_lo, trail_hi, load, goal_id,
                 root_depth, store_cells, cp_records, trail_entries):
        self.store_lo = store_lo
        self.store_hi = store_hi
        self.cp_count = len(cp_records)
        self.trail_lo = trail_lo
        self.trail_hi = trail_hi
        self.load = load
        self.goal_id = goal_id
        self.root_depth = root_depth
        self.store_cells = store_cells
        self.cp_records = cp_records
        self.trail_entries = trail_entries

    def recount_load(self) -> int:
        self.load = sum(count_open(r[1], r[2], r[3]) for r in self.cp_records)
        return self.load

    def __eq__(self, other):
        if not isinstance(other, AuxArea):
            return NotImplemented
        return all(getattr(self, f) == getattr(other, f) for f in HEADER_FIELDS) and \
            self.store_cells == other.store_cells and \
            [tuple(r) for r in self.cp_records] == [tuple(r) for r in other.cp_records] and \
            self.trail_entries == other.trail_entries


def _segment_bounds(ws: WorkerState) -> tuple[int, int]:
    """Store/trail lower bounds delimited by the root choice point.

    Trailed writes may touch cells older than the root's store mark; those
    cells are folded into the store segment so the receiving team (which
    starts from the goal's initial store) sees their current values.
    """
    root = ws.cps[0]
    store_lo = root.store_mark
    trail_lo = root.trail_mark
    cells = ws.trail_cells
    for i in range(trail_lo, len(cells)):
        if cells[i] < store_lo:
            store_lo = cells[i]
    return store_lo, trail_lo


def snapshot_segments(ws: WorkerState):
    """Copy the worker's live segments, keeping frame ids (intra-team transfer)."""
    store_lo, trail_lo = _segment_bounds(ws)
    return {
        "store_lo": store_lo,
        "store_cells": list(ws.store[store_lo:]),
        "cp_records": [cp.record() for cp in ws.cps],
        "frames": [cp.frame for cp in ws.cps],
        "trail_lo": trail_lo,
        "trail_entries": list(zip(ws.trail_cells[trail_lo:], ws.trail_prevs[trail_lo:])),
        "load": ws.load,
    }


def snapshot_to_aux(ws: WorkerState, goal_id: int = 0) -> AuxArea:
    """Copy segments into a fresh aux area with every node parked dead.

    A split pass assigns alternatives to the copy afterwards; until then the
    aux side owns nothing. The sharer's stacks are untouched.
    """
    store_lo, trail_lo = _segment_bounds(ws)
    records = []
    for cp in ws.cps:
        records.append([cp.node_tag, cp.n_alts, cp.n_alts, cp.split_offset,
                        cp.store_mark, cp.trail_mark, cp.depth])
    return AuxArea(
        store_lo=store_lo,
        store_hi=len(ws.store),
        trail_lo=trail_lo,
        trail_hi=len(ws.trail_cells),
        load=0,
        goal_id=goal_id,
        root_depth=ws.cps[0].depth,
        store_cells=list(ws.store[store_lo:]),
        cp_records=records,
        trail_entries=list(zip(ws.trail_cells[trail_lo:], ws.trail_prevs[trail_lo:])),
    )


def _recount_private(ws: WorkerState) -> None:
    ws.set_load(sum(cp.open_count() for cp in ws.cps if cp.frame < 0))


def vertical_split(ws: WorkerState, aux: AuxArea) -> None:
    """Alternate live nodes between the sharer and the aux copy, root first.

    Even positions (counting only nodes live at visit time) stay with the
    sharer; odd positions move wholesale to the copy. Public nodes given
    away are emptied through their or-frame under its lock; the copy itself
    never references a frame.
    """
    frames = ws.frames
    pos = 0
    for cp, rec in zip(ws.cps, aux.cp_records):
        if cp.frame >= 0:
            with frames.lock(cp.frame):
                n, c, s = frames.read_locked(cp.frame)
                if c >= n:
                    continue                      # died under a teammate; skip
                give = pos & 1
                pos += 1
                if give:
                    rec[2] = c
                    rec[3] = s
                    frames.kill_locked(cp.frame)
        else:
            if cp.is_dead():
                continue
            give = pos & 1
            pos += 1
            if give:
                rec[2] = cp.cursor
                rec[3] = cp.split_offset
                cp.cursor = cp.n_alts
    _recount_private(ws)
    aux.recount_load()


def horizontal_split(ws: WorkerState, aux: AuxArea) -> None:
    """Split the open alternatives inside every live node between both sides.

    Each side's offset doubles; the sharer keeps its cursor, the copy starts
    one pre-split step later. Applied to the or-frame (under lock) for public
    nodes and to the serialized record for the copy's side.
    """
    frames = ws.frames
    for cp, rec in zip(ws.cps, aux.cp_records):
        if cp.frame >= 0:
            with frames.lock(cp.frame):
                n, c, s = frames.read_locked(cp.frame)
                if c >= n:
                    continue
                frames.hsplit_locked(cp.frame)
                rec[2] = c + s
                rec[3] = 2 * s
        else:
            if cp.is_dead():
                continue
            c, s = cp.cursor, cp.split_offset
            cp.split_offset = 2 * s
            rec[2] = c + s
            rec[3] = 2 * s
    _recount_private(ws)
    aux.recount_load()


def can_yield_work(ws: WorkerState, strategy: str) -> bool:
    """Whether a split could move at least one alternative to the copy.

    Checked before mutating anything: a refused horizontal attempt would
    otherwise still have doubled every offset, and an idle team retrying
    every millisecond would double them without bound. Frame states may
    move between this check and the split; the post-split zero-load guard
    stays as the backstop for that race.
    """
    live = 0
    for cp in ws.cps:
        if cp.frame >= 0:
            with ws.frames.lock(cp.frame):
                n, c, s = ws.frames.read_locked(cp.frame)
        else:
            n, c, s = cp.n_alts, cp.cursor, cp.split_offset
        k = count_open(n, c, s)
        if k == 0:
            continue
        live += 1
        if strategy == "hs" and k >= 2:
            return True
        if strategy == "vs" and live >= 2:
            return True
    return False


def split_for_transfer(ws: WorkerState, goal_id: int, strategy: str) -> AuxArea:
    """Snapshot and split in one step; the caller refuses zero-load results."""
    if strategy not in ("vs", "hs"):
        raise ValueError(f"unknown splitting strategy {strategy!r}")
    if not can_yield_work(ws, strategy):
        return AuxArea(0, 0, 0, 0, 0, goal_id, 0, [], [], [])
    aux = snapshot_to_aux(ws, goal_id)
    if strategy == "vs":
        vertical_split(ws, aux)
    else:
        horizontal_split(ws, aux)
    return aux


# -- wire form ----------------------------------------------------------------

def serialize_aux(aux: AuxArea) -> bytes:
    """Pack header and segments back to back with no padding."""
    n_cells = len(aux.store_cells)
    n_trail = len(aux.trail_entries)
    if aux.store_hi - aux.store_lo != n_cells:
        raise ProtocolViolation("store segment bounds disagree with cell count")
    if aux.trail_hi - aux.trail_lo != n_trail:
        raise ProtocolViolation("trail segment bounds disagree with entry count")
    out = [_HEADER.pack(aux.store_lo, aux.store_hi, aux.cp_count, aux.trail_lo,
                        aux.trail_hi, aux.load, aux.goal_id, aux.root_depth)]
    out.append(struct.pack(f"<{n_cells}q", *aux.store_cells))
    flat = [v for rec in aux.cp_records for v in rec]
    out.append(struct.pack(f"<{len(flat)}q", *flat))
    flat_trail = [v for entry in aux.trail_entries for v in entry]
    out.append(struct.pack(f"<{len(flat_trail)}q", *flat_trail))
    return b"".join(out)


def deserialize_aux(data: bytes) -> AuxArea:
    """Inverse of ``serialize_aux``; validates the advertised segment sizes."""
    if len(data) < _HEADER.size:
        raise ProtocolViolation("aux payload shorter than its header")
    (store_lo, store_hi, cp_count, trail_lo, trail_hi,
     load, goal_id, root_depth) = _HEADER.unpack_from(data, 0)
    n_cells = store_hi - store_lo
    n_trail = trail_hi - trail_lo
    if n_cells < 0 or n_trail < 0 or cp_count < 0:
        raise ProtocolViolation("negative segment size in aux header")
    expect = _HEADER.size + 8 * (n_cells + cp_count * CP_RECORD_LEN + 2 * n_trail)
    if len(data) != expect:
        raise ProtocolViolation(
            f"aux payload is {len(data)} bytes, header implies {expect}")
    off = _HEADER.size
    cells = list(struct.unpack_from(f"<{n_cells}q", data, off))
    off += 8 * n_cells
    records = []
    for _ in range(cp_count):
        records.append(list(struct.unpack_from(f"<{CP_RECORD_LEN}q", data, off)))
        off += 8 * CP_RECORD_LEN
    entries = []
    for _ in range(n_trail):
        a, b = struct.unpack_from("<2q", data, off)
        entries.append((a, b))
        off += 16
    return AuxArea(store_lo, store_hi, trail_lo, trail_hi, load, goal_id,
                   root_depth, cells, records, entries)


def install_aux(ws: WorkerState, aux: AuxArea) -> None:
    """Unpack an aux area into this worker's stacks; every node arrives private."""
    from .engine import install_segments

    if aux.load <= 0:
        raise ProtocolViolation("refusing to install a zero-load payload")
    install_segments(ws, aux.store_lo, aux.store_cells,
                     [tuple(r) for r in aux.cp_records],
                     aux.trail_lo, aux.trail_entries)
    if ws.load != aux.load:
        raise ProtocolViolation(
            f"installed load {ws.load} disagrees with header load {aux.load}")
