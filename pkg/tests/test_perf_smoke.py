"""Evidence that workers really run in parallel, scaled to what the machine
can actually deliver (CI containers often cap aggregate CPU below the
advertised core count)."""

import multiprocessing
import time

import pytest

from layered_or import api


def _saturation(k: int) -> float:
    """Aggregate throughput of k spinning processes relative to one."""
    ctx = multiprocessing.get_context("fork")

    def burn(q):
        t0 = time.perf_counter()
        n = 0
        while time.perf_counter() - t0 < 0.4:
            for _ in range(10000):
                n += 1
        q.put(n)

    def run(procs):
        q = ctx.SimpleQueue()
        ps = [ctx.Process(target=burn, args=(q,)) for _ in range(procs)]
        for p in ps:
            p.start()
        total = sum(q.get() for _ in ps)
        for p in ps:
            p.join()
        return total

    return run(k) / run(1)


def _engine_time(counts, goal, runs=3):
    handle = api.par_create_parallel_engine(
        "smoke-" + "".join(map(str, counts)), [("local", w, "b") for w in counts])
    times = []
    for i in range(runs + 1):
        t0 = time.perf_counter()
        api.par_run_goal(handle, goal)
        while api.par_get_answers(handle, ("exact", 512)) is not None:
            pass
        if i:                      # first run warms the workers up
            times.append(time.perf_counter() - t0)
    api.par_free_parallel_engine(handle)
    return min(times)


def test_two_workers_track_the_machine_parallel_capacity():
    before = _saturation(2)
    if before < 1.15:
        pytest.skip(f"machine runs 2 processes at {before:.2f}x one; "
                    f"no parallelism to demonstrate")
    t1 = _engine_time([1], "queens(10)")
    t2 = _engine_time([2], "queens(10)")
    # shared hosts drift; judge against the weaker of two capacity readings
    capacity = min(before, _saturation(2))
    speedup = t1 / t2
    floor = 0.5 * capacity
    print(f"capacity(2 procs)={capacity:.2f}x, engine [2]={speedup:.2f}x, "
          f"floor={floor:.2f}x")
    assert speedup >= floor, \
        f"2 workers reached {speedup:.2f}x but the machine sustains {capacity:.2f}x"
