"""Pull-based engine: laziness, scheduling, concurrency bounds, diagnostics.

Oracles: brute-force dependency enumeration for laziness, wall-clock ratios
for concurrency, and bitwise result comparison across configurations.
"""

import os
import threading
import time

import numpy as np
import pytest

from chunkcast import ops
from chunkcast.engine import (
    BarrierRequest,
    ChunkRequest,
    Engine,
    EngineConfig,
    EngineError,
    GraphDisciplineError,
    InternalEvent,
    MemoryBudgetExhausted,
    WorkerJob,
    CLASS_COMPUTE,
    CLASS_TRANSFER,
)
from chunkcast.graph import OperatorNode
from chunkcast.model import TensorMetaData, F32, chunk_id
from chunkcast.store import DISK, RAM, ChunkState, Location, StoreConfig

from conftest import make_engine


# -- oracles -----------------------------------------------------------------

def conv_dependency_footprint(md, pos, radius):
    """Brute-force set of input chunks a radius-r stencil chunk touches."""
    begin, end = md.chunk_logical_region(pos)
    grid = md.chunk_grid_dims()
    lo = [max(0, (b - r) // c) for b, r, c in zip(begin, radius, md.chunk_size)]
    hi = [min(g - 1, (e - 1 + r) // c) for e, r, c, g in zip(end, radius, md.chunk_size, grid)]
    out = set()
    for h in np.ndindex(*[h - l + 1 for l, h in zip(lo, hi)]):
        out.add(tuple(l + x for l, x in zip(lo, h)))
    return out


# -- laziness ------------------------------------------------------------------

def test_pointwise_chain_reads_only_needed_source_chunks(rng):
    data = rng.random((40, 40), dtype=np.float32)
    src = ops.source_from_array(data, (4, 4))  # 10x10 chunk grid
    chain = (src + 1.0) * 2.0 - 3.0
    with make_engine() as eng:
        out = eng.resolve_one(chain, (3, 7))
        assert eng.stats.computed(src) == 1
        assert eng.stats.requested_positions(chain, src) == {(3, 7)}
    np.testing.assert_array_equal(out, (data[12:16, 28:32] + 1) * 2 - 3)


def test_conv_requests_exactly_the_dilated_footprint(rng):
    data = rng.random((16, 16, 16), dtype=np.float32)
    src = ops.source_from_array(data, (4, 4, 4))  # 4^3 grid
    conv = ops.separable_conv(src, [(0.25, 0.5, 0.25)] * 3)
    with make_engine() as eng:
        eng.resolve_one(conv, (1, 1, 1))
        want = conv_dependency_footprint(src.md, (1, 1, 1), (1, 1, 1))
        assert len(want) == 27
        assert eng.stats.requested_positions(conv, src) == want
        assert eng.stats.computed(src) == 27


def test_corner_chunk_footprint_is_clipped(rng):
    data = rng.random((16, 16), dtype=np.float32)
    src = ops.source_from_array(data, (4, 4))
    conv = ops.separable_conv(src, [(0.25, 0.5, 0.25)] * 2)
    with make_engine() as eng:
        eng.resolve_one(conv, (0, 0))
        assert eng.stats.requested_positions(conv, src) == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_second_resolve_is_pure_cache_hit(rng):
    data = rng.random((8, 8), dtype=np.float32)
    src = ops.source_from_array(data, (4, 4))
    with make_engine() as eng:
        first = eng.resolve(src)
        spawned = sum(eng.stats.tasks_spawned.values())
        second = eng.resolve(src)
        assert sum(eng.stats.tasks_spawned.values()) == spawned  # zero new tasks
        assert all(np.array_equal(a, b) for a, b in zip(first, second))


# -- determinism ----------------------------------------------------------------

def pipeline(data):
    src = ops.source_from_array(data, (4, 4))
    a = ops.separable_conv(src, [(0.25, 0.5, 0.25)] * 2)
    return ((a - src).abs() * 3.0).cast(F32)


def test_results_identical_across_concurrency_limits(rng):
    data = rng.random((24, 24), dtype=np.float32)
    results = []
    for limit in (1, 4, 16):
        with make_engine(max_active_tasks_per_operator=limit, worker_pool_size=4) as eng:
            results.append(eng.resolve(pipeline(data)))
    for other in results[1:]:
        assert all(np.array_equal(a, b) for a, b in zip(results[0], other))


def test_results_identical_across_batch_sizes(rng):
    data = rng.random((24, 24), dtype=np.float32)
    results = []
    for batch in (1, 3, 32):
        with make_engine(max_requests_per_task=batch) as eng:
            results.append(eng.resolve(pipeline(data)))
    for other in results[1:]:
        assert all(np.array_equal(a, b) for a, b in zip(results[0], other))


# -- concurrency ------------------------------------------------------------------

class ConcurrencyProbe:
    def __init__(self, dwell):
        self.dwell = dwell
        self.lock = threading.Lock()
        self.active = 0
        self.peak = 0

    def __call__(self, coords):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(self.dwell)
        with self.lock:
            self.active -= 1
        return 1.0


def probe_source(probe, n=8):
    return ops.source_procedural(probe, "probe", (n,), (1,), params={"dwell": probe.dwell})


def test_max_active_tasks_bounds_concurrency():
    probe = ConcurrencyProbe(0.05)
    with make_engine(worker_pool_size=8, max_requests_per_task=1,
                     max_active_tasks_per_operator=4) as eng:
        eng.resolve(probe_source(probe))
    assert probe.peak <= 4
    assert probe.peak >= 2  # sleeps actually overlapped


def test_worker_pool_overlaps_sleeping_jobs():
    probe = ConcurrencyProbe(0.05)
    with make_engine(worker_pool_size=8, max_requests_per_task=1,
                     max_active_tasks_per_operator=8) as eng:
        t0 = time.monotonic()
        eng.resolve(probe_source(probe))
        wall = time.monotonic() - t0
    assert wall < 8 * 0.05 * 0.75  # sequential execution would take 0.4s


@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs >=4 hardware threads")
def test_compute_bound_speedup_on_worker_pool(rng):
    data = rng.random((512, 512), dtype=np.float32)

    def run(workers):
        src = ops.source_from_array(data, (64, 64))
        conv = ops.separable_conv(src, [tuple(np.full(9, 1 / 9))] * 2)
        with make_engine(worker_pool_size=workers, max_active_tasks_per_operator=workers) as eng:
            t0 = time.monotonic()
            eng.resolve(conv)
            return time.monotonic() - t0

    slow, fast = run(1), run(8)
    assert slow / fast >= 4


def test_manager_remains_responsive_during_blocking_job(rng):
    data = rng.random((4, 4), dtype=np.float32)
    src = ops.source_from_array(data, (4, 4))
    finished = {}

    def slow_body(ctx):
        yield WorkerJob(time.sleep, 0.4)
        finished["slow"] = time.monotonic()

    def fast_body(ctx):
        req = ChunkRequest(src, [(0, 0)])
        (handle,) = yield req
        finished["fast"] = time.monotonic()
        handle.release()

    with make_engine(worker_pool_size=4) as eng:
        iters0 = eng.stats.manager_iterations
        eng.run_tasks([(None, slow_body), (src, fast_body)])
        assert eng.stats.manager_iterations > iters0 + 1
    assert finished["fast"] < finished["slow"] - 0.2


# -- failures and discipline -------------------------------------------------------

def test_failing_kernel_diagnostic_names_the_node():
    def boom(coords):
        raise ValueError("synthetic kernel failure")

    src = ops.source_procedural(boom, "boom", (4,), (4,))
    with make_engine() as eng:
        with pytest.raises(EngineError, match="boom"):
            eng.resolve(src)


def test_chunk_request_to_non_input_is_rejected():
    a = ops.constant(1.0, (4,), (4,))
    b = ops.constant(2.0, (4,), (4,))

    def undisciplined(ctx):
        yield ChunkRequest(b, [(0,)])

    with make_engine() as eng:
        with pytest.raises(GraphDisciplineError):
            eng.run_task(a, undisciplined)


def test_engine_reentry_from_task_is_rejected():
    a = ops.constant(1.0, (4,), (4,))
    with make_engine() as eng:

        def reenter(ctx):
            eng.resolve(a)
            yield  # pragma: no cover

        with pytest.raises(EngineError, match="re-entered"):
            eng.run_task(a, reenter)


def test_memory_budget_diagnostic_instead_of_hang(rng):
    data = rng.random((64, 64), dtype=np.float32)
    src = ops.source_from_array(data, (64, 64))
    with make_engine(ram=128) as eng:
        with pytest.raises(MemoryBudgetExhausted):
            eng.resolve(src + 1.0)


# -- memory pressure ------------------------------------------------------------------

def test_deep_chain_completes_in_two_working_sets(rng):
    data = rng.random((32, 32), dtype=np.float32)
    node = ops.source_from_array(data, (8, 8))
    for _ in range(10):
        node = ops.separable_conv(node, [(0.25, 0.5, 0.25)] * 2)
    budget = 2 * 16 * node.md.chunk_payload_bytes()
    with make_engine(ram=budget) as eng:
        out = eng.resolve(node)
        assert len(out) == 16
        assert eng.stats.peak_bytes["ram"] <= budget
        assert eng.stats.reclamations > 0


def test_eviction_and_recompute_under_pressure(rng):
    data = rng.random((16, 16), dtype=np.float32)
    src = ops.source_from_array(data, (4, 4))
    with make_engine(ram=40 * src.md.chunk_payload_bytes()) as eng:
        a = eng.resolve(src)
        b = eng.resolve((src + 1.0) * 2.0)
    for got, ref, part in zip(b, a, src.md.chunk_positions()):
        np.testing.assert_array_equal(got, (ref + 1) * 2)


# -- priority classes -----------------------------------------------------------------

def test_transfers_scheduled_before_computes(tmp_path, rng):
    data = rng.random((32, 32), dtype=np.float32)
    stores = StoreConfig(ram_capacity=1 << 24, disk_capacity=1 << 24,
                         disk_path=str(tmp_path / "t.plcs"))
    src = ops.source_from_array(data, (4, 4))
    out = (src * 2.0) + 1.0
    with Engine(EngineConfig(stores=stores, trace_schedule=True)) as eng:
        eng.resolve(src, location=DISK)  # park every source chunk on disk only
        got = eng.resolve(out)  # forces disk->ram transfers plus computes
        trace = eng.stats.schedule_trace
    assert any(cls == CLASS_TRANSFER for _, cls, _ in trace)
    for kind, cls, best_other in trace:
        if cls == CLASS_COMPUTE:
            assert best_other <= CLASS_COMPUTE, "compute ran while a transfer was runnable"
    for pos, arr in zip(out.md.chunk_positions(), got):
        begin, end = out.md.chunk_logical_region(pos)
        region = data[begin[0]:end[0], begin[1]:end[1]]
        np.testing.assert_array_equal(arr[: region.shape[0], : region.shape[1]], region * 2 + 1)


def test_resolve_to_disk_and_transfer_back(tmp_path, rng):
    data = rng.random((8, 8), dtype=np.float32)
    stores = StoreConfig(ram_capacity=1 << 20, disk_capacity=1 << 20,
                         disk_path=str(tmp_path / "d.plcs"))
    src = ops.source_from_array(data, (4, 4))
    with Engine(EngineConfig(stores=stores)) as eng:
        on_disk = eng.resolve(src, location=DISK)
        assert eng.stats.disk_bytes_written > 0
        in_ram = eng.resolve(src, location=RAM)
        assert eng.stats.transfers == 4
        assert eng.stats.computed(src) == 4  # computed once, moved once
        assert all(np.array_equal(a, b) for a, b in zip(on_disk, in_ram))


# -- barriers and events ---------------------------------------------------------------

def test_compatible_barriers_coalesce_into_one_action():
    dev = Location.device(0)

    def epoch_opener(ctx):
        yield WorkerJob(time.sleep, 0.1, device=0)

    def waiter(ctx):
        yield BarrierRequest(dev)

    with make_engine(stores=StoreConfig(ram_capacity=1 << 20, device_capacities=(1 << 20,)),
                     worker_pool_size=2) as eng:
        eng.run_tasks([(None, epoch_opener)] + [(None, waiter)] * 3)
        assert eng.stats.barrier_actions == 1


def test_host_barrier_completes_immediately():
    def body(ctx):
        yield BarrierRequest(RAM)

    with make_engine() as eng:
        eng.run_task(None, body)
        assert eng.stats.barrier_actions == 1


def test_internal_event_wakes_waiter():
    log = []

    def waiter(ctx):
        got = yield InternalEvent("go")
        log.append(("woke", got))

    def signaller(ctx):
        yield WorkerJob(time.sleep, 0.05)
        ctx.signal("go")

    with make_engine(worker_pool_size=2) as eng:
        eng.run_tasks([(None, waiter), (None, signaller)])
    assert log == [("woke", "go")]


# -- progressive producers ---------------------------------------------------------------

def counter_node(task_body):
    md = TensorMetaData((2,), (2,), F32)
    return OperatorNode("progressive", {}, (), md, task_body=task_body)


def test_preview_then_final_respawn():
    attempts = []

    def body(ctx):
        attempts.append(ctx.wanted_state)
        state = ChunkState.PREVIEW if len(attempts) == 1 else ChunkState.FINAL
        value = 0.5 if state == ChunkState.PREVIEW else 1.0
        yield from ctx.store_chunk((0,), np.full(2, value, np.float32), state)

    node = counter_node(body)
    with make_engine() as eng:
        out = eng.resolve_one(node, (0,), min_state=ChunkState.FINAL)
    assert len(attempts) == 2  # preview attempt, then respawned final attempt
    np.testing.assert_array_equal(out, [1.0, 1.0])


def test_preview_satisfies_preview_request():
    attempts = []

    def body(ctx):
        attempts.append(1)
        yield from ctx.store_chunk((0,), np.full(2, 0.5, np.float32), ChunkState.PREVIEW)

    node = counter_node(body)
    with make_engine() as eng:
        out = eng.resolve_one(node, (0,), min_state=ChunkState.PREVIEW)
    assert attempts == [1]
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_stalled_refinement_gives_up_with_diagnostic():
    def body(ctx):
        yield from ctx.store_chunk((0,), np.zeros(2, np.float32), ChunkState.PREVIEW)

    node = counter_node(body)
    with make_engine(max_stalled_respawns=3) as eng:
        with pytest.raises(MemoryBudgetExhausted, match="no progress"):
            eng.resolve_one(node, (0,), min_state=ChunkState.FINAL)


def test_preview_inputs_taint_downstream_results():
    def body(ctx):
        yield from ctx.store_chunk((0,), np.ones(2, np.float32), ChunkState.PREVIEW)

    producer = counter_node(body)
    consumer = producer + 1.0
    with make_engine() as eng:
        out = eng.resolve_one(consumer, (0,), min_state=ChunkState.PREVIEW)
        np.testing.assert_array_equal(out, [2.0, 2.0])
        entry = eng.stores.store(RAM).peek(chunk_id(consumer.op_id, (0,)))
        assert entry.state == ChunkState.PREVIEW  # preview input floors the output
