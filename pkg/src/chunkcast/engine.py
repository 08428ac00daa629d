"""Pull-based task engine.

Chunks are produced on demand: a request for chunks of a node spawns a task
(a generator) that may itself request input chunks, worker jobs, memory, or
barriers by yielding Request objects.  A single manager thread owns all
engine state and runs the scheduling loop; compute and IO run on a worker
pool so a blocking job never stalls scheduling.  Tasks are concurrent but
the manager is strictly serial, so task code needs no locks.

Scheduling order is lexicographic (class, progress, depth): allocations and
transfers first, then chunk computation, then barriers and reclamation;
within a class, tasks that are closer to completing their batch win, then
deeper (further-from-root) tasks; the final tie-break is task id, which
makes the schedule deterministic.
"""

from __future__ import annotations

import logging
import os
import threading
from collections import Counter, defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import TensorMetaData, chunk_id
from .store import (
    RAM,
    AllocationTooLarge,
    ChunkState,
    ElsewhereAt,
    Hit,
    Location,
    ReclamationNeeded,
    StoreConfig,
    StoreGroup,
)

log = logging.getLogger(__name__)

# priority classes, higher runs first
CLASS_TRANSFER = 2  # allocation and data movement unblock everything else
CLASS_COMPUTE = 1
CLASS_MAINTENANCE = 0  # barriers, reclamation


class EngineError(RuntimeError):
    pass


class GraphDisciplineError(EngineError):
    """A task requested chunks of a node that is not an input of its own."""


class MemoryBudgetExhausted(EngineError):
    """Progress is impossible within the configured store capacities."""


@dataclass
class EngineConfig:
    stores: StoreConfig = field(default_factory=StoreConfig)
    worker_pool_size: int = field(default_factory=lambda: os.cpu_count() or 1)
    max_requests_per_task: int = 32
    max_active_tasks_per_operator: int = 4
    enable_inplace: bool = True
    trace_schedule: bool = False
    # consecutive respawns of a progressive producer with no progress before
    # giving up; prevents silent infinite refinement loops
    max_stalled_respawns: int = 3


# ---------------------------------------------------------------------------
# requests a task may yield


class Request:
    __slots__ = ("result", "done", "error")

    def __init__(self):
        self.result = None
        self.done = False
        self.error = None

    def fulfill(self, value):
        self.result = value
        self.done = True

    def fail(self, exc):
        self.error = exc
        self.done = True


class ChunkRequest(Request):
    """Ask for chunks of `node` at `positions`, at least `min_state` fresh.

    Fulfilled with a list of PinnedChunk handles aligned with positions.
    """

    __slots__ = ("node", "positions", "location", "min_state")

    def __init__(self, node, positions, location=RAM, min_state=ChunkState.FINAL):
        super().__init__()
        self.node = node
        self.positions = [tuple(p) for p in positions]
        self.location = location
        self.min_state = min_state


class WorkerJob(Request):
    """Run `fn(*args)` on the worker pool; fulfilled with its return value."""

    __slots__ = ("fn", "args", "device", "_epoch")

    def __init__(self, fn, *args, device=None):
        super().__init__()
        self.fn = fn
        self.args = args
        self.device = device  # device index for epoch tracking, or None
        self._epoch = 0


class AllocationRequest(Request):
    __slots__ = ("location", "size")

    def __init__(self, location, size):
        super().__init__()
        self.location = location
        self.size = size


class BarrierRequest(Request):
    """Wait until all device work submitted so far is visible to `visibility`."""

    __slots__ = ("location", "visibility", "target_epoch")

    def __init__(self, location, visibility="read"):
        super().__init__()
        self.location = location
        self.visibility = visibility
        self.target_epoch = None  # stamped at submission


class ReclamationRequest(Request):
    __slots__ = ("location", "size")

    def __init__(self, location, size=0):
        super().__init__()
        self.location = location
        self.size = size


class InternalEvent(Request):
    """Wait for an engine-level token signalled by some other task."""

    __slots__ = ("token",)

    def __init__(self, token):
        super().__init__()
        self.token = token


# ---------------------------------------------------------------------------


class PinnedChunk:
    """Read handle on a resident chunk; keeps it pinned until released."""

    def __init__(self, engine, store, entry, md: TensorMetaData):
        self._engine = engine
        self._store = store
        self.entry = entry
        self._md = md
        self.released = False

    @property
    def state(self) -> ChunkState:
        return self.entry.state

    @property
    def array(self) -> np.ndarray:
        shape = self._md.element_type.payload_shape(self._md.chunk_size)
        view = self.entry.payload.view(self._md.element_type.np_dtype)
        view = view[: int(np.prod(shape))].reshape(shape)
        view.flags.writeable = False
        return view

    def read(self) -> np.ndarray:
        """Copy the payload out, also working for disk entries."""
        if self.entry.payload is not None:
            return np.array(self.array)
        data = self._store.read_payload(self.entry)
        shape = self._md.element_type.payload_shape(self._md.chunk_size)
        return np.frombuffer(data, dtype=self._md.element_type.np_dtype).reshape(shape).copy()

    def release(self):
        if not self.released:
            self.released = True
            self._store.unpin(self.entry)

    def try_inplace(self):
        """Attempt to steal this chunk's storage for a same-size result.

        Returns (writable array, grant) on success, consuming the handle and
        unmapping the chunk id, or None when the store denies the steal.
        """
        grant = self._store.try_replace_inplace(self.entry)
        if grant is None:
            return None
        self.released = True  # pin was consumed by the steal
        shape = self._md.element_type.payload_shape(self._md.chunk_size)
        view = np.asarray(grant).view(self._md.element_type.np_dtype)
        view = view[: int(np.prod(shape))].reshape(shape)
        return view, grant

    def __repr__(self):
        return f"<pinned {self.entry.id.hex()[:10]} {self.entry.state.name}>"


@dataclass
class TaskRecord:
    id: int
    node: object  # OperatorNode, or None for system tasks
    kind: str
    priority_class: int
    depth: int
    batch_size: int
    gen: object = None
    fulfilled: int = 0
    done: bool = False
    failed: BaseException | None = None
    waiting: list = field(default_factory=list)  # outstanding Request objects
    yielded_list: bool = False
    pins: list = field(default_factory=list)
    wanted_state: ChunkState = ChunkState.FINAL
    made_progress: bool = False

    @property
    def progress(self) -> float:
        return self.fulfilled / self.batch_size if self.batch_size else 1.0

    def sort_key(self):
        # used with max(); id negated so the lowest id wins ties
        return (self.priority_class, self.progress, self.depth, -self.id)


class _Pending:
    """Bookkeeping for one chunk wanted at one location."""

    __slots__ = ("cid", "node", "pos", "location", "waiters", "task", "stalled", "seen_state")

    def __init__(self, cid, node, pos, location):
        self.cid = cid
        self.node = node
        self.pos = pos
        self.location = location
        self.waiters = []  # (task, request, slot, min_state)
        self.task = None  # producing TaskRecord currently assigned
        self.stalled = 0
        self.seen_state = -1  # entry state after the last attempt; -1 = absent

    def wanted_state(self) -> ChunkState:
        return max((w[3] for w in self.waiters), default=ChunkState.PREVIEW)


@dataclass
class Stats:
    tasks_spawned: Counter = field(default_factory=Counter)
    chunks_computed: Counter = field(default_factory=Counter)
    store_inserts: Counter = field(default_factory=Counter)
    chunk_requests: dict = field(default_factory=lambda: defaultdict(set))
    manager_iterations: int = 0
    worker_jobs: int = 0
    barrier_actions: int = 0
    reclamations: int = 0
    transfers: int = 0
    disk_bytes_read: int = 0
    disk_bytes_written: int = 0
    peak_bytes: dict = field(default_factory=dict)
    schedule_trace: list = field(default_factory=list)  # only with trace_schedule

    def computed(self, node) -> int:
        return self.chunks_computed[node.op_id.hex()]

    def requested_positions(self, consumer, producer) -> set:
        ckey = consumer.op_id.hex() if consumer is not None else "root"
        return set(self.chunk_requests.get((ckey, producer.op_id.hex()), ()))


class TaskContext:
    """Handed to task bodies; the only sanctioned door into engine state."""

    def __init__(self, engine, task, node, positions, location, wanted_state):
        self._engine = engine
        self._task = task
        self.node = node
        self.positions = positions
        self.location = location
        self.wanted_state = wanted_state
        self._input_floor = ChunkState.FINAL

    @property
    def config(self) -> EngineConfig:
        return self._engine.config

    @property
    def stores(self) -> StoreGroup:
        return self._engine.stores

    def note_input_state(self, state: ChunkState):
        if state < self._input_floor:
            self._input_floor = state

    def effective_state(self, state: ChunkState) -> ChunkState:
        """Downgrade to preview when any consumed input was a preview."""
        return min(state, self._input_floor)

    def mark_progress(self):
        self._task.made_progress = True

    def allocate(self, location: Location, nbytes: int):
        """Yieldable allocation that parks until memory can be reclaimed."""
        alloc = yield AllocationRequest(location, nbytes)
        return alloc

    def store_chunk(self, pos, payload: np.ndarray, state: ChunkState, epoch: int = 0):
        """Insert a computed payload and wake whoever asked for it.

        Generator helper (may yield allocation/worker requests), so call it
        with `yield from`.
        """
        eng = self._engine
        pos = tuple(pos)
        cid = chunk_id(self.node.op_id, pos)
        store = eng.stores.store(self.location)
        data = np.ascontiguousarray(payload)
        nbytes = data.nbytes
        alloc = yield AllocationRequest(self.location, nbytes)
        state = self.effective_state(state)
        if alloc.buffer is not None:
            alloc.buffer[:nbytes] = data.reshape(-1).view(np.uint8)
        else:  # disk extent; write off the manager thread
            blob = data.tobytes()
            yield WorkerJob(store.write_payload, alloc, blob)
            eng.stats.disk_bytes_written += len(blob)
        entry = store.insert(cid, alloc, nbytes, state, epoch=epoch)
        eng.stats.store_inserts[self.node.op_id.hex()] += 1
        eng._publish(self._task, self.node, pos, self.location, entry)
        return entry

    def store_into(self, pos, nbytes: int):
        """Allocate destination storage up front; returns (writable view, done).

        Only valid for buffer-backed locations.  `done(state)` registers the
        chunk once a worker job has written the payload, letting kernels
        write results straight into store memory.
        """
        eng = self._engine
        pos = tuple(pos)
        cid = chunk_id(self.node.op_id, pos)
        store = eng.stores.store(self.location)
        alloc = yield AllocationRequest(self.location, nbytes)
        out = alloc.buffer[:nbytes]

        def done(state: ChunkState, epoch: int = 0):
            entry = store.insert(cid, alloc, nbytes, self.effective_state(state), epoch=epoch)
            eng.stats.store_inserts[self.node.op_id.hex()] += 1
            eng._publish(self._task, self.node, pos, self.location, entry)
            return entry

        return out, done

    def publish_inplace(self, pos, grant, nbytes: int, state: ChunkState):
        """Register a result written over a stolen input allocation."""
        eng = self._engine
        cid = chunk_id(self.node.op_id, tuple(pos))
        store = eng.stores.store(self.location)
        entry = store.insert(cid, grant.src_allocation, nbytes, self.effective_state(state))
        eng.stats.store_inserts[self.node.op_id.hex()] += 1
        eng._publish(self._task, self.node, tuple(pos), self.location, entry)
        return entry

    def signal(self, token):
        self._engine.signal_event(token)


# ---------------------------------------------------------------------------


class Engine:
    """Owns stores, the worker pool, and the scheduling loop."""

    def __init__(self, config: EngineConfig | None = None):
        self.config = config or EngineConfig()
        self.stores = StoreGroup(self.config.stores)
        self.stats = Stats()
        self.pool = ThreadPoolExecutor(
            max_workers=self.config.worker_pool_size, thread_name_prefix="chunkcast-worker"
        )
        self._task_seq = 0
        self._tasks: dict[int, TaskRecord] = {}
        self._runnable: list[TaskRecord] = []
        self._resume_values: dict[int, object] = {}
        self._pending: dict[tuple, _Pending] = {}
        self._active_per_op: Counter = Counter()
        self._admit_queue: dict = defaultdict(deque)  # op id -> deque[_Pending]
        self._jobs_inflight = 0
        self._completions = deque()
        self._completion_cv = threading.Condition()
        self._barriers: list[tuple[BarrierRequest, TaskRecord]] = []
        self._parked_allocs: deque = deque()  # (task, AllocationRequest)
        self._event_waiters: dict = defaultdict(list)
        self._epoch_counter: Counter = Counter()  # per device index
        self._epoch_inflight: Counter = Counter()  # (device, epoch) -> jobs
        self._device_completed: Counter = Counter()
        self._in_manager = False
        self._manager_thread = None
        self.closed = False

    # -- public API ----------------------------------------------------------

    def resolve(self, node, positions=None, location=RAM, min_state=ChunkState.FINAL):
        """Materialize chunks of `node`; returns arrays aligned with positions.

        Arrays are copies owned by the caller.  Callers wanting bounded
        memory over huge position sets should batch (see resolve_iter).
        """
        if positions is None:
            positions = list(node.md.chunk_positions())
        positions = [tuple(p) for p in positions]
        out: dict = {}

        def root_body(ctx):
            req = ChunkRequest(node, positions, location, min_state)
            handles = yield req
            for pos, handle in zip(req.positions, handles):
                out[pos] = handle.read()  # copy out, then drop the pin
                handle.release()

        root = self._spawn(
            None, "resolve", CLASS_COMPUTE, depth=0, batch=len(positions),
            body=root_body, positions=positions, location=location, wanted_state=min_state,
        )
        self._run_until(lambda: root.done)
        if root.failed is not None:
            raise root.failed
        return [out[pos] for pos in positions]

    def resolve_one(self, node, pos, **kw):
        return self.resolve(node, [pos], **kw)[0]

    def resolve_iter(self, node, positions=None, batch=None, **kw):
        """Stream (position, array) pairs resolving `batch` chunks at a time."""
        if positions is None:
            positions = list(node.md.chunk_positions())
        if batch is None:
            batch = max(1, self.config.max_requests_per_task)
        for i in range(0, len(positions), batch):
            part = positions[i : i + batch]
            for pos, arr in zip(part, self.resolve(node, part, **kw)):
                yield tuple(pos), arr

    def run_task(self, node, body, positions=(), location=RAM,
                 wanted_state=ChunkState.FINAL, depth=0):
        """Run one custom task body to completion on the manager loop."""
        return self.run_tasks([(node, body)], positions=positions, location=location,
                              wanted_state=wanted_state, depth=depth)[0]

    def run_tasks(self, specs, positions=(), location=RAM,
                  wanted_state=ChunkState.FINAL, depth=0):
        """Run several custom task bodies concurrently until all are done.

        `specs` is a list of (node, body) pairs; tasks interleave at their
        request points on the manager loop, so they can jointly wait on
        barriers or feed each other through the stores.
        """
        tasks = [
            self._spawn(
                node, "custom", CLASS_COMPUTE, depth=depth,
                batch=max(1, len(positions)), body=body,
                positions=[tuple(p) for p in positions], location=location,
                wanted_state=wanted_state,
            )
            for node, body in specs
        ]
        self._run_until(lambda: all(t.done for t in tasks))
        for t in tasks:
            if t.failed is not None:
                raise t.failed
        return tasks

    def signal_event(self, token):
        for task, req in self._event_waiters.pop(token, []):
            req.fulfill(token)
            self._maybe_runnable(task)

    def close(self):
        if not self.closed:
            self.closed = True
            self.pool.shutdown(wait=True)
            self.stores.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- task lifecycle ------------------------------------------------------

    def _spawn(self, node, kind, priority_class, depth, batch, body,
               positions, location, wanted_state):
        if self.closed:
            raise EngineError("engine is closed")
        self._task_seq += 1
        task = TaskRecord(
            id=self._task_seq, node=node, kind=kind, priority_class=priority_class,
            depth=depth, batch_size=batch, wanted_state=wanted_state,
        )
        ctx = TaskContext(self, task, node, positions, location, wanted_state)
        task.gen = body(ctx)
        self._tasks[task.id] = task
        self._runnable.append(task)
        self._resume_values[task.id] = None
        if node is not None:
            self.stats.tasks_spawned[node.op_id.hex()] += 1
        return task

    def _maybe_runnable(self, task):
        if task.done or task in self._runnable:
            return
        if all(r.done for r in task.waiting):
            reqs = task.waiting
            task.waiting = []
            failed = next((r for r in reqs if r.error is not None), None)
            if failed is not None:
                self._resume_values[task.id] = failed.error
            elif task.yielded_list:
                self._resume_values[task.id] = [r.result for r in reqs]
            else:
                self._resume_values[task.id] = reqs[0].result if reqs else None
            self._runnable.append(task)

    def _finish(self, task, exc=None):
        task.done = True
        task.failed = exc
        for pin in task.pins:
            pin.release()
        task.pins.clear()
        self._tasks.pop(task.id, None)
        self._resume_values.pop(task.id, None)
        if exc is not None:
            self._fail_pendings_of(task, exc)
            affected = set()
        else:
            affected = self._respawn_unfinished(task)
        if task.node is not None and task.kind in ("compute", "custom"):
            self._active_per_op[task.node.op_id] -= 1
            affected.add(task.node)
        for node in affected:
            self._admit_for(node)

    def _fail_pendings_of(self, task, exc):
        for key, pending in list(self._pending.items()):
            if pending.task is task:
                for wtask, req, slot, _ in pending.waiters:
                    req.fail(exc)
                    self._maybe_runnable(wtask)
                del self._pending[key]

    def _respawn_unfinished(self, task):
        """Re-queue chunks this task was assigned but left below the wanted
        state (progressive producers); gives up after repeated attempts that
        do not raise the chunk's state, so refinement loops cannot hang."""
        affected = set()
        for key, pending in list(self._pending.items()):
            if pending.task is not task:
                continue
            entry = self.stores.store(pending.location).peek(pending.cid)
            now = int(entry.state) if entry is not None and entry.state != ChunkState.IN_FLIGHT else -1
            advanced = now > pending.seen_state
            pending.seen_state = now
            if advanced:
                pending.stalled = 0
            else:
                pending.stalled += 1
                if pending.stalled >= self.config.max_stalled_respawns:
                    exc = MemoryBudgetExhausted(
                        f"memory budget exhausted: refinement of '{pending.node.name}' "
                        f"chunk {pending.pos} made no progress after {pending.stalled} attempts"
                    )
                    for wtask, req, slot, _ in pending.waiters:
                        req.fail(exc)
                        self._maybe_runnable(wtask)
                    del self._pending[key]
                    continue
            pending.task = None
            self._admit_queue[pending.node.op_id].append(pending)
            affected.add(pending.node)
        return affected

    # -- scheduling loop -------------------------------------------------------

    def _run_until(self, done_fn):
        if self._in_manager:
            raise EngineError("engine loop re-entered from a task; yield a request instead")
        if self._manager_thread not in (None, threading.current_thread()):
            raise EngineError("engine driven from two threads at once")
        self._manager_thread = threading.current_thread()
        self._in_manager = True
        try:
            while not done_fn():
                self.stats.manager_iterations += 1
                self._drain_completions()
                self._check_barriers()
                self._retry_parked_allocations()
                task = self._schedule_next()
                if task is not None:
                    self._step(task)
                    continue
                if done_fn():
                    break
                if self._jobs_inflight > 0:
                    with self._completion_cv:
                        if not self._completions and self._jobs_inflight > 0:
                            self._completion_cv.wait(timeout=5.0)
                    continue
                self._diagnose_stall()
        finally:
            self._in_manager = False
            self._manager_thread = None

    def _schedule_next(self):
        if not self._runnable:
            return None
        best = max(self._runnable, key=TaskRecord.sort_key)
        self._runnable.remove(best)
        if self.config.trace_schedule:
            others = [t.priority_class for t in self._runnable]
            self.stats.schedule_trace.append(
                (best.kind, best.priority_class, max(others, default=best.priority_class))
            )
        return best

    def _step(self, task):
        value = self._resume_values.pop(task.id, None)
        try:
            if isinstance(value, BaseException):
                yielded = task.gen.throw(value)
            else:
                yielded = task.gen.send(value)
        except StopIteration:
            self._finish(task)
            return
        except EngineError as exc:
            self._finish(task, exc)
            return
        except BaseException as exc:  # noqa: BLE001 - operator failure is data
            name = task.node.name if task.node is not None else task.kind
            if isinstance(exc, AllocationTooLarge):
                err = MemoryBudgetExhausted(f"operator '{name}': {exc}")
            else:
                err = EngineError(f"operator '{name}' failed: {exc!r}")
            err.__cause__ = exc
            self._finish(task, err)
            return
        reqs = list(yielded) if isinstance(yielded, (list, tuple)) else [yielded]
        task.yielded_list = isinstance(yielded, (list, tuple))
        task.waiting = reqs
        for req in reqs:
            try:
                self._submit_request(task, req)
            except EngineError as exc:
                req.fail(exc)
        self._maybe_runnable(task)

    def _diagnose_stall(self):
        if self._parked_allocs:
            locs = ", ".join(sorted({str(r.location) for _, r in self._parked_allocs}))
            raise MemoryBudgetExhausted(
                f"memory budget exhausted: {len(self._parked_allocs)} allocation(s) at "
                f"{locs} cannot be satisfied even after reclamation; raise store "
                "capacity or reduce concurrency"
            )
        waiting = [t for t in self._tasks.values() if not t.done and t.waiting]
        if waiting:
            names = sorted({t.node.name if t.node else t.kind for t in waiting})
            raise EngineError(
                f"engine stalled with {len(waiting)} waiting task(s) and no runnable "
                "work: " + ", ".join(names)
            )
        raise EngineError("engine stalled: nothing runnable, nothing in flight")

    # -- request handling ------------------------------------------------------

    def _submit_request(self, task, req):
        if isinstance(req, ChunkRequest):
            self._submit_chunk_request(task, req)
        elif isinstance(req, WorkerJob):
            self._submit_job(task, req)
        elif isinstance(req, AllocationRequest):
            self._submit_allocation(task, req)
        elif isinstance(req, BarrierRequest):
            self._submit_barrier(task, req)
        elif isinstance(req, ReclamationRequest):
            self._run_reclamation(req.location)
            req.fulfill(None)
        elif isinstance(req, InternalEvent):
            self._event_waiters[req.token].append((task, req))
        else:
            req.fail(EngineError(f"unknown request type {type(req).__name__}"))

    def _submit_chunk_request(self, task, req):
        node = req.node
        if task.node is not None and node is not task.node and node not in task.node.inputs:
            raise GraphDisciplineError(
                f"task for '{task.node.name}' requested chunks of non-input '{node.name}'"
            )
        consumer = task.node
        ckey = consumer.op_id.hex() if consumer is not None else "root"
        location = node.location_override or req.location
        req.location = location
        store = self.stores.store(location)
        md = node.md
        results: list = [None] * len(req.positions)
        missing = 0
        for slot, pos in enumerate(req.positions):
            self.stats.chunk_requests[(ckey, node.op_id.hex())].add(pos)
            cid = chunk_id(node.op_id, pos)
            found = self.stores.lookup(cid, location, req.min_state)
            if isinstance(found, Hit):
                handle = PinnedChunk(self, store, found.entry, md)
                task.pins.append(handle)
                results[slot] = handle
                continue
            missing += 1
            key = (cid, location)
            pending = self._pending.get(key)
            if pending is None:
                pending = _Pending(cid, node, pos, location)
                self._pending[key] = pending
                if isinstance(found, ElsewhereAt):
                    self._spawn_transfer(pending, found)
                else:
                    self._enqueue_compute(pending)
            pending.waiters.append((task, req, slot, req.min_state))
        if missing == 0:
            req.fulfill(results)
        else:
            # partial results stay parked on the request until the rest land
            req.result = results

    def _publish(self, task, node, pos, location, entry, computed=True):
        """A task produced `entry` for (node, pos); wake matching waiters."""
        task.fulfilled += 1
        task.made_progress = True
        if computed:
            self.stats.chunks_computed[node.op_id.hex()] += 1
        store = self.stores.store(location)
        self.stats.peak_bytes[str(location)] = max(
            self.stats.peak_bytes.get(str(location), 0), store.occupancy()
        )
        key = (entry.id, location)
        pending = self._pending.get(key)
        if pending is None:
            return
        still_waiting = []
        for wtask, req, slot, min_state in pending.waiters:
            hit = store.lookup(entry.id, min_state) if entry.state >= min_state else None
            if hit is None:
                still_waiting.append((wtask, req, slot, min_state))
                continue
            handle = PinnedChunk(self, store, hit.entry, node.md)
            wtask.pins.append(handle)
            req.result[slot] = handle
            if all(r is not None for r in req.result):
                req.fulfill(req.result)
                self._maybe_runnable(wtask)
        pending.waiters = still_waiting
        if not pending.waiters:
            del self._pending[key]
        # else: waiters want a stronger state; once the producing task ends,
        # _respawn_unfinished queues another attempt

    def _enqueue_compute(self, pending):
        self._admit_queue[pending.node.op_id].append(pending)
        self._admit_for(pending.node)

    def _admit_for(self, node):
        queue = self._admit_queue.get(node.op_id)
        while queue and self._active_per_op[node.op_id] < self.config.max_active_tasks_per_operator:
            batch: list[_Pending] = []
            while queue and len(batch) < self.config.max_requests_per_task:
                cand = queue.popleft()
                # skip entries that were satisfied or reassigned meanwhile
                if cand.task is None and self._pending.get((cand.cid, cand.location)) is cand:
                    batch.append(cand)
            if not batch:
                break
            self._spawn_compute(node, batch)

    def _spawn_compute(self, node, batch):
        positions = [p.pos for p in batch]
        location = batch[0].location
        wanted = max((p.wanted_state() for p in batch), default=ChunkState.FINAL)
        body = node.task_body if node.task_body is not None else _generic_compute_body
        kind = "custom" if node.task_body is not None else "compute"
        task = self._spawn(
            node, kind, CLASS_COMPUTE, depth=_node_depth(node), batch=len(batch),
            body=body, positions=positions, location=location, wanted_state=wanted,
        )
        self._active_per_op[node.op_id] += 1
        for pending in batch:
            pending.task = task
        return task

    def _spawn_transfer(self, pending, found: ElsewhereAt):
        node, cid, dst = pending.node, pending.cid, pending.location
        src_store = self.stores.store(found.location)
        engine = self

        def transfer_body(ctx):
            hit = src_store.lookup(cid, ChunkState.PREVIEW)
            if hit is None:  # source evicted before we ran; fall back to compute
                pending.task = None
                engine._enqueue_compute(pending)
                return
            entry = hit.entry
            try:
                if src_store.location.kind == "disk":
                    data = yield WorkerJob(src_store.read_payload, entry)
                    engine.stats.disk_bytes_read += len(data)
                    payload = np.frombuffer(data, dtype=np.uint8)
                else:
                    payload = entry.payload
                dst_store = engine.stores.store(dst)
                alloc = yield AllocationRequest(dst, entry.size_bytes)
                if alloc.buffer is None:  # disk destination
                    blob = payload[: entry.size_bytes].tobytes()
                    yield WorkerJob(dst_store.write_payload, alloc, blob)
                    engine.stats.disk_bytes_written += len(blob)
                else:
                    alloc.buffer[: entry.size_bytes] = payload[: entry.size_bytes]
                new_entry = dst_store.insert(cid, alloc, entry.size_bytes, entry.state)
                engine.stats.transfers += 1
                engine._publish(ctx._task, node, pending.pos, dst, new_entry, computed=False)
            finally:
                src_store.unpin(entry)

        task = self._spawn(
            None, "transfer", CLASS_TRANSFER, depth=_node_depth(node), batch=1,
            body=transfer_body, positions=[pending.pos], location=dst,
            wanted_state=pending.wanted_state(),
        )
        pending.task = task

    def _submit_job(self, task, req: WorkerJob):
        self._jobs_inflight += 1
        self.stats.worker_jobs += 1
        if req.device is not None:
            self._epoch_counter[req.device] += 1
            req._epoch = self._epoch_counter[req.device]
            self._epoch_inflight[(req.device, req._epoch)] += 1

        def run():
            try:
                outcome = (task, req, req.fn(*req.args), None)
            except BaseException as exc:  # noqa: BLE001
                outcome = (task, req, None, exc)
            with self._completion_cv:
                self._completions.append(outcome)
                self._completion_cv.notify_all()

        self.pool.submit(run)

    def _drain_completions(self):
        while True:
            with self._completion_cv:
                if not self._completions:
                    return
                task, req, value, exc = self._completions.popleft()
            self._jobs_inflight -= 1
            if req.device is not None:
                self._epoch_inflight[(req.device, req._epoch)] -= 1
                self._advance_completed(req.device)
            if exc is not None:
                req.fail(exc)
            else:
                req.fulfill(value)
            self._maybe_runnable(task)

    def _advance_completed(self, device: int):
        done = self._device_completed[device]
        while done < self._epoch_counter[device] and self._epoch_inflight[(device, done + 1)] == 0:
            done += 1
            self._epoch_inflight.pop((device, done), None)
        self._device_completed[device] = done
        store = self.stores.stores.get(Location.device(device))
        if store is not None:
            store.completed_epoch = done

    def device_completed_epoch(self, device: int) -> int:
        """Highest epoch with no jobs of it or any earlier epoch in flight."""
        return self._device_completed[device]

    def next_device_epoch(self, device: int) -> int:
        return self._epoch_counter[device] + 1

    def _submit_allocation(self, task, req: AllocationRequest):
        store = self.stores.store(req.location)
        try:
            req.fulfill(store.allocate(req.size))
        except AllocationTooLarge as exc:
            req.fail(exc)
        except ReclamationNeeded:
            self._parked_allocs.append((task, req))
            self._run_reclamation(req.location)

    def _retry_parked_allocations(self):
        if not self._parked_allocs:
            return
        remaining = deque()
        fulfilled_any = False
        while self._parked_allocs:
            task, req = self._parked_allocs.popleft()
            store = self.stores.store(req.location)
            try:
                req.fulfill(store.allocate(req.size))
                self._maybe_runnable(task)
                fulfilled_any = True
            except ReclamationNeeded:
                remaining.append((task, req))
        self._parked_allocs = remaining
        if remaining and not fulfilled_any:
            self._run_reclamation(remaining[0][1].location)

    def _run_reclamation(self, location) -> int:
        """Low-priority maintenance: evict cached chunks to make room."""
        store = self.stores.store(location)
        self.stats.reclamations += 1
        completed = None
        if location.kind == "device":
            completed = self.device_completed_epoch(location.index)
        freed = store.garbage_collect(completed_epoch=completed)
        if freed <= 0:
            freed += store.flush_buckets()
        return freed

    def _submit_barrier(self, task, req: BarrierRequest):
        if req.location.kind != "device":
            # host memory is coherent; the barrier is complete by definition
            self.stats.barrier_actions += 1
            req.fulfill(None)
            return
        req.target_epoch = self._epoch_counter[req.location.index]
        if self.device_completed_epoch(req.location.index) >= req.target_epoch:
            self.stats.barrier_actions += 1
            req.fulfill(None)
            return
        self._barriers.append((req, task))

    def _check_barriers(self):
        if not self._barriers:
            return
        # one action per (device, visibility) group fulfills every member
        # whose target epoch has completed: compatible waits coalesce
        done_groups = set()
        still = []
        for req, task in self._barriers:
            dev = req.location.index
            if self.device_completed_epoch(dev) >= req.target_epoch:
                group = (dev, req.visibility)
                if group not in done_groups:
                    done_groups.add(group)
                    self.stats.barrier_actions += 1
                req.fulfill(None)
                self._maybe_runnable(task)
            else:
                still.append((req, task))
        self._barriers = still


_depth_cache: dict = {}


def _node_depth(node) -> int:
    got = _depth_cache.get(node.op_id)
    if got is None:
        got = 1 + max((_node_depth(i) for i in node.inputs), default=0)
        _depth_cache[node.op_id] = got
    return got


# ---------------------------------------------------------------------------
# generic task body for kernel operators


def _generic_compute_body(ctx: TaskContext):
    node = ctx.node
    positions = ctx.positions
    deps = {pos: node.dependencies(pos) for pos in positions}

    # one batched request per input node, deduplicated
    per_input: list[list] = [[] for _ in node.inputs]
    for dep in deps.values():
        for i, plist in enumerate(dep):
            for p in plist:
                if p not in per_input[i]:
                    per_input[i].append(p)
    wanted_inputs = (
        ChunkState.PREVIEW if ctx.wanted_state == ChunkState.PREVIEW else ChunkState.FINAL
    )
    requests = [
        ChunkRequest(inp, plist, RAM, min_state=wanted_inputs)
        for inp, plist in zip(node.inputs, per_input)
        if plist
    ]
    handle_lists = yield requests
    by_input: list[dict] = [{} for _ in node.inputs]
    li = 0
    for i, plist in enumerate(per_input):
        if not plist:
            continue
        for p, h in zip(plist, handle_lists[li]):
            by_input[i][p] = h
            ctx.note_input_state(h.state)
        li += 1

    # in-place: single input, identity footprint, same payload size
    inplace_done = set()
    if (
        ctx.config.enable_inplace
        and node.supports_inplace
        and len(node.inputs) == 1
        and ctx.location.kind != "disk"
        and node.md.chunk_payload_bytes() == node.inputs[0].md.chunk_payload_bytes()
    ):
        for pos in positions:
            dep = deps[pos]
            if len(dep[0]) != 1 or tuple(dep[0][0]) != pos:
                continue
            got = by_input[0][pos].try_inplace()
            if got is None:
                continue  # denied: someone else holds a reference
            view, grant = got
            snapshot = [[np.array(view)]]  # the kernel writes over this buffer
            yield WorkerJob(node.kernel, pos, snapshot, view)
            ctx.publish_inplace(pos, grant, node.md.chunk_payload_bytes(), ChunkState.FINAL)
            inplace_done.add(pos)

    staging = ctx.location.kind == "disk"
    outs = []
    for pos in positions:
        if pos in inplace_done:
            continue
        shape = node.md.element_type.payload_shape(node.md.chunk_size)
        if staging:
            view = np.empty(shape, dtype=node.md.element_type.np_dtype)
            outs.append((pos, view, None))
        else:
            out, done = yield from ctx.store_into(pos, node.md.chunk_payload_bytes())
            view = out.view(node.md.element_type.np_dtype).reshape(shape)
            outs.append((pos, view, done))

    jobs = []
    for pos, view, _ in outs:
        inputs = [[by_input[i][tuple(p)].array for p in plist] for i, plist in enumerate(deps[pos])]
        jobs.append(WorkerJob(node.kernel, pos, inputs, view))
    if jobs:
        yield jobs
    for pos, view, done in outs:
        if done is not None:
            done(ChunkState.FINAL)
        else:
            yield from ctx.store_chunk(pos, view, ChunkState.FINAL)
