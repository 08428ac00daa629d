"""Bounded-capacity chunk stores with LRU garbage collection.

Each location (RAM, device N, disk) has its own store that tracks every
managed chunk inside a fixed byte budget.  Freed allocations are parked in a
per-size bucket cache and handed back on the next allocation of the same
quantized size, which avoids allocator churn for workloads that repeatedly
allocate and free similar payloads.

Mutation is manager-thread-only (see the engine module); worker jobs only
read payload bytes of reference-held entries.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from heapq import heappop, heappush

import numpy as np

from .model import ChunkId

DISK_MAGIC = b"PLCS"
DISK_VERSION = 1


class StoreError(Exception):
    pass


class AllocationTooLarge(StoreError):
    """Requested size exceeds store capacity; retrying cannot help."""


class ReclamationNeeded(StoreError):
    """Capacity exhausted; the caller must run garbage collection and retry."""


@dataclass(frozen=True)
class Location:
    kind: str
    index: int = 0

    @staticmethod
    def ram() -> "Location":
        return Location("ram")

    @staticmethod
    def device(index: int = 0) -> "Location":
        return Location("device", index)

    @staticmethod
    def disk() -> "Location":
        return Location("disk")

    def __str__(self):
        return f"device{self.index}" if self.kind == "device" else self.kind


RAM = Location.ram()
DISK = Location.disk()


class ChunkState(IntEnum):
    IN_FLIGHT = 0
    PREVIEW = 1
    FINAL = 2


def quantize_size(requested: int, mantissa_bits: int = 8) -> int:
    """Round a byte size up to its bucket granularity.

    The granularity is 2^max(0, floor(log2 s) - mantissa_bits), i.e. sizes
    keep at most `mantissa_bits` significant bits below the leading bit, so
    the overshoot never exceeds one 1/256th increment (for the default 8).
    """
    if requested < 1:
        raise ValueError("size must be positive")
    g = 1 << max(0, requested.bit_length() - 1 - mantissa_bits)
    return -(-requested // g) * g


@dataclass
class Allocation:
    """A slab of store-owned storage of quantized size."""

    size_q: int
    buffer: np.ndarray | None = None  # RAM/device stores
    offset: int = -1  # disk store


@dataclass
class StoreEntry:
    id: ChunkId
    location: Location
    size_bytes: int  # actual payload bytes
    size_q: int  # quantized accounting size
    state: ChunkState
    lru_stamp: int
    ref_count: int = 0
    epoch: int = 0
    allocation: Allocation | None = None
    payload: np.ndarray | None = None  # None for disk entries


class Hit:
    __slots__ = ("entry",)

    def __init__(self, entry):
        self.entry = entry


class ElsewhereAt:
    __slots__ = ("location", "state")

    def __init__(self, location, state):
        self.location = location
        self.state = state


class Miss:
    __slots__ = ()


MISS = Miss()


@dataclass
class StoreConfig:
    ram_capacity: int = 1 << 30
    device_capacities: tuple = ()
    disk_capacity: int = 0
    disk_path: str | None = None
    gc_target_fraction: float = 0.10
    quantization_mantissa_bits: int = 8

    def __post_init__(self):
        if not 0 < self.gc_target_fraction <= 1:
            raise ValueError("gc_target_fraction must be in (0, 1]")


class Store:
    """One bounded store at a single location.

    Occupancy accounting counts live entries plus bucket-cached free
    allocations, both at quantized sizes, so the configured capacity is a
    hard bound on owned memory.
    """

    def __init__(self, location: Location, capacity: int, group: "StoreGroup"):
        self.location = location
        self.capacity = int(capacity)
        self.group = group
        self.entries: dict[ChunkId, StoreEntry] = {}
        self.live_bytes = 0
        self.cached_bytes = 0
        self.buckets: dict[int, list[Allocation]] = {}
        self._lru_heap: list = []  # (stamp, seq, id), lazily invalidated
        self._lru_seq = 0
        self.completed_epoch = 0  # device stores only; 0 elsewhere
        self.current_epoch = 0

    # -- allocation ---------------------------------------------------------

    def _fresh_allocation(self, size_q: int) -> Allocation:
        return Allocation(size_q, buffer=np.empty(size_q, dtype=np.uint8))

    def _release_storage(self, alloc: Allocation) -> None:
        alloc.buffer = None

    def allocate(self, size_bytes: int) -> Allocation:
        """Grab storage for `size_bytes`, reusing a bucketed free allocation
        of the same quantized size when one exists.

        Raises ReclamationNeeded when the budget is exhausted (caller runs GC
        and retries) and AllocationTooLarge when no amount of reclamation can
        ever satisfy the request.
        """
        size_q = quantize_size(size_bytes, self.group.mantissa_bits)
        if size_q > self.capacity:
            raise AllocationTooLarge(
                f"allocation of {size_bytes} bytes exceeds {self} capacity {self.capacity}"
            )
        bucket = self.buckets.get(size_q)
        if bucket:
            alloc = bucket.pop()
            self.cached_bytes -= size_q
            self.live_bytes += size_q
            return alloc
        if self.live_bytes + self.cached_bytes + size_q > self.capacity:
            raise ReclamationNeeded(f"{self} is full ({self.live_bytes + self.cached_bytes}/{self.capacity})")
        alloc = self._fresh_allocation(size_q)
        self.live_bytes += size_q
        return alloc

    def free_allocation(self, alloc: Allocation) -> None:
        """Return an allocation to the size-bucket cache."""
        self.live_bytes -= alloc.size_q
        self.cached_bytes += alloc.size_q
        self.buckets.setdefault(alloc.size_q, []).append(alloc)

    def flush_buckets(self) -> int:
        freed = self.cached_bytes
        for allocs in self.buckets.values():
            for a in allocs:
                self._release_storage(a)
        self.buckets.clear()
        self.cached_bytes = 0
        return freed

    # -- entries ------------------------------------------------------------

    def _payload_view(self, alloc: Allocation, nbytes: int) -> np.ndarray:
        view = alloc.buffer[:nbytes]
        view.flags.writeable = False
        return view

    def insert(self, id: ChunkId, alloc: Allocation, nbytes: int, state: ChunkState,
               epoch: int = 0) -> StoreEntry:
        """Register payload bytes (already written into `alloc`) under `id`.

        Duplicate inserts are resolved in favour of the stronger state: a
        Final entry is never replaced, a Preview entry is replaced by a Final
        one, and a duplicate at equal state keeps the first (its storage wins
        and the new allocation is returned to the bucket cache).
        """
        existing = self.entries.get(id)
        if existing is not None and existing.state >= state and existing.state != ChunkState.IN_FLIGHT:
            self.free_allocation(alloc)
            return existing
        if existing is not None:
            self._drop_entry(existing, recycle=existing.ref_count == 0)
        entry = StoreEntry(
            id=id,
            location=self.location,
            size_bytes=nbytes,
            size_q=alloc.size_q,
            state=state,
            lru_stamp=self.group.next_stamp(),
            epoch=epoch,
            allocation=alloc,
            payload=self._payload_view(alloc, nbytes) if alloc.buffer is not None else None,
        )
        self.entries[id] = entry
        self._lru_push(entry)
        return entry

    def insert_payload(self, id: ChunkId, payload: np.ndarray, state: ChunkState,
                       epoch: int = 0) -> StoreEntry:
        """Allocate and insert in one step (copies `payload`)."""
        data = np.ascontiguousarray(payload)
        nbytes = data.nbytes
        alloc = self.allocate(nbytes)
        alloc.buffer[:nbytes] = data.reshape(-1).view(np.uint8)
        entry = self.insert(id, alloc, nbytes, state, epoch)
        if entry.allocation is not alloc:  # duplicate insert lost the race
            pass
        return entry

    def _drop_entry(self, entry: StoreEntry, recycle: bool) -> None:
        del self.entries[entry.id]
        if recycle:
            self.free_allocation(entry.allocation)
        else:
            # readers still hold the payload view; ownership leaves the store
            self.live_bytes -= entry.size_q
        entry.allocation = None

    def lookup(self, id: ChunkId, min_state: ChunkState = ChunkState.FINAL):
        """Return Hit (pins the entry and bumps its LRU stamp) or None.

        Preview entries never satisfy a request for a Final result; in-flight
        entries never satisfy anything.
        """
        entry = self.entries.get(id)
        if entry is None or entry.state < min_state or entry.state == ChunkState.IN_FLIGHT:
            return None
        self.pin(entry)
        return Hit(entry)

    def peek(self, id: ChunkId) -> StoreEntry | None:
        return self.entries.get(id)

    def pin(self, entry: StoreEntry) -> StoreEntry:
        entry.ref_count += 1
        entry.lru_stamp = self.group.next_stamp()
        return entry

    def unpin(self, entry: StoreEntry) -> None:
        if entry.ref_count <= 0:
            raise StoreError("unbalanced unpin")
        entry.ref_count -= 1
        if entry.ref_count == 0 and self.entries.get(entry.id) is entry:
            self._lru_push(entry)

    def touch(self, id: ChunkId) -> None:
        entry = self.entries.get(id)
        if entry is not None:
            entry.lru_stamp = self.group.next_stamp()
            if entry.ref_count == 0:
                self._lru_push(entry)

    def set_state(self, id: ChunkId, state: ChunkState) -> None:
        self.entries[id].state = state

    def try_replace_inplace(self, entry: StoreEntry) -> np.ndarray | None:
        """Hand the caller exclusive write access to the entry's storage.

        Granted only when the caller's pin is the sole reference.  On success
        the id mapping is removed (its content is about to change) and the
        caller owns the allocation; it is expected to re-insert the written
        buffer under the result's id via `insert`.  Returns None when denied.
        """
        if entry.ref_count != 1 or self.entries.get(entry.id) is not entry:
            return None
        if entry.state == ChunkState.IN_FLIGHT or entry.allocation is None:
            return None
        alloc = entry.allocation
        del self.entries[entry.id]
        entry.allocation = None
        entry.ref_count = 0
        view = alloc.buffer[: entry.size_bytes]
        # the allocation stays live-accounted; `insert` re-registers it
        return _InplaceGrant(self, alloc, view)

    # -- LRU / garbage collection ------------------------------------------

    def _lru_push(self, entry: StoreEntry) -> None:
        self._lru_seq += 1
        heappush(self._lru_heap, (entry.lru_stamp, self._lru_seq, entry.id))

    def garbage_collect(self, completed_epoch: int | None = None,
                        target_bytes: int | None = None) -> int:
        """Pop the LRU queue, freeing unreferenced entries until the target.

        Target defaults to gc_target_fraction * capacity.  Device stores stop
        early at the first entry whose epoch has not completed yet.  When the
        sweep frees less than the target, the bucket cache is flushed.
        """
        if completed_epoch is None:
            completed_epoch = self.completed_epoch
        if target_bytes is None:
            target_bytes = int(self.group.gc_target_fraction * self.capacity)
        freed = 0
        while freed < target_bytes and self._lru_heap:
            stamp, _, id = self._lru_heap[0]
            entry = self.entries.get(id)
            if entry is None or entry.ref_count > 0 or entry.lru_stamp != stamp:
                heappop(self._lru_heap)  # stale
                continue
            if entry.epoch > completed_epoch:
                break
            heappop(self._lru_heap)
            self._drop_entry(entry, recycle=True)
            self.group.evictions += 1
            freed += entry.size_q
        if freed < target_bytes:
            self.flush_buckets()
        return freed

    def occupancy(self) -> int:
        return self.live_bytes + self.cached_bytes

    def __str__(self):
        return f"store[{self.location}]"


class _InplaceGrant(np.ndarray):
    """Writable view over a stolen allocation; carries it to re-insertion."""

    def __new__(cls, store, alloc, view):
        obj = view.view(cls)
        obj.flags.writeable = True
        obj.src_store = store
        obj.src_allocation = alloc
        return obj


class DiskStore(Store):
    """File-backed store persisting entries under their chunk id.

    Layout: header {magic "PLCS", version u32, index offset u64}, then chunk
    payloads, then the index {id 16B, offset u64, size u64, state u8}*, all
    little-endian.  The index is rewritten on flush/close; entries survive
    process restarts.
    """

    _HEADER = struct.Struct("<4sIQ")
    _INDEX_ENTRY = struct.Struct("<16sQQB")

    def __init__(self, location, capacity, group, path):
        super().__init__(location, capacity, group)
        self.path = path
        # seek+read/write must be atomic: worker threads share this handle
        self._io_lock = threading.Lock()
        if os.path.exists(path) and os.path.getsize(path) >= self._HEADER.size:
            self._file = open(path, "r+b")
            self._load_index()
        else:
            self._file = open(path, "w+b")
            self._data_end = self._HEADER.size
            self._write_header(0)

    def _write_header(self, index_offset):
        self._file.seek(0)
        self._file.write(self._HEADER.pack(DISK_MAGIC, DISK_VERSION, index_offset))

    def _load_index(self):
        self._file.seek(0)
        magic, version, index_offset = self._HEADER.unpack(self._file.read(self._HEADER.size))
        if magic != DISK_MAGIC:
            raise StoreError(f"{self.path}: bad disk store magic {magic!r}")
        if version != DISK_VERSION:
            raise StoreError(f"{self.path}: unsupported disk store version {version}")
        self._data_end = self._HEADER.size
        if index_offset:
            self._file.seek(index_offset)
            raw = self._file.read()
            for off in range(0, len(raw) - len(raw) % self._INDEX_ENTRY.size, self._INDEX_ENTRY.size):
                id_bytes, offset, size, state = self._INDEX_ENTRY.unpack_from(raw, off)
                size_q = quantize_size(size, self.group.mantissa_bits)
                alloc = Allocation(size_q, offset=offset)
                entry = StoreEntry(
                    id=ChunkId(id_bytes), location=self.location, size_bytes=size,
                    size_q=size_q, state=ChunkState(state),
                    lru_stamp=self.group.next_stamp(), allocation=alloc,
                )
                self.entries[entry.id] = entry
                self.live_bytes += size_q
                self._lru_push(entry)
                self._data_end = max(self._data_end, offset + size_q)

    def _fresh_allocation(self, size_q):
        alloc = Allocation(size_q, offset=self._data_end)
        self._data_end += size_q
        return alloc

    def _release_storage(self, alloc):
        pass  # extents of flushed buckets become dead file space

    def _payload_view(self, alloc, nbytes):
        return None

    def write_payload(self, alloc: Allocation, data: bytes) -> None:
        with self._io_lock:
            self._file.seek(alloc.offset)
            self._file.write(data)

    def read_payload(self, entry: StoreEntry) -> bytes:
        with self._io_lock:
            self._file.seek(entry.allocation.offset)
            return self._file.read(entry.size_bytes)

    def insert_payload(self, id, payload, state, epoch=0):
        data = np.ascontiguousarray(payload)
        alloc = self.allocate(data.nbytes)
        self.write_payload(alloc, data.tobytes())
        return self.insert(id, alloc, data.nbytes, state, epoch)

    def flush(self):
        with self._io_lock:
            index_offset = self._data_end
            self._file.seek(index_offset)
            for entry in self.entries.values():
                self._file.write(self._INDEX_ENTRY.pack(
                    entry.id.value, entry.allocation.offset, entry.size_bytes, int(entry.state)))
            self._file.truncate()
            self._write_header(index_offset)
            self._file.flush()

    def close(self):
        self.flush()
        with self._io_lock:
            self._file.close()


class StoreGroup:
    """All stores of one runtime plus the shared LRU stamp counter."""

    def __init__(self, config: StoreConfig):
        self.config = config
        self._stamp = 0
        self.evictions = 0
        self.gc_target_fraction = config.gc_target_fraction
        self.mantissa_bits = config.quantization_mantissa_bits
        self.stores: dict[Location, Store] = {RAM: Store(RAM, config.ram_capacity, self)}
        for i, cap in enumerate(config.device_capacities):
            loc = Location.device(i)
            self.stores[loc] = Store(loc, cap, self)
        if config.disk_capacity and config.disk_path:
            self.stores[DISK] = DiskStore(DISK, config.disk_capacity, self, config.disk_path)

    def next_stamp(self) -> int:
        self._stamp += 1
        return self._stamp

    def store(self, location: Location) -> Store:
        try:
            return self.stores[location]
        except KeyError:
            raise StoreError(f"no store configured at {location}") from None

    def lookup(self, id: ChunkId, location: Location, min_state: ChunkState = ChunkState.FINAL):
        """Hit at the wanted location, ElsewhereAt another, or Miss."""
        hit = self.store(location).lookup(id, min_state)
        if hit is not None:
            return hit
        for loc, store in self.stores.items():
            if loc == location:
                continue
            entry = store.entries.get(id)
            if entry is not None and entry.state >= min_state and entry.state != ChunkState.IN_FLIGHT:
                return ElsewhereAt(loc, entry.state)
        return MISS

    def close(self):
        for store in self.stores.values():
            if isinstance(store, DiskStore):
                store.close()
