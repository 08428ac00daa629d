"""Sparse page-table index from linear chunk indices to resident payloads.

A fixed three-level hierarchy with 2^16 entries per page addresses a chunk
index space of 2^48.  Kernels traverse it directly (wait-free reads); entry
updates rely on the GIL's atomicity of single dict operations, mirroring the
compare-and-swap contract of the original design.  Structural bookkeeping
(page retirement, LRU) belongs to the manager thread.

The companion FixedHashTable is the bounded open-addressing table through
which kernels report chunk requests and chunk/page uses back to the host
loop; inserts may be dropped at the probe bound, so the resulting LRU
feedback is approximate by design.
"""

from __future__ import annotations

import numpy as np

from .store import ReclamationNeeded

PAGE_BITS = 16
PAGE_ENTRIES = 1 << PAGE_BITS
NUM_LEVELS = 3
MAX_CHUNK_INDEX = 1 << (PAGE_BITS * NUM_LEVELS)

# key tags for the shared report table
TAG_CHUNK_USE = 0
TAG_PAGE_USE = 1
TAG_CHUNK_REQUEST = 2


class Page:
    __slots__ = ("entries", "stamp", "epoch")

    def __init__(self):
        self.entries = {}
        self.stamp = 0
        self.epoch = 0

    def reset(self):
        self.entries.clear()
        self.stamp = 0
        self.epoch = 0


def _digits(index: int) -> tuple[int, int, int]:
    return (index >> 32) & 0xFFFF, (index >> 16) & 0xFFFF, index & 0xFFFF


class PageTableHierarchy:
    """One page directory for one tensor (at one LOD level).

    Maps linearized chunk indices to opaque payload references.  `on_remove`
    is invoked with (index, payload_ref) whenever a mapping is removed, which
    the engine uses to decrement the chunk's active reference count.
    """

    def __init__(self, on_remove=None, max_pages: int | None = None):
        self.root = Page()
        self.on_remove = on_remove
        self.max_pages = max_pages
        self.page_count = 1
        self._free_pages: list[Page] = []
        self._retired: list[Page] = []
        self._chunk_stamps: dict[int, int] = {}
        self._stamp = 0

    def _next_stamp(self) -> int:
        self._stamp += 1
        return self._stamp

    def _alloc_page(self) -> Page:
        if self._free_pages:
            page = self._free_pages.pop()
            page.reset()
        else:
            if self.max_pages is not None and self.page_count >= self.max_pages:
                raise ReclamationNeeded("page table page budget exhausted")
            page = Page()
        self.page_count += 1
        return page

    @staticmethod
    def check_index(index: int) -> int:
        if not 0 <= index < MAX_CHUNK_INDEX:
            raise ValueError(f"chunk index {index} outside the 2^48 addressable space")
        return index

    def _child(self, parent: Page, digit: int) -> Page:
        page = parent.entries.get(digit)
        if page is None:
            candidate = self._alloc_page()
            page = parent.entries.setdefault(digit, candidate)
            if page is not candidate:  # lost the insert race; recycle ours
                self._free_pages.append(candidate)
                self.page_count -= 1
        return page

    def insert(self, index: int, payload_ref) -> None:
        d0, d1, d2 = _digits(self.check_index(index))
        leaf = self._child(self._child(self.root, d0), d1)
        leaf.entries[d2] = payload_ref
        self._chunk_stamps[index] = self._next_stamp()

    def lookup(self, index: int):
        """Payload reference, or None when the index is unmapped."""
        mid = self.root.entries.get((index >> 32) & 0xFFFF)
        if mid is None:
            return None
        leaf = mid.entries.get((index >> 16) & 0xFFFF)
        if leaf is None:
            return None
        return leaf.entries.get(index & 0xFFFF)

    def remove(self, index: int, epoch: int = 0) -> None:
        """Unmap an index; no-op when unmapped.

        Pages left empty are unreferenced from their parents and retired;
        their storage returns to the free pool once their epoch expires.
        """
        d0, d1, d2 = _digits(self.check_index(index))
        mid = self.root.entries.get(d0)
        leaf = mid.entries.get(d1) if mid is not None else None
        if leaf is None or d2 not in leaf.entries:
            return
        payload = leaf.entries.pop(d2)
        self._chunk_stamps.pop(index, None)
        if not leaf.entries:
            del mid.entries[d1]
            self._retire(leaf, epoch)
            if not mid.entries:
                del self.root.entries[d0]
                self._retire(mid, epoch)
        if self.on_remove is not None:
            self.on_remove(index, payload)

    def _retire(self, page: Page, epoch: int) -> None:
        page.epoch = epoch
        self._retired.append(page)
        self.page_count -= 1

    def reclaim_retired(self, completed_epoch: int) -> int:
        """Move retired pages whose epoch has expired into the reuse pool."""
        keep, done = [], 0
        for page in self._retired:
            if page.epoch <= completed_epoch:
                self._free_pages.append(page)
                done += 1
            else:
                keep.append(page)
        self._retired = keep
        return done

    def touch(self, index: int) -> None:
        if index in self._chunk_stamps:
            self._chunk_stamps[index] = self._next_stamp()

    def mapped_count(self) -> int:
        return len(self._chunk_stamps)

    def evict_lru(self, count: int, epoch: int = 0) -> list[int]:
        """Unmap up to `count` least-recently-used chunk indices."""
        victims = sorted(self._chunk_stamps.items(), key=lambda kv: kv[1])[:count]
        removed = []
        for index, _ in victims:
            self.remove(index, epoch)
            removed.append(index)
        return removed


def encode_report_key(tag: int, level: int, index: int) -> int:
    if not 0 <= index < MAX_CHUNK_INDEX:
        raise ValueError("index out of range")
    if not 0 <= level < 256:
        raise ValueError("level out of range")
    return (tag << 58) | (level << 50) | index


def decode_report_key(key: int) -> tuple[int, int, int]:
    return key >> 58, (key >> 50) & 0xFF, key & (MAX_CHUNK_INDEX - 1)


def _mix64(x: int) -> int:
    # splitmix64 finalizer
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


class FixedHashTable:
    """Fixed-size open-addressing set with bounded linear probing.

    Inserts are dropped (never resized, never corrupted) once a key's probe
    sequence of length `max_probe` is exhausted.
    """

    EMPTY = -1

    def __init__(self, capacity: int = 2048, max_probe: int = 16):
        self.capacity = capacity
        self.max_probe = max_probe
        self._slots = np.full(capacity, self.EMPTY, dtype=np.int64)
        self.dropped = 0

    def insert(self, key: int) -> bool:
        """Record a key; True when present afterwards, False when dropped."""
        if key < 0:
            raise ValueError("keys must be non-negative")
        base = _mix64(key) % self.capacity
        for i in range(self.max_probe):
            slot = (base + i) % self.capacity
            cur = self._slots[slot]
            if cur == key:
                return True
            if cur == self.EMPTY:
                self._slots[slot] = key
                return True
        self.dropped += 1
        return False

    def __contains__(self, key: int) -> bool:
        base = _mix64(key) % self.capacity
        for i in range(self.max_probe):
            cur = self._slots[(base + i) % self.capacity]
            if cur == key:
                return True
            if cur == self.EMPTY:
                return False
        return False

    def __len__(self) -> int:
        return int(np.count_nonzero(self._slots != self.EMPTY))

    def drain(self) -> set[int]:
        """Return all live keys and clear the table."""
        keys = set(int(k) for k in self._slots[self._slots != self.EMPTY])
        self._slots.fill(self.EMPTY)
        return keys
