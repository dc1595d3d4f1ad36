"""Byte-capped LRU cache with per-key get-or-compute."""

from __future__ import annotations

import threading
from collections import OrderedDict
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Any, Callable, Hashable


@dataclass
class CacheEntry:
    key: Hashable
    value: Any
    nbytes: int
    hits: int = 0


class FeatureCache:
    """Thread-safe LRU keyed by content hash, evicting by total bytes.

    A key that is being computed blocks only callers asking for that same
    key; everyone else proceeds.
    """

    def __init__(self, max_bytes: int | None = 256 * 2**20):
        self.max_bytes = max_bytes
        self._entries: OrderedDict[Hashable, CacheEntry] = OrderedDict()
        self._pending: dict[Hashable, Future] = {}
        self._lock = threading.Lock()
        self.total_bytes = 0
        self.misses = 0
        self.hits = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def __contains__(self, key: Hashable) -> bool:
        with self._lock:
            return key in self._entries

    def entry(self, key: Hashable) -> CacheEntry | None:
        with self._lock:
            return self._entries.get(key)

    def get_or_compute(self, key: Hashable, compute: Callable[[], Any], sizeof: Callable[[Any], int]) -> Any:
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                entry.hits += 1
                self.hits += 1
                self._entries.move_to_end(key)
                return entry.value
            fut = self._pending.get(key)
            owner = fut is None
            if owner:
                fut = Future()
                self._pending[key] = fut
                self.misses += 1
            else:
                self.hits += 1
        if not owner:
            return fut.result()
        try:
            value = compute()
        except BaseException as exc:
            with self._lock:
                del self._pending[key]
            fut.set_exception(exc)
            raise
        with self._lock:
            del self._pending[key]
            self._insert(CacheEntry(key, value, int(sizeof(value))))
        fut.set_result(value)
        return value

    def _insert(self, entry: CacheEntry) -> None:
        if self.max_bytes is not None and entry.nbytes > self.max_bytes:
            return
        self._entries[entry.key] = entry
        self.total_bytes += entry.nbytes
        while self.max_bytes is not None and self.total_bytes > self.max_bytes:
            _, old = self._entries.popitem(last=False)
            self.total_bytes -= old.nbytes

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.total_bytes = 0
