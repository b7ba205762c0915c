"""Linguistic memory: per-step summaries plus the key visual feature of the
step that produced them, bounded by a locality-aware eviction rule."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

_ROOM_RE = re.compile(r"\b(R\d+|corridor)\b")
_POS_RE = re.compile(r"\bat \((-?\d+\.\d+), (-?\d+\.\d+)\)")


class StaleUpdate(ValueError):
    """Raised when an update arrives with a non-increasing step index."""


@dataclass(frozen=True)
class MemoryEntry:
    step: int
    summary: str
    key_feature: np.ndarray  # (D,)
    room_id: Optional[str] = None

    @staticmethod
    def from_summary(step: int, summary: str, key_feature: np.ndarray) -> "MemoryEntry":
        m = _ROOM_RE.search(summary)
        return MemoryEntry(step, summary, key_feature, m.group(1) if m else None)

    def position(self) -> Optional[tuple[float, float]]:
        m = _POS_RE.search(self.summary)
        if not m:
            return None
        return float(m.group(1)), float(m.group(2))


@dataclass(frozen=True)
class MemoryStore:
    entries: tuple[MemoryEntry, ...] = ()
    cap: int = 32
    merge_cosine: float = 0.95

    def __len__(self) -> int:
        return len(self.entries)

    def last_step(self) -> int:
        return self.entries[-1].step if self.entries else -1

    def visited(self, room_id: str) -> bool:
        return any(e.room_id == room_id for e in self.entries)

    def visited_rooms(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.room_id is not None and e.room_id not in seen:
                seen.append(e.room_id)
        return seen

    def room_positions(self) -> dict[str, tuple[float, float]]:
        out: dict[str, tuple[float, float]] = {}
        for e in self.entries:
            pos = e.position()
            if e.room_id is not None and pos is not None:
                out[e.room_id] = pos
        return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        return 1.0  # featureless entries merge on room id alone
    return float(np.dot(a, b) / (na * nb))


def update(
    store: MemoryStore,
    summary: str,
    key_feature: np.ndarray,
    step: int,
    adjacency: Optional[dict[str, frozenset[str]]] = None,
) -> MemoryStore:
    """Append a summary entry. Re-summarizing a room whose stored appearance
    matches (cosine over key features) replaces the old entry; over
    capacity, the oldest entry whose room is not adjacent to the current
    room is evicted first, and the most recent entry never is."""
    if step <= store.last_step():
        raise StaleUpdate(f"step {step} is not after stored step {store.last_step()}")
    entry = MemoryEntry.from_summary(step, summary, np.asarray(key_feature, dtype=np.float64))
    entries = list(store.entries)
    if entry.room_id is not None:
        for i, old in enumerate(entries):
            if old.room_id == entry.room_id and _cosine(old.key_feature, entry.key_feature) > store.merge_cosine:
                entries.pop(i)
                break
    entries.append(entry)

    while len(entries) > store.cap:
        neighbors = set()
        if adjacency is not None and entry.room_id is not None:
            neighbors = set(adjacency.get(entry.room_id, frozenset())) | {entry.room_id}
        victim = None
        for i, old in enumerate(entries[:-1]):  # never the most recent
            if old.room_id is None or old.room_id not in neighbors:
                victim = i
                break
        if victim is None:
            victim = 0
        entries.pop(victim)
    return MemoryStore(tuple(entries), store.cap, store.merge_cosine)


def serialize(store: MemoryStore) -> str:
    """Oldest-to-newest lines of `[step k] summary`; empty store is ''."""
    return "\n".join(f"[step {e.step}] {e.summary}" for e in store.entries)
