"""Occupancy-grid world maps with per-cell semantics and room metadata.

Map text format (round-trips exactly):

    W H cell_size
    <H rows of W chars: '#' occupied, '.' free, 'a'..'z' = semantic object>
    room <id> <x> <y> <w> <h>      (optional, one per room rectangle)

Row 0 of the text is the y=0 row of the grid. Semantic letters mark
occupied object cells; category id = 1 + (letter - 'a').
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

SEMANTIC_BUCKETS = 8  # one-hot buckets used by the observation encoder

# Category vocabulary kept small on purpose: ids 1..8 map to letters a..h.
CATEGORY_NAMES = ("table", "chair", "plant", "sofa", "bed", "sink", "lamp", "shelf")


def category_id(name: str) -> int:
    return CATEGORY_NAMES.index(name) + 1


def category_name(cid: int) -> str:
    return CATEGORY_NAMES[cid - 1]


def _rect_adjacency(rooms: tuple["Room", ...]) -> dict[str, frozenset[str]]:
    """Rooms separated by a single wall count as adjacent."""
    adj: dict[str, set[str]] = {r.id: set() for r in rooms}
    for i, a in enumerate(rooms):
        for b in rooms[i + 1 :]:
            x_gap = max(a.x, b.x) - min(a.x + a.w, b.x + b.w)
            y_gap = max(a.y, b.y) - min(a.y + a.h, b.y + b.h)
            if (x_gap <= 1 and y_gap < 0) or (y_gap <= 1 and x_gap < 0):
                adj[a.id].add(b.id)
                adj[b.id].add(a.id)
    return {k: frozenset(v) for k, v in adj.items()}


@dataclass(frozen=True)
class Room:
    """Axis-aligned free-space rectangle (cell units, inclusive of interior)."""

    id: str
    x: int
    y: int
    w: int
    h: int

    def contains(self, cx: int, cy: int) -> bool:
        return self.x <= cx < self.x + self.w and self.y <= cy < self.y + self.h

    def center_world(self, cell_size: float) -> tuple[float, float]:
        return ((self.x + self.w / 2.0) * cell_size, (self.y + self.h / 2.0) * cell_size)


class GridMap:
    """Closed-world occupancy grid. occupancy[y, x] is True for walls and
    objects; semantics[y, x] holds a category id (0 = none)."""

    def __init__(
        self,
        occupancy: np.ndarray,
        semantics: np.ndarray,
        cell_size: float,
        rooms: tuple[Room, ...] = (),
        adjacency: Optional[dict[str, frozenset[str]]] = None,
    ):
        self.occupancy = np.asarray(occupancy, dtype=bool)
        self.semantics = np.asarray(semantics, dtype=np.int16)
        self.height, self.width = self.occupancy.shape
        self.cell_size = float(cell_size)
        self.rooms = tuple(rooms)
        self.adjacency = adjacency if adjacency is not None else _rect_adjacency(self.rooms)
        self._validate()

    def _validate(self) -> None:
        occ = self.occupancy
        if not (occ[0, :].all() and occ[-1, :].all() and occ[:, 0].all() and occ[:, -1].all()):
            raise ValueError("border cells must be occupied (closed world)")
        if self.semantics.shape != occ.shape:
            raise ValueError("semantics shape mismatch")
        ys, xs = np.nonzero(self.semantics)
        for y, x in zip(ys, xs):
            if not self._has_free_neighbor(int(x), int(y)):
                raise ValueError(f"semantic object at ({x}, {y}) has no free-adjacent cell")

    def _has_free_neighbor(self, cx: int, cy: int) -> bool:
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < self.width and 0 <= ny < self.height and not self.occupancy[ny, nx]:
                return True
        return False

    # -- coordinates ------------------------------------------------------

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(x // self.cell_size), int(y // self.cell_size)

    def cell_center(self, cx: int, cy: int) -> tuple[float, float]:
        return (cx + 0.5) * self.cell_size, (cy + 0.5) * self.cell_size

    def in_bounds(self, cx: int, cy: int) -> bool:
        return 0 <= cx < self.width and 0 <= cy < self.height

    def occupied_at(self, x: float, y: float) -> bool:
        cx, cy = self.cell_of(x, y)
        if not self.in_bounds(cx, cy):
            return True
        return bool(self.occupancy[cy, cx])

    def room_at(self, x: float, y: float) -> Optional[str]:
        cx, cy = self.cell_of(x, y)
        for room in self.rooms:
            if room.contains(cx, cy):
                return room.id
        return None

    def room_by_id(self, room_id: str) -> Optional[Room]:
        for room in self.rooms:
            if room.id == room_id:
                return room
        return None

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.occupancy)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]

    def find_category_cells(self, cid: int) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.semantics == cid)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]


def save_map_text(gmap: GridMap) -> str:
    lines = [f"{gmap.width} {gmap.height} {gmap.cell_size!r}"]
    for y in range(gmap.height):
        row = []
        for x in range(gmap.width):
            if gmap.semantics[y, x]:
                row.append(chr(ord("a") + int(gmap.semantics[y, x]) - 1))
            elif gmap.occupancy[y, x]:
                row.append("#")
            else:
                row.append(".")
        lines.append("".join(row))
    for room in gmap.rooms:
        lines.append(f"room {room.id} {room.x} {room.y} {room.w} {room.h}")
    return "\n".join(lines) + "\n"


def load_map_text(text: str) -> GridMap:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty map file")
    header = lines[0].split()
    if len(header) != 3:
        raise ValueError(f"bad map header: {lines[0]!r}")
    width, height, cell_size = int(header[0]), int(header[1]), float(header[2])
    if len(lines) < 1 + height:
        raise ValueError("map file truncated")
    occupancy = np.zeros((height, width), dtype=bool)
    semantics = np.zeros((height, width), dtype=np.int16)
    for y in range(height):
        row = lines[1 + y]
        if len(row) != width:
            raise ValueError(f"row {y} has length {len(row)}, expected {width}")
        for x, ch in enumerate(row):
            if ch == "#":
                occupancy[y, x] = True
            elif ch == ".":
                pass
            elif "a" <= ch <= "z":
                occupancy[y, x] = True
                semantics[y, x] = ord(ch) - ord("a") + 1
            else:
                raise ValueError(f"unknown map character {ch!r}")
    rooms = []
    for line in lines[1 + height :]:
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] != "room" or len(parts) != 6:
            raise ValueError(f"bad trailer line: {line!r}")
        rooms.append(Room(parts[1], int(parts[2]), int(parts[3]), int(parts[4]), int(parts[5])))
    return GridMap(occupancy, semantics, cell_size, tuple(rooms))
