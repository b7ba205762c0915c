"""Seeded procedural maps: BSP room splits with door gaps, random furniture,
and scripted moving targets for tracking episodes."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..core import Pose, Rng, normalize_angle
from .gridmap import CATEGORY_NAMES, GridMap, Room

_MIN_ROOM = 3  # cells, interior span below which a region stops splitting


def _split_region(rng: Rng, regions: list[tuple[int, int, int, int]], want: int):
    """Split free-space regions (x, y, w, h) with 1-cell walls until roughly
    `want` regions exist. Returns (regions, walls) where each wall is
    (orientation, coordinate, span_region)."""
    walls = []
    while len(regions) < want:
        # split the largest splittable region
        candidates = [
            (max(w, h), i)
            for i, (x, y, w, h) in enumerate(regions)
            if max(w, h) >= 2 * _MIN_ROOM + 1
        ]
        if not candidates:
            break
        candidates.sort(reverse=True)
        _, idx = candidates[0]
        x, y, w, h = regions.pop(idx)
        if w >= h:
            cut = int(rng.integers(x + _MIN_ROOM, x + w - _MIN_ROOM))
            regions.append((x, y, cut - x, h))
            regions.append((cut + 1, y, x + w - cut - 1, h))
            walls.append(("v", cut, (y, h)))
        else:
            cut = int(rng.integers(y + _MIN_ROOM, y + h - _MIN_ROOM))
            regions.append((x, y, w, cut - y))
            regions.append((x, cut + 1, w, y + h - cut - 1))
            walls.append(("h", cut, (x, w)))
    return regions, walls


def _connected(occupancy: np.ndarray) -> bool:
    free = ~occupancy
    total = int(free.sum())
    if total == 0:
        return False
    ys, xs = np.nonzero(free)
    stack = [(int(xs[0]), int(ys[0]))]
    seen = {stack[0]}
    while stack:
        cx, cy = stack.pop()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = cx + dx, cy + dy
            if (nx, ny) not in seen and free[ny, nx]:
                seen.add((nx, ny))
                stack.append((nx, ny))
    return len(seen) == total


def generate_map(
    rng: Rng,
    width: int = 16,
    height: int = 16,
    cell_size: float = 0.5,
    rooms: int = 4,
    furniture: int = 6,
    goal_category: Optional[str] = None,
) -> GridMap:
    """Procedural multi-room layout. Guarantees a closed border, full
    free-space connectivity, and (when requested) exactly one goal-category
    object reachable from every free cell."""
    occupancy = np.zeros((height, width), dtype=bool)
    occupancy[0, :] = occupancy[-1, :] = True
    occupancy[:, 0] = occupancy[:, -1] = True
    semantics = np.zeros((height, width), dtype=np.int16)

    regions = [(1, 1, width - 2, height - 2)]
    regions, walls = _split_region(rng, regions, rooms)

    for orient, coord, (start, span) in walls:
        if orient == "v":
            occupancy[start : start + span, coord] = True
        else:
            occupancy[coord, start : start + span] = True
    # carve 1-2 cell doors through every wall so the world stays connected
    for orient, coord, (start, span) in walls:
        door = int(rng.integers(start, start + span))
        wide = span > 4 and rng.uniform() < 0.5
        cells = [door, min(door + 1, start + span - 1)] if wide else [door]
        for d in cells:
            if orient == "v":
                occupancy[d, coord] = False
            else:
                occupancy[coord, d] = False

    room_list = tuple(
        Room(f"R{i}", x, y, w, h) for i, (x, y, w, h) in enumerate(sorted(regions))
    )

    # furniture: occupied semantic blocks that never break connectivity
    categories = list(CATEGORY_NAMES)
    goal_cid = categories.index(goal_category) + 1 if goal_category else None
    placed = 0
    attempts = 0
    while placed < furniture and attempts < furniture * 20:
        attempts += 1
        cx = int(rng.integers(1, width - 1))
        cy = int(rng.integers(1, height - 1))
        if occupancy[cy, cx]:
            continue
        cid = int(rng.integers(1, len(categories) + 1))
        if goal_cid is not None and cid == goal_cid:
            continue  # the goal instance is placed separately, exactly once
        occupancy[cy, cx] = True
        if not _connected(occupancy) or not _has_free_neighbor(occupancy, cx, cy):
            occupancy[cy, cx] = False
            continue
        semantics[cy, cx] = cid
        placed += 1

    if goal_cid is not None:
        goal_room = room_list[int(rng.integers(0, len(room_list)))]
        for _ in range(200):
            cx = int(rng.integers(goal_room.x, goal_room.x + goal_room.w))
            cy = int(rng.integers(goal_room.y, goal_room.y + goal_room.h))
            if occupancy[cy, cx]:
                continue
            occupancy[cy, cx] = True
            if _connected(occupancy) and _has_free_neighbor(occupancy, cx, cy):
                semantics[cy, cx] = goal_cid
                break
            occupancy[cy, cx] = False
        else:
            raise RuntimeError("could not place goal object")

    return GridMap(occupancy, semantics, cell_size, room_list)


def _has_free_neighbor(occupancy: np.ndarray, cx: int, cy: int) -> bool:
    h, w = occupancy.shape
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nx, ny = cx + dx, cy + dy
        if 0 <= nx < w and 0 <= ny < h and not occupancy[ny, nx]:
            return True
    return False


class MovingTargetScript:
    """Deterministic moving target: follows a closed polyline of room
    centers at constant speed. pose_at(t) is pure in t."""

    def __init__(self, points: list[tuple[float, float]], speed: float = 0.3):
        if len(points) < 2:
            raise ValueError("target script needs at least two points")
        self.points = [(float(x), float(y)) for x, y in points]
        self.speed = float(speed)
        self._lengths = []
        pts = self.points + [self.points[0]]
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            self._lengths.append(math.hypot(x1 - x0, y1 - y0))
        self.total = sum(self._lengths)

    def pose_at(self, t: float) -> Pose:
        s = (self.speed * t) % self.total
        pts = self.points + [self.points[0]]
        for (x0, y0), (x1, y1), seg in zip(pts[:-1], pts[1:], self._lengths):
            if s <= seg or seg == self._lengths[-1]:
                if seg < 1e-12:
                    return Pose(x0, y0, 0.0)
                frac = min(s / seg, 1.0)
                heading = normalize_angle(math.atan2(y1 - y0, x1 - x0))
                return Pose(x0 + frac * (x1 - x0), y0 + frac * (y1 - y0), heading)
            s -= seg
        x, y = self.points[0]
        return Pose(x, y, 0.0)


def make_track_script(rng: Rng, gmap: GridMap, speed: float = 0.3) -> MovingTargetScript:
    """Loop over 2-3 room centers, nudged to free cells."""
    count = min(len(gmap.rooms), 2 + int(rng.integers(0, 2)))
    rooms = list(gmap.rooms)
    rng.shuffle(rooms)
    points = []
    for room in rooms[:count]:
        cx, cy = room.center_world(gmap.cell_size)
        if gmap.occupied_at(cx, cy):
            found = False
            for ddx in range(-2, 3):
                for ddy in range(-2, 3):
                    nx, ny = cx + ddx * gmap.cell_size, cy + ddy * gmap.cell_size
                    if not gmap.occupied_at(nx, ny):
                        cx, cy = nx, ny
                        found = True
                        break
                if found:
                    break
        points.append((cx, cy))
    if len(points) < 2:
        points = points * 2
    return MovingTargetScript(points, speed)
