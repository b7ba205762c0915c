"""Shortest-path expert: A* over free cells with 8-connectivity and octile
costs, plus trajectory synthesis for navigation and tracking episodes.

Path costs are tracked as an exact (straight, diagonal) step-count pair so
optimality checks against an independent search can compare without float
tolerance; the metric cost is (straight + sqrt(2) * diagonal) * cell_size.
"""

from __future__ import annotations

import heapq
import math
from typing import Optional

import numpy as np

from ..core import Pose, Trajectory, normalize_angle, pose_distance
from .gridmap import GridMap

SQRT2 = math.sqrt(2.0)

_NEIGHBORS = (
    (1, 0, False), (-1, 0, False), (0, 1, False), (0, -1, False),
    (1, 1, True), (1, -1, True), (-1, 1, True), (-1, -1, True),
)


class NoPath(RuntimeError):
    """Raised when the target cell is unreachable from the start."""


def _octile(a: tuple[int, int], b: tuple[int, int]) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)


def plan_cells(
    gmap: GridMap, start: tuple[int, int], goal: tuple[int, int]
) -> tuple[list[tuple[int, int]], tuple[int, int]]:
    """A* cell path from start to goal. Returns (cells, (straight, diag)).

    Diagonal moves are allowed only when both adjacent cardinal cells are
    free (no corner cutting). The goal cell itself may be occupied (a goal
    object); the path then ends on a free cell adjacent to it.
    """
    if not gmap.in_bounds(*start) or gmap.occupancy[start[1], start[0]]:
        raise NoPath(f"start cell {start} is not free")
    goal_occupied = gmap.occupancy[goal[1], goal[0]] if gmap.in_bounds(*goal) else True
    if not gmap.in_bounds(*goal):
        raise NoPath(f"goal cell {goal} out of bounds")

    def is_goal(cell: tuple[int, int]) -> bool:
        if not goal_occupied:
            return cell == goal
        return max(abs(cell[0] - goal[0]), abs(cell[1] - goal[1])) == 1

    if is_goal(start):
        return [start], (0, 0)

    open_heap: list[tuple[float, int, tuple[int, int]]] = []
    g_pair: dict[tuple[int, int], tuple[int, int]] = {start: (0, 0)}
    g_val: dict[tuple[int, int], float] = {start: 0.0}
    came: dict[tuple[int, int], tuple[int, int]] = {}
    counter = 0
    heapq.heappush(open_heap, (_octile(start, goal), counter, start))
    closed: set[tuple[int, int]] = set()

    while open_heap:
        _, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        closed.add(cur)
        if is_goal(cur):
            cells = [cur]
            while cur in came:
                cur = came[cur]
                cells.append(cur)
            cells.reverse()
            return cells, g_pair[cells[-1]]
        cx, cy = cur
        for dx, dy, diag in _NEIGHBORS:
            nx, ny = cx + dx, cy + dy
            if not gmap.in_bounds(nx, ny) or gmap.occupancy[ny, nx]:
                continue
            if diag and (gmap.occupancy[cy, nx] or gmap.occupancy[ny, cx]):
                continue
            s, d = g_pair[cur]
            npair = (s, d + 1) if diag else (s + 1, d)
            nval = npair[0] + SQRT2 * npair[1]
            nxt = (nx, ny)
            if nxt not in g_val or nval < g_val[nxt] - 1e-12:
                g_val[nxt] = nval
                g_pair[nxt] = npair
                came[nxt] = cur
                counter += 1
                heapq.heappush(open_heap, (nval + _octile(nxt, goal), counter, nxt))
    raise NoPath(f"no path from {start} to {goal}")


def path_cost_meters(pair: tuple[int, int], cell_size: float) -> float:
    return (pair[0] + SQRT2 * pair[1]) * cell_size


def _resample_polyline(
    points: list[tuple[float, float]], n: int, ds: float
) -> list[Pose]:
    """Walk the polyline at arc-length spacing ds, emitting n waypoints with
    headings along the local segment; waypoints bunch at the end when the
    path is shorter than n * ds."""
    if len(points) < 2:
        x, y = points[0]
        return [Pose(x, y, 0.0)] * n
    seg_len = []
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        seg_len.append(math.hypot(x1 - x0, y1 - y0))
    total = sum(seg_len)
    poses: list[Pose] = []
    for k in range(1, n + 1):
        s = min(k * ds, total)
        acc = 0.0
        for (x0, y0), (x1, y1), L in zip(points[:-1], points[1:], seg_len):
            if L < 1e-12:
                continue
            if acc + L >= s - 1e-12:
                frac = (s - acc) / L
                heading = math.atan2(y1 - y0, x1 - x0)
                poses.append(Pose(x0 + frac * (x1 - x0), y0 + frac * (y1 - y0), heading))
                break
            acc += L
        else:
            x1, y1 = points[-1]
            x0, y0 = points[-2]
            heading = math.atan2(y1 - y0, x1 - x0)
            poses.append(Pose(x1, y1, heading))
    return poses


def _clearance_adjust(
    points: list[tuple[float, float]], gmap: GridMap, delta: float = 0.12
) -> list[tuple[float, float]]:
    """Nudge interior path points away from adjacent occupied cells so the
    tracker keeps clearance in doorways; the planned cell path (and its
    cost) is unchanged."""
    out = [points[0]]
    for x, y in points[1:-1] if len(points) > 2 else []:
        cx, cy = gmap.cell_of(x, y)
        ox = oy = 0.0
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = cx + dx, cy + dy
            if not gmap.in_bounds(nx, ny) or gmap.occupancy[ny, nx]:
                ox -= dx
                oy -= dy
        norm = math.hypot(ox, oy)
        if norm > 1e-9:
            nx_, ny_ = x + delta * ox / norm, y + delta * oy / norm
            if not gmap.occupied_at(nx_, ny_):
                x, y = nx_, ny_
        out.append((x, y))
    if len(points) > 1:
        out.append(points[-1])
    return out


def expert_plan(
    gmap: GridMap,
    start: Pose,
    goal_cell: tuple[int, int],
    n: int = 8,
    ds: float = 0.25,
    stop_epsilon: float = 0.05,
) -> Trajectory:
    """Plan from the current pose toward a goal cell and emit the next n
    waypoints at arc-length spacing ds. When the remaining path is shorter
    than stop_epsilon the plan degenerates to a stop (all waypoints at the
    current pose)."""
    start_cell = gmap.cell_of(start.x, start.y)
    cells, _ = plan_cells(gmap, start_cell, goal_cell)
    points = [(start.x, start.y)] + [gmap.cell_center(cx, cy) for cx, cy in cells[1:]]
    points = _clearance_adjust(points, gmap)
    total = sum(
        math.hypot(x1 - x0, y1 - y0) for (x0, y0), (x1, y1) in zip(points[:-1], points[1:])
    )
    if total < stop_epsilon:
        return Trajectory(tuple([Pose(start.x, start.y, start.theta)] * n))
    return Trajectory(tuple(_resample_polyline(points, n, ds)))


def expert_track(
    gmap: GridMap,
    pose: Pose,
    target_pose: Optional[Pose],
    follow_distance: float = 1.5,
    last_seen_cell: Optional[tuple[int, int]] = None,
    n: int = 8,
    ds: float = 0.25,
) -> Trajectory:
    """Plan toward the point trailing the target by follow_distance along
    its heading; when the target is occluded, fall back to a shortest-path
    plan toward its last-seen cell."""
    if target_pose is not None:
        tx = target_pose.x - follow_distance * math.cos(target_pose.theta)
        ty = target_pose.y - follow_distance * math.sin(target_pose.theta)
        goal = gmap.cell_of(tx, ty)
        if not gmap.in_bounds(*goal) or gmap.occupancy[goal[1], goal[0]]:
            goal = gmap.cell_of(target_pose.x, target_pose.y)
        if pose_distance(pose, Pose(tx, ty, 0.0)) < 0.3:
            hold = [Pose(pose.x, pose.y, normalize_angle(math.atan2(
                target_pose.y - pose.y, target_pose.x - pose.x)))] * n
            return Trajectory(tuple(hold))
        return expert_plan(gmap, pose, goal, n=n, ds=ds)
    if last_seen_cell is None:
        raise NoPath("target occluded and no last-seen cell known")
    return expert_plan(gmap, pose, last_seen_cell, n=n, ds=ds)
