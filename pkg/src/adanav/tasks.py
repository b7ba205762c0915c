"""Episode factories: procedural maps paired with task instructions."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .config import RunConfig
from .core import Instruction, Pose, Rng, Task
from .driver import EpisodeSetup
from .simworld.episodes import EpisodeSpec
from .simworld.expert import NoPath
from .simworld.generator import generate_map, make_track_script
from .simworld.gridmap import CATEGORY_NAMES, GridMap, category_id
from .simworld.sensor import render_observation


def _random_free_pose(rng: Rng, gmap: GridMap, min_dist_from: Optional[tuple[float, float]] = None,
                      min_dist: float = 0.0) -> Pose:
    cells = gmap.free_cells()
    for _ in range(200):
        cx, cy = cells[int(rng.integers(0, len(cells)))]
        x, y = gmap.cell_center(cx, cy)
        if min_dist_from is not None and math.hypot(x - min_dist_from[0], y - min_dist_from[1]) < min_dist:
            continue
        theta = float(rng.uniform(-math.pi, math.pi))
        return Pose(x, y, theta)
    raise RuntimeError("no valid free pose found")


def make_setup(cfg: RunConfig, rng: Rng, task: Task, episode_id: str = "ep") -> EpisodeSetup:
    """Build a reachable episode. Regenerates the layout on the rare draws
    where the planner rejects the start/goal pair."""
    for attempt in range(20):
        gen_rng = rng.child("map", attempt)
        try:
            if task is Task.OBJECT_NAV:
                category = CATEGORY_NAMES[int(gen_rng.integers(0, len(CATEGORY_NAMES)))]
                gmap = generate_map(
                    gen_rng, cfg.map.width, cfg.map.height, cfg.map.cell_size,
                    cfg.map.rooms, cfg.map.furniture, goal_category=category,
                )
                goal_cell = gmap.find_category_cells(category_id(category))[0]
                goal_xy = gmap.cell_center(*goal_cell)
                start = _random_free_pose(
                    gen_rng, gmap, goal_xy, min_dist=0.35 * cfg.map.width * cfg.map.cell_size
                )
                spec = EpisodeSpec(
                    gmap, start, Instruction(Task.OBJECT_NAV, category), goal_cell,
                    cfg.sim.max_steps, cfg.sim.success_radius, episode_id,
                )
                return EpisodeSetup(spec, goal_cell=goal_cell)

            if task is Task.TRACK:
                gmap = generate_map(
                    gen_rng, cfg.map.width, cfg.map.height, cfg.map.cell_size,
                    cfg.map.rooms, cfg.map.furniture,
                )
                script = make_track_script(gen_rng, gmap, cfg.sim.target_speed)
                tx, ty = script.points[0]
                start = None
                cells = gmap.free_cells()
                for _ in range(200):
                    cx, cy = cells[int(gen_rng.integers(0, len(cells)))]
                    x, y = gmap.cell_center(cx, cy)
                    d = math.hypot(x - tx, y - ty)
                    if cfg.sim.track_near + 0.3 <= d <= cfg.sim.track_far - 0.5:
                        start = Pose(x, y, math.atan2(ty - y, tx - x))
                        break
                if start is None:
                    continue
                spec = EpisodeSpec(
                    gmap, start, Instruction(Task.TRACK, "person"), script,
                    cfg.sim.max_steps, cfg.sim.success_radius, episode_id,
                )
                return EpisodeSetup(spec, script=script)

            # ImageNav
            gmap = generate_map(
                gen_rng, cfg.map.width, cfg.map.height, cfg.map.cell_size,
                cfg.map.rooms, cfg.map.furniture,
            )
            goal_pose = _random_free_pose(gen_rng, gmap)
            start = _random_free_pose(
                gen_rng, gmap, (goal_pose.x, goal_pose.y),
                min_dist=0.35 * cfg.map.width * cfg.map.cell_size,
            )
            goal_frame = render_observation(gmap, goal_pose, cfg.sim.fov, cfg.sim.range, cfg.obs.p)
            goal_cell = gmap.cell_of(goal_pose.x, goal_pose.y)
            spec = EpisodeSpec(
                gmap, start, Instruction(Task.IMAGE_NAV, goal_frame.grid), goal_cell,
                cfg.sim.max_steps, cfg.sim.success_radius, episode_id, goal_pose=goal_pose,
            )
            return EpisodeSetup(spec, goal_cell=goal_cell, goal_grid=goal_frame.grid)
        except (NoPath, ValueError, RuntimeError):
            continue
    raise RuntimeError(f"failed to build a reachable {task.value} episode after 20 attempts")
