"""Egocentric observation rendering.

The toy feature extractor: casts P ray sectors across the field of view and
bins each sector radially into P range bins, yielding a P x P x C feature
grid. Channels encode, per ray/cell: the ray's obstacle hit distance, a
free-space flag, a target-visibility flag, bin range, ego bearing, world
heading, and a pooled semantic one-hot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core import Pose, normalize_angle
from .gridmap import CATEGORY_NAMES, SEMANTIC_BUCKETS, GridMap

SUBRAYS = 5  # sub-rays per sector; semantics and visibility pool over them

CH_HIT_DIST = 0
CH_FREE = 1
CH_TARGET = 2
CH_RANGE = 3
CH_BEARING_SIN = 4
CH_BEARING_COS = 5
CH_HEADING_SIN = 6
CH_HEADING_COS = 7
CH_SEMANTIC = 8  # ..8+SEMANTIC_BUCKETS
N_CHANNELS = CH_SEMANTIC + SEMANTIC_BUCKETS


class PoseInObstacle(ValueError):
    """Raised when an observation is requested from inside an occupied cell."""


@dataclass
class Frame:
    """One rendered observation: the feature grid plus the structured
    metadata the template reasoner consumes."""

    grid: np.ndarray  # (P, P, N_CHANNELS) float32
    pose: Pose
    room_id: Optional[str]
    ray_bearings: np.ndarray  # (P,) ego bearings of ray centers
    ray_distances: np.ndarray  # (P,) obstacle hit distance per center ray
    visible_categories: tuple[str, ...]
    target_visible: bool
    target_bearing: Optional[float]  # ego bearing, radians
    target_range: Optional[float]  # meters


_OFFSET_CACHE: dict = {}


def _ray_offsets(fov: float, p: int):
    key = (fov, p)
    if key not in _OFFSET_CACHE:
        centers = fov * ((np.arange(p) + 0.5) / p - 0.5)
        sub = fov / p * ((np.arange(SUBRAYS) + 0.5) / SUBRAYS - 0.5)
        _OFFSET_CACHE[key] = (centers, (centers[:, None] + sub[None, :]).ravel())
    return _OFFSET_CACHE[key]


def render_observation(
    gmap: GridMap,
    pose: Pose,
    fov: float = 2.0 * math.pi / 3.0,
    max_range: float = 5.0,
    p: int = 8,
    target_cell: Optional[tuple[int, int]] = None,
    target_pose: Optional[Pose] = None,
) -> Frame:
    """Render the P x P x C feature grid at `pose`. Deterministic in its
    inputs. `target_cell` marks a static goal object cell; `target_pose`
    marks a moving target in free space."""
    if gmap.occupied_at(pose.x, pose.y):
        raise PoseInObstacle(f"pose ({pose.x:.2f}, {pose.y:.2f}) is inside an obstacle")

    centers, offsets = _ray_offsets(fov, p)
    ds = gmap.cell_size / 2.0
    n_samples = int(math.ceil(max_range / ds))
    dists = (np.arange(n_samples) + 1.0) * ds  # (S,)

    angles = pose.theta + offsets  # (P*M,)
    dirx, diry = np.cos(angles), np.sin(angles)
    px = pose.x + dirx[:, None] * dists[None, :]  # (P*M, S)
    py = pose.y + diry[:, None] * dists[None, :]
    cx = np.clip((px // gmap.cell_size).astype(np.int64), 0, gmap.width - 1)
    cy = np.clip((py // gmap.cell_size).astype(np.int64), 0, gmap.height - 1)
    occ = gmap.occupancy[cy, cx]  # (P*M, S)
    sem = gmap.semantics[cy, cx]

    any_hit = occ.any(axis=1)
    first_hit = np.where(any_hit, occ.argmax(axis=1), n_samples)  # sample index
    hit_dist = np.where(any_hit, dists[np.minimum(first_hit, n_samples - 1)], max_range)
    sample_idx = np.arange(n_samples)[None, :]
    before_hit = sample_idx < first_hit[:, None]
    at_hit = sample_idx == first_hit[:, None]

    target_seen = np.zeros_like(occ, dtype=bool)
    if target_cell is not None:
        target_seen = at_hit & (cx == target_cell[0]) & (cy == target_cell[1])
    if target_pose is not None:
        near = (px - target_pose.x) ** 2 + (py - target_pose.y) ** 2 <= (0.75 * gmap.cell_size) ** 2
        target_seen |= near & before_hit

    m = SUBRAYS
    # radial bins partition [0, max_range) evenly
    bins = np.minimum((dists / (max_range / p)).astype(np.int64), p - 1)[None, :]

    grid = np.zeros((p, p, N_CHANNELS), dtype=np.float32)
    center_rows = np.arange(p) * m + m // 2
    grid[:, :, CH_HIT_DIST] = hit_dist[center_rows][:, None]
    grid[:, :, CH_RANGE] = ((np.arange(p) + 0.5) / p)[None, :]
    grid[:, :, CH_BEARING_SIN] = np.sin(centers)[:, None]
    grid[:, :, CH_BEARING_COS] = np.cos(centers)[:, None]
    grid[:, :, CH_HEADING_SIN] = math.sin(pose.theta)
    grid[:, :, CH_HEADING_COS] = math.cos(pose.theta)

    ray_of = np.repeat(np.arange(p), m)
    flat_bins = np.broadcast_to(bins, occ.shape)
    free_rows, free_cols = np.nonzero(before_hit)
    grid[ray_of[free_rows], flat_bins[free_rows, free_cols], CH_FREE] = 1.0
    tgt_rows, tgt_cols = np.nonzero(target_seen)
    grid[ray_of[tgt_rows], flat_bins[tgt_rows, tgt_cols], CH_TARGET] = 1.0
    hit_rows, hit_cols = np.nonzero(at_hit & (sem > 0))
    sem_bucket = (sem[hit_rows, hit_cols] - 1) % SEMANTIC_BUCKETS
    grid[ray_of[hit_rows], flat_bins[hit_rows, hit_cols], CH_SEMANTIC + sem_bucket] = 1.0

    visible = sorted({CATEGORY_NAMES[(int(c) - 1) % len(CATEGORY_NAMES)] for c in sem[at_hit & (sem > 0)]})

    target_visible = bool(target_seen.any())
    target_bearing = None
    target_range = None
    if target_visible:
        rows, cols = np.nonzero(target_seen)
        j = int(np.argmin(dists[cols]))
        target_bearing = float(offsets[rows[j]])
        target_range = float(dists[cols[j]])

    return Frame(
        grid=grid,
        pose=pose,
        room_id=gmap.room_at(pose.x, pose.y),
        ray_bearings=centers.copy(),
        ray_distances=hit_dist[center_rows].copy(),
        visible_categories=tuple(visible),
        target_visible=target_visible,
        target_bearing=target_bearing,
        target_range=target_range,
    )
