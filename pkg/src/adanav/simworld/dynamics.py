"""Unicycle forward dynamics with swept collision clamping."""

from __future__ import annotations

import math

from ..core import Pose, VelocityCommand, normalize_angle
from .gridmap import GridMap


def step(gmap: GridMap, pose: Pose, cmd: VelocityCommand, dt: float) -> tuple[Pose, bool]:
    """Euler unicycle step: x += v cos(theta) dt, y += v sin(theta) dt,
    theta += omega dt. If the translation sweep crosses an occupied cell the
    position is clamped just before the boundary and collided=True; rotation
    still applies."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    nx = pose.x + cmd.v * math.cos(pose.theta) * dt
    ny = pose.y + cmd.v * math.sin(pose.theta) * dt
    ntheta = normalize_angle(pose.theta + cmd.omega * dt)

    dist = math.hypot(nx - pose.x, ny - pose.y)
    if dist < 1e-12:
        return Pose(pose.x, pose.y, ntheta), False

    # march the segment; on first occupied sample, bisect the boundary
    n_samples = max(2, int(math.ceil(dist / (0.1 * gmap.cell_size))))
    t_free = 0.0
    t_hit = None
    for i in range(1, n_samples + 1):
        t = i / n_samples
        if gmap.occupied_at(pose.x + t * (nx - pose.x), pose.y + t * (ny - pose.y)):
            t_hit = t
            break
        t_free = t
    if t_hit is None:
        return Pose(nx, ny, ntheta), False

    for _ in range(20):
        mid = 0.5 * (t_free + t_hit)
        if gmap.occupied_at(pose.x + mid * (nx - pose.x), pose.y + mid * (ny - pose.y)):
            t_hit = mid
        else:
            t_free = mid
    clamped = Pose(pose.x + t_free * (nx - pose.x), pose.y + t_free * (ny - pose.y), ntheta)
    return clamped, True
