"""Receding-horizon trajectory tracking for the unicycle model.

First-order shooting: gradient descent through the rolled-out dynamics with
a backtracking step size (cost never increases across iterations) and
projection of every command into the velocity bounds. Deterministic: zero
initialization and a fixed iteration budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import Pose, Trajectory, VelocityCommand, normalize_angle, pose_distance
from .simworld.dynamics import step as sim_step
from .simworld.gridmap import GridMap


class TrackingCollision(RuntimeError):
    """Raised when a closed-loop tracking rollout hits an obstacle."""


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 8
    dt: float = 0.1
    w_pos: float = 1.0
    w_heading: float = 0.1
    w_effort: float = 0.01
    v_max: float = 1.0
    omega_max: float = 1.5
    iterations: int = 30
    allow_reverse: bool = False  # reversing toward rear waypoints pins robots against walls

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.w_pos, self.w_heading, self.w_effort) < 0:
            raise ValueError("weights must be non-negative")
        if self.v_max <= 0 or self.omega_max <= 0 or self.dt <= 0:
            raise ValueError("bounds and dt must be positive")


def _reference_window(reference: Trajectory, horizon: int) -> list[tuple[float, float, float]]:
    ref = [(p.x, p.y, p.theta) for p in reference.waypoints[:horizon]]
    while len(ref) < horizon:
        ref.append(ref[-1])
    return ref


def _rollout_cost(cfg: MpcConfig, pose: Pose, u: list[float], ref) -> float:
    x, y, th = pose.x, pose.y, pose.theta
    cost = 0.0
    for h in range(cfg.horizon):
        v, w = u[2 * h], u[2 * h + 1]
        x += v * math.cos(th) * cfg.dt
        y += v * math.sin(th) * cfg.dt
        th += w * cfg.dt
        rx, ry, rth = ref[h]
        cost += cfg.w_pos * ((x - rx) ** 2 + (y - ry) ** 2)
        cost += cfg.w_heading * (1.0 - math.cos(th - rth))
        cost += cfg.w_effort * (v * v + w * w)
    return cost


def _gradient(cfg: MpcConfig, pose: Pose, u: list[float], ref: list[Pose]) -> list[float]:
    """Adjoint sweep through the Euler rollout."""
    H = cfg.horizon
    xs = [pose.x]
    ys = [pose.y]
    ths = [pose.theta]
    for h in range(H):
        v, w = u[2 * h], u[2 * h + 1]
        xs.append(xs[-1] + v * math.cos(ths[-1]) * cfg.dt)
        ys.append(ys[-1] + v * math.sin(ths[-1]) * cfg.dt)
        ths.append(ths[-1] + w * cfg.dt)
    grad = [0.0] * (2 * H)
    lx = ly = lth = 0.0  # adjoint of the state after step h
    for h in range(H - 1, -1, -1):
        v, w = u[2 * h], u[2 * h + 1]
        rx, ry, rth = ref[h]
        cx = 2.0 * cfg.w_pos * (xs[h + 1] - rx) + lx
        cy = 2.0 * cfg.w_pos * (ys[h + 1] - ry) + ly
        cth = cfg.w_heading * math.sin(ths[h + 1] - rth) + lth
        cos_th, sin_th = math.cos(ths[h]), math.sin(ths[h])
        grad[2 * h] = 2.0 * cfg.w_effort * v + cfg.dt * (cx * cos_th + cy * sin_th)
        grad[2 * h + 1] = 2.0 * cfg.w_effort * w + cfg.dt * cth
        lx = cx
        ly = cy
        lth = cth + cfg.dt * v * (cy * cos_th - cx * sin_th)
    return grad


def _project(cfg: MpcConfig, u: list[float]) -> list[float]:
    v_min = -cfg.v_max if cfg.allow_reverse else 0.0
    out = list(u)
    for h in range(cfg.horizon):
        out[2 * h] = min(max(out[2 * h], v_min), cfg.v_max)
        out[2 * h + 1] = min(max(out[2 * h + 1], -cfg.omega_max), cfg.omega_max)
    return out


def solve(cfg: MpcConfig, pose: Pose, reference: Trajectory) -> tuple[list[float], list[float]]:
    """Optimize the command sequence; returns (commands, per-iteration cost
    history). The cost history is non-increasing."""
    ref = _reference_window(reference, cfg.horizon)
    u = [0.0] * (2 * cfg.horizon)
    cost = _rollout_cost(cfg, pose, u, ref)
    history = [cost]
    step_start = 64.0
    for _ in range(cfg.iterations):
        g = _gradient(cfg, pose, u, ref)
        # warm-start the backtracking near the last accepted step size
        step_size = step_start
        improved = False
        while step_size > 1e-6:
            cand = _project(cfg, [ui - step_size * gi for ui, gi in zip(u, g)])
            cand_cost = _rollout_cost(cfg, pose, cand, ref)
            if cand_cost <= cost:
                improved = cand_cost < cost - 1e-12
                u, cost = cand, cand_cost
                step_start = min(64.0, step_size * 4.0)
                break
            step_size *= 0.5
        history.append(cost)
        if not improved:
            break
    return u, history


def track(cfg: MpcConfig, pose: Pose, reference: Trajectory) -> VelocityCommand:
    """First command of the optimized sequence, guaranteed within bounds."""
    if len(reference) < 1:
        raise ValueError("reference trajectory is empty")
    u, _ = solve(cfg, pose, reference)
    return VelocityCommand(u[0], u[1]).clamped(cfg.v_max, cfg.omega_max)


def receding_reference(
    reference: Trajectory, pose: Pose, horizon: int, spacing: float = 0.1
) -> Trajectory:
    """Per-tick reference window: project the pose onto the reference
    polyline, then step along it at `spacing` (one tick of travel at
    cruise speed) so every horizon point is reachable and the tracker
    follows the path geometry through narrow passages."""
    pts = [(p.x, p.y) for p in reference.waypoints]
    seg_vecs = []
    seg_lens = []
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        seg_vecs.append((x1 - x0, y1 - y0))
        seg_lens.append(math.hypot(x1 - x0, y1 - y0))
    total = sum(seg_lens)

    # arc-length of the closest point on the polyline
    best_d = pose_distance(pose, reference.waypoints[0])
    best_s = 0.0
    acc = 0.0
    for (x0, y0), (dx, dy), L in zip(pts[:-1], seg_vecs, seg_lens):
        if L > 1e-12:
            t = max(0.0, min(1.0, ((pose.x - x0) * dx + (pose.y - y0) * dy) / (L * L)))
            d = math.hypot(pose.x - (x0 + t * dx), pose.y - (y0 + t * dy))
            if d < best_d:
                best_d, best_s = d, acc + t * L
        acc += L

    def point_at(s: float) -> Pose:
        if total < 1e-12:
            return reference.waypoints[-1]
        s = min(s, total)
        acc = 0.0
        for (x0, y0), (dx, dy), L in zip(pts[:-1], seg_vecs, seg_lens):
            if L > 1e-12 and acc + L >= s - 1e-12:
                t = (s - acc) / L
                return Pose(x0 + t * dx, y0 + t * dy, math.atan2(dy, dx))
            acc += L
        return reference.waypoints[-1]

    window = tuple(point_at(best_s + spacing * (h + 1)) for h in range(horizon))
    return Trajectory(window)


def track_episode_error(
    cfg: MpcConfig,
    start: Pose,
    reference: Trajectory,
    gmap: GridMap,
    max_ticks: int = 400,
    settle_dist: float = 0.0,
) -> float:
    """Closed-loop rollout applying track() every tick; returns the maximum
    distance to the reference polyline, measured once the robot has
    traveled settle_dist."""
    pose = start
    traveled = 0.0
    max_err = 0.0
    goal = reference.waypoints[-1]
    for _ in range(max_ticks):
        window = receding_reference(reference, pose, cfg.horizon, cfg.v_max * cfg.dt)
        cmd = track(cfg, pose, window)
        new_pose, collided = sim_step(gmap, pose, cmd, cfg.dt)
        if collided:
            raise TrackingCollision("tracking rollout hit an obstacle")
        traveled += pose_distance(pose, new_pose)
        pose = new_pose
        if traveled >= settle_dist:
            max_err = max(max_err, _distance_to_polyline(pose, reference))
        if pose_distance(pose, goal) < 0.05:
            break
    return max_err


def _distance_to_polyline(pose: Pose, reference: Trajectory) -> float:
    pts = [(p.x, p.y) for p in reference.waypoints]
    best = math.hypot(pose.x - pts[0][0], pose.y - pts[0][1])
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        if L2 < 1e-12:
            d = math.hypot(pose.x - x0, pose.y - y0)
        else:
            t = max(0.0, min(1.0, ((pose.x - x0) * dx + (pose.y - y0) * dy) / L2))
            d = math.hypot(pose.x - (x0 + t * dx), pose.y - (y0 + t * dy))
        best = min(best, d)
    return best
