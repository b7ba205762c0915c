"""Closed-loop episode engine.

One policy step = render -> encode context -> forward -> (optional gated
reasoning + memory update) -> emit a waypoint trajectory -> track it with
the MPC controller for a fixed number of simulator ticks. The same loop
serves on-policy rollouts, deterministic evaluation, expert-guided rollouts
with stuck-triggered takeover, and expert-driven dataset generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import adacot, controller, memory as vmem, obs, policy
from .adacot import CotOutput, MalformedCot
from .core import Pose, Rng, Task, Trajectory, VelocityCommand, normalize_angle, pose_distance
from .simworld.dynamics import step as sim_step
from .simworld.episodes import EpisodeRecord, EpisodeSpec, StepRecord
from .simworld.expert import NoPath, expert_plan, expert_track
from .simworld.generator import MovingTargetScript
from .simworld.sensor import Frame, render_observation


@dataclass
class StuckDetector:
    """Fires when net displacement over the last `window` steps falls below
    `displacement_eps`; needs window+1 poses before it can fire."""

    window: int = 15
    displacement_eps: float = 0.1
    history: list[Pose] = field(default_factory=list)

    def add(self, pose: Pose) -> None:
        self.history.append(pose)

    def fires(self) -> bool:
        if len(self.history) < self.window + 1:
            return False
        return pose_distance(self.history[-1], self.history[-self.window - 1]) < self.displacement_eps


@dataclass
class EpisodeSetup:
    spec: EpisodeSpec
    goal_cell: Optional[tuple[int, int]] = None
    script: Optional[MovingTargetScript] = None
    goal_grid: Optional[np.ndarray] = None  # ImageNav goal features


# Labeler: (expert ego trajectory, frame, step index, takeover_now) -> 0/1
Labeler = Callable[[Trajectory, Frame, int, bool], int]
# Annotator hook: (frame, memory, pose, expert direction word) -> raw text
AnnotateFn = Callable[[Frame, vmem.MemoryStore, Pose, Optional[str]], str]


def expert_direction_word(expert_ego: Trajectory, min_disp: float = 0.1) -> Optional[str]:
    """Ego bucket of the expert's first meaningful displacement; None for a
    stop trajectory."""
    for wp in expert_ego.waypoints:
        if math.hypot(wp.x, wp.y) >= min_disp:
            return adacot.bucket_of(math.atan2(wp.y, wp.x))
    return None


def _steps_needed(dist_m: float, progress_per_step: float) -> int:
    """Budget the expert needs to finish from dist_m away; deliberately
    generous (room maps force detours)."""
    return int(math.ceil(1.5 * dist_m / max(progress_per_step, 1e-6))) + 3


def run_episode(
    cfg,
    params: Optional[policy.PolicyParams],
    setup: EpisodeSetup,
    rng: Rng,
    policy_mode: str = "sample",  # sample | mean | expert
    gate_mode: str = "adaptive",  # adaptive | on | off | label
    memory_enabled: bool = True,
    detector: Optional[StuckDetector] = None,
    labeler: Optional[Labeler] = None,
    annotate_fn: Optional[AnnotateFn] = None,
    source: str = "naive",
) -> EpisodeRecord:
    spec = setup.spec
    gmap = spec.gmap
    instr = spec.instruction
    n = cfg.model.n_waypoints
    sim = cfg.sim
    mpc = controller.MpcConfig(
        horizon=cfg.controller.horizon,
        dt=cfg.controller.dt,
        w_pos=cfg.controller.w_pos,
        w_heading=cfg.controller.w_heading,
        w_effort=cfg.controller.w_effort,
        v_max=cfg.controller.v_max,
        omega_max=cfg.controller.omega_max,
        iterations=cfg.controller.iterations,
    )

    pose = spec.start
    cache = obs.VisualCache(cfg.obs.cache_capacity)
    mem = vmem.MemoryStore(cap=cfg.memory.cap, merge_cosine=cfg.memory.merge_cosine)
    instr_words = obs.instruction_words(instr)
    weights_np = params.arrays if params is not None else None

    steps: list[StepRecord] = []
    room_seq: list[Optional[str]] = []
    agent_path = 0.0
    collision_steps = 0
    tracked_steps = 0
    lost_streak = 0
    max_lost_streak = 0
    sim_time = 0.0
    takeover_step: Optional[int] = None
    taken_over = False
    success = False
    last_seen_cell: Optional[tuple[int, int]] = None
    last_seen_bearing: Optional[float] = None
    target_point: Optional[tuple[float, float]] = None
    if setup.goal_cell is not None:
        target_point = gmap.cell_center(*setup.goal_cell)
    progress_per_step = sim.v_max * sim.dt * sim.substeps

    for t in range(spec.max_steps):
        entry_pose = pose
        target_pose = setup.script.pose_at(sim_time) if setup.script is not None else None
        frame = render_observation(
            gmap, pose, sim.fov, sim.range, cfg.obs.p,
            target_cell=setup.goal_cell if instr.task is Task.OBJECT_NAV else None,
            target_pose=target_pose,
        )
        if frame.target_visible:
            last_seen_bearing = frame.target_bearing
            if target_pose is not None:
                last_seen_cell = gmap.cell_of(target_pose.x, target_pose.y)
            elif setup.goal_cell is not None:
                last_seen_cell = setup.goal_cell
        elif last_seen_cell is not None:
            cx, cy = gmap.cell_center(*last_seen_cell)
            last_seen_bearing = normalize_angle(math.atan2(cy - pose.y, cx - pose.x) - pose.theta)

        cache.add(obs.FrameFeatures(t, frame.grid))
        kept = obs.select_frames(cache, t, cfg.obs.f_max, cfg.obs.s, cfg.obs.frame_budget)
        frames_ctx = tuple(
            (obs.grid_pool(cache.get(ts), t - ts, cfg.obs.h).grid, float(t - ts)) for ts in kept
        )
        mem_text = vmem.serialize(mem) if memory_enabled else ""
        ctx = obs.ContextSpec(instr_words, mem_text, frames_ctx, setup.goal_grid, "")

        dist = None
        gate_logits = np.zeros(2)
        if params is not None:
            _, gate_logits, dist = policy.forward(params, ctx, cfg.obs.context_cap)

        # -- expert takeover bookkeeping ----------------------------------
        takeover_now = False
        if detector is not None and not taken_over:
            detector.add(pose)
            fire_now = detector.fires()
            if not fire_now and target_point is not None:
                need = _steps_needed(
                    pose_distance(pose, Pose(*target_point, 0.0)), progress_per_step
                )
                fire_now = (spec.max_steps - t) <= need
            if fire_now:
                taken_over = True
                takeover_now = True
                takeover_step = t

        expert_mode = policy_mode == "expert" or taken_over
        expert_ego: Optional[Trajectory] = None
        if expert_mode:
            try:
                if instr.task is Task.TRACK:
                    expert_world = expert_track(
                        gmap, pose, target_pose if frame.target_visible else None,
                        sim.follow_distance, last_seen_cell=last_seen_cell,
                        n=n, ds=cfg.model.waypoint_ds,
                    )
                else:
                    expert_world = expert_plan(
                        gmap, pose, setup.goal_cell, n=n, ds=cfg.model.waypoint_ds,
                        stop_epsilon=sim.expert_stop_margin,
                    )
            except NoPath:
                break  # episode ends as a failure; caller filters it out
            expert_ego = policy.to_ego(expert_world, pose)

        # -- gate ------------------------------------------------------------
        if gate_mode == "adaptive":
            fired = bool(gate_logits[1] > gate_logits[0])
        elif gate_mode == "on":
            fired = True
        elif gate_mode == "off":
            fired = False
        elif gate_mode == "label":
            assert labeler is not None and expert_ego is not None
            fired = bool(labeler(expert_ego, frame, t, takeover_now))
        else:
            raise ValueError(f"unknown gate mode {gate_mode}")

        gate_label: Optional[int] = None
        if expert_mode and labeler is not None and expert_ego is not None:
            gate_label = int(fired) if gate_mode == "label" else labeler(expert_ego, frame, t, takeover_now)

        think_text = ""
        summary_text = ""
        raw_annotation = ""
        if fired:
            cot: Optional[CotOutput] = None
            if annotate_fn is not None and expert_mode:
                direction = expert_direction_word(expert_ego) if expert_ego is not None else None
                raw_annotation = annotate_fn(frame, mem, pose, direction)
                try:
                    cot = adacot.parse_tags(raw_annotation)
                except MalformedCot:
                    cot = None  # flows to the dataset filter; memory untouched
            else:
                cot = adacot.reason(instr, frame, mem, pose, last_seen_bearing=last_seen_bearing)
            if cot is not None:
                think_text, summary_text = cot.think, cot.summary
                if memory_enabled:
                    key = (
                        obs.project(weights_np, frame.grid).mean(axis=0)
                        if weights_np is not None
                        else np.zeros(cfg.obs.d)
                    )
                    mem = vmem.update(mem, cot.summary, key, t, adjacency=gmap.adjacency)
                ctx = obs.ContextSpec(
                    instr_words, mem_text, frames_ctx, setup.goal_grid, adacot.serialize_cot(cot)
                )
                if params is not None:
                    _, _, dist = policy.forward(params, ctx, cfg.obs.context_cap)

        # -- action ----------------------------------------------------------
        if expert_mode:
            action = policy.trajectory_to_action(expert_ego)
        elif policy_mode == "sample":
            action = policy.sample(dist, rng)
        elif policy_mode == "mean":
            action = dist.mu_array().copy()
        else:
            raise ValueError(f"unknown policy mode {policy_mode}")
        old_lp = policy.log_prob(dist, action) if dist is not None else 0.0

        traj_ego = policy.action_to_trajectory(action, n, cfg.model.max_step_length)
        is_stop = traj_ego.total_displacement() < sim.stop_epsilon

        def record(reward: float, collided: bool, tracked: bool) -> StepRecord:
            return StepRecord(
                step=t, pose=entry_pose, context=ctx,
                action=np.asarray(action, dtype=np.float64),
                old_log_prob=old_lp, reward=reward,
                gate_fired=fired, gate_label=gate_label,
                think=think_text, summary=summary_text,
                controller="expert" if expert_mode else "policy",
                collided=collided, tracked=tracked,
                expert_action=policy.trajectory_to_action(expert_ego) if expert_ego is not None else None,
                raw_annotation=raw_annotation,
            )

        if is_stop and instr.task is not Task.TRACK:
            if target_point is not None:
                success = pose_distance(pose, Pose(*target_point, 0.0)) <= spec.success_radius
            steps.append(record(-sim.step_penalty + (sim.success_reward if success else 0.0), False, False))
            room_seq.append(frame.room_id)
            break

        traj_world = policy.to_world(traj_ego, pose)
        step_collided = False
        recovering = False
        for _ in range(sim.substeps):
            window = controller.receding_reference(traj_world, pose, mpc.horizon, sim.v_max * sim.dt)
            wp = window.waypoints[0]
            bearing = normalize_angle(math.atan2(wp.y - pose.y, wp.x - pose.x) - pose.theta)
            if recovering and abs(bearing) > 0.3:
                # pressed against a wall the tracker cannot see: rotate in
                # place toward the reference before driving again
                cmd = VelocityCommand(0.0, 2.0 * bearing).clamped(sim.v_max, sim.omega_max)
            else:
                recovering = False
                cmd = controller.track(mpc, pose, window)
            new_pose, collided = sim_step(gmap, pose, cmd, sim.dt)
            recovering = recovering or collided
            agent_path += pose_distance(pose, new_pose)
            pose = new_pose
            sim_time += sim.dt
            step_collided = step_collided or collided
        if step_collided:
            collision_steps += 1

        tracked = False
        if instr.task is Task.TRACK and setup.script is not None:
            tgt = setup.script.pose_at(sim_time)
            d = pose_distance(pose, tgt)
            bearing = normalize_angle(math.atan2(tgt.y - pose.y, tgt.x - pose.x) - pose.theta)
            tracked = sim.track_near <= d <= sim.track_far and abs(bearing) <= sim.fov / 2.0
            if tracked:
                tracked_steps += 1
                lost_streak = 0
            else:
                lost_streak += 1
                max_lost_streak = max(max_lost_streak, lost_streak)

        steps.append(record(
            -sim.step_penalty - (sim.collision_penalty if step_collided else 0.0),
            step_collided, tracked,
        ))
        room_seq.append(gmap.room_at(pose.x, pose.y))

    if instr.task is Task.TRACK and steps:
        frac = tracked_steps / len(steps)
        success = frac >= sim.track_fov_frac and max_lost_streak <= sim.track_lost_limit
        if success:
            steps[-1].reward += sim.success_reward

    return EpisodeRecord(
        episode_id=spec.episode_id,
        task=instr.task,
        steps=steps,
        success=success,
        agent_path_length=agent_path,
        shortest_path_length=spec.shortest_path_length,
        collisions=collision_steps,
        tracked_steps=tracked_steps,
        source=source,
        takeover_step=takeover_step,
        room_sequence=room_seq,
    )
