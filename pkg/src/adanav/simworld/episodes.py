"""Episode specifications and per-step/episode records."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np

from ..core import Instruction, Pose, Task
from .expert import plan_cells, path_cost_meters
from .generator import MovingTargetScript
from .gridmap import GridMap


@dataclass
class EpisodeSpec:
    """One navigation task instance. Construction verifies the start cell is
    free and the target is reachable."""

    gmap: GridMap
    start: Pose
    instruction: Instruction
    target: Union[tuple[int, int], MovingTargetScript]
    max_steps: int = 40
    success_radius: float = 1.0
    episode_id: str = "ep"
    goal_pose: Optional[Pose] = None  # ImageNav: pose the goal frame was rendered at
    shortest_path_length: float = field(init=False, default=0.0)

    def __post_init__(self) -> None:
        if self.gmap.occupied_at(self.start.x, self.start.y):
            raise ValueError("start pose is not in free space")
        start_cell = self.gmap.cell_of(self.start.x, self.start.y)
        if isinstance(self.target, MovingTargetScript):
            goal_cell = self.gmap.cell_of(*self.target.points[0])
        else:
            goal_cell = self.target
        _, pair = plan_cells(self.gmap, start_cell, goal_cell)  # raises NoPath if unreachable
        self.shortest_path_length = max(path_cost_meters(pair, self.gmap.cell_size), 1e-6)

    @property
    def task(self) -> Task:
        return self.instruction.task


@dataclass
class StepRecord:
    """Per-step supervision and bookkeeping recorded during a rollout."""

    step: int
    pose: Pose
    context: Any  # ContextSpec; kept loose here to avoid an import cycle
    action: np.ndarray  # flattened ego waypoints, shape (3n,)
    old_log_prob: float
    reward: float
    gate_fired: bool
    gate_label: Optional[int] = None  # 0=off, 1=on (expert-labeled steps)
    think: str = ""
    summary: str = ""
    controller: str = "policy"  # "policy" | "expert"
    collided: bool = False
    tracked: bool = False
    expert_action: Optional[np.ndarray] = None  # flattened ego expert waypoints
    raw_annotation: str = ""  # unparsed annotator output (dataset generation)
    return_to_go: float = 0.0


@dataclass
class EpisodeRecord:
    """Everything needed for metrics and training from one episode."""

    episode_id: str
    task: Task
    steps: list[StepRecord]
    success: bool
    agent_path_length: float
    shortest_path_length: float
    collisions: int
    tracked_steps: int
    source: str = "naive"  # "naive" | "expert_segment" | "dataset"
    takeover_step: Optional[int] = None
    room_sequence: list[Optional[str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.agent_path_length < 0:
            raise ValueError("agent_path_length must be >= 0")
        if self.shortest_path_length <= 0:
            raise ValueError("shortest_path_length must be > 0")
        if self.tracked_steps > len(self.steps):
            raise ValueError("tracked_steps cannot exceed step count")

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def revisit_fraction(self) -> float:
        """Fraction of steps spent inside a room that was visited earlier and
        already exited at least once."""
        if not self.room_sequence:
            return 0.0
        exited: set[str] = set()
        current: Optional[str] = None
        revisits = 0
        for room in self.room_sequence:
            if room != current:
                if current is not None:
                    exited.add(current)
                current = room
            if room is not None and room in exited:
                revisits += 1
        return revisits / len(self.room_sequence)
