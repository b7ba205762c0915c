from .gridmap import GridMap, Room, load_map_text, save_map_text
from .generator import generate_map, MovingTargetScript
from .sensor import Frame, render_observation, PoseInObstacle
from .dynamics import step
from .expert import NoPath, plan_cells, expert_plan, expert_track
from .episodes import EpisodeSpec, StepRecord, EpisodeRecord
from .metrics import MetricsReport, NoEpisodes, evaluate

__all__ = [
    "GridMap",
    "Room",
    "load_map_text",
    "save_map_text",
    "generate_map",
    "MovingTargetScript",
    "Frame",
    "render_observation",
    "PoseInObstacle",
    "step",
    "NoPath",
    "plan_cells",
    "expert_plan",
    "expert_track",
    "EpisodeSpec",
    "StepRecord",
    "EpisodeRecord",
    "MetricsReport",
    "NoEpisodes",
    "evaluate",
]
