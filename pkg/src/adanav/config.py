"""Run configuration: nested dataclasses with pinned defaults, strict YAML
loading (unknown keys are rejected), and round-trip dumping."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Any

import yaml


class UnknownConfigKey(ValueError):
    """Raised when a config file contains a key the schema does not define."""


@dataclass
class MapConfig:
    width: int = 16
    height: int = 16
    cell_size: float = 0.5
    rooms: int = 4
    furniture: int = 6


@dataclass
class SimConfig:
    fov: float = 2.0 * math.pi / 3.0
    range: float = 5.0
    dt: float = 0.1
    substeps: int = 4
    max_steps: int = 40
    success_radius: float = 1.0
    stop_epsilon: float = 0.05
    expert_stop_margin: float = 0.2
    v_max: float = 1.0
    omega_max: float = 1.5
    follow_distance: float = 1.5
    track_near: float = 0.5
    track_far: float = 3.0
    track_fov_frac: float = 0.6
    track_lost_limit: int = 30
    target_speed: float = 0.3
    step_penalty: float = 0.01
    collision_penalty: float = 0.1
    success_reward: float = 1.0


@dataclass
class ObsConfig:
    p: int = 8
    c: int = 16
    d: int = 32
    f_max: float = 1.0
    s: float = 20.0
    h: float = 10.0
    frame_budget: int = 16
    cache_capacity: int = 512
    context_cap: int = 1024


@dataclass
class MemoryConfig:
    cap: int = 32
    merge_cosine: float = 0.95


@dataclass
class ModelConfig:
    hidden: int = 64
    n_waypoints: int = 8
    max_step_length: float = 0.5
    waypoint_ds: float = 0.25


@dataclass
class OptimConfig:
    alpha: float = 0.5
    lam: float = 0.01
    gamma: float = 0.99
    epsilon: float = 0.2
    lr: float = 3e-4
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class RolloutConfig:
    k_stuck: int = 15
    displacement_eps: float = 0.1
    episodes_per_iter: int = 128
    iterations: int = 10
    buffer_naive_cap: int = 512
    buffer_expert_cap: int = 512
    rl_batch: int = 64
    sft_batch: int = 64
    updates_per_iter: int = 30


@dataclass
class ControllerConfig:
    horizon: int = 8
    dt: float = 0.1
    w_pos: float = 1.0
    w_heading: float = 0.1
    w_effort: float = 0.01
    v_max: float = 1.0
    omega_max: float = 1.5
    iterations: int = 30


@dataclass
class DatagenConfig:
    objectnav_episodes: int = 40
    track_episodes: int = 10
    imagenav_episodes: int = 10
    shard_size: int = 5000
    max_frame_summaries: int = 10


@dataclass
class SftConfig:
    steps: int = 1500
    batch: int = 64
    log_every: int = 100


@dataclass
class EvalConfig:
    episodes: int = 200
    suite: str = "objectnav"


@dataclass
class RunConfig:
    seed: int = 1234
    out_dir: str = "out"
    workers: int = 1
    map: MapConfig = field(default_factory=MapConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _apply(obj: Any, data: dict, path: str) -> None:
    valid = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in valid:
            raise UnknownConfigKey(f"unknown config key: {path}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise UnknownConfigKey(f"config section {path}{key} must be a mapping")
            _apply(current, value, f"{path}{key}.")
        else:
            setattr(obj, key, type(current)(value) if current is not None else value)


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise UnknownConfigKey("config file must hold a mapping")
        _apply(cfg, data, "")
    if overrides:
        _apply(cfg, overrides, "")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=False)
