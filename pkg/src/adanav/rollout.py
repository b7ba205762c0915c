"""Online data collection: naive and expert-guided rollouts, the hybrid
buffer with its success filter, and update-batch sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import datagen, optim, policy
from .config import RunConfig
from .core import Pose, Rng
from .driver import EpisodeSetup, StuckDetector, run_episode
from .simworld.episodes import EpisodeRecord, StepRecord


class EmptyBuffer(RuntimeError):
    """Raised when update batches are requested from a fully empty buffer."""


@dataclass
class HybridBuffer:
    """Episode storage split by provenance: naive entries are all successful
    on-policy episodes; expert entries carry a takeover segment."""

    naive_cap: int = 512
    expert_cap: int = 512
    naive: list[EpisodeRecord] = field(default_factory=list)
    expert: list[EpisodeRecord] = field(default_factory=list)
    inserted: dict = field(default_factory=lambda: {"naive": 0, "expert_segment": 0})

    def __len__(self) -> int:
        return len(self.naive) + len(self.expert)


def _attach_returns(record: EpisodeRecord, gamma: float) -> None:
    acc = 0.0
    for step in reversed(record.steps):
        acc = step.reward + gamma * acc
        step.return_to_go = acc


def buffer_insert(buffer: HybridBuffer, record: EpisodeRecord, gamma: float = 0.99) -> HybridBuffer:
    """Naive records enter only when successful; expert-guided records enter
    when their takeover segment exists and the episode succeeded. Eviction
    is FIFO within each tag."""
    if record.source == "naive":
        if record.success and record.steps:
            _attach_returns(record, gamma)
            buffer.naive.append(record)
            buffer.inserted["naive"] += 1
            if len(buffer.naive) > buffer.naive_cap:
                buffer.naive.pop(0)
    elif record.source == "expert_segment":
        if record.success and record.steps and record.takeover_step is not None:
            _attach_returns(record, gamma)
            buffer.expert.append(record)
            buffer.inserted["expert_segment"] += 1
            if len(buffer.expert) > buffer.expert_cap:
                buffer.expert.pop(0)
    else:
        raise ValueError(f"unknown record source {record.source}")
    return buffer


def run_naive(
    cfg: RunConfig, params: policy.PolicyParams, setup: EpisodeSetup, rng: Rng
) -> EpisodeRecord:
    """On-policy episode: the policy explores by sampling its own actions."""
    return run_episode(
        cfg, params, setup, rng,
        policy_mode="sample", gate_mode="adaptive", memory_enabled=True,
        source="naive",
    )


def run_expert_guided(
    cfg: RunConfig,
    params: policy.PolicyParams,
    setup: EpisodeSetup,
    rng: Rng,
    detector: Optional[StuckDetector] = None,
) -> EpisodeRecord:
    """Policy acts until the stuck detector fires (or failure is certain);
    the expert then controls to the end, with its steps labeled for
    supervision."""
    detector = detector or StuckDetector(cfg.rollout.k_stuck, cfg.rollout.displacement_eps)
    labeler = datagen.make_labeler()
    annotator = datagen.MockAnnotator()
    return run_episode(
        cfg, params, setup, rng,
        policy_mode="sample", gate_mode="adaptive", memory_enabled=True,
        detector=detector, labeler=labeler,
        annotate_fn=datagen.annotate_hook(annotator, setup.spec.instruction, cfg),
        source="expert_segment",
    )


def sample_update_batches(
    buffer: HybridBuffer, rng: Rng, rl_size: int, sft_size: int
) -> tuple[optim.RlBatch, optim.SftBatch]:
    """RL batch: uniform over every stored step, with advantages normalized
    across the sampled batch. SFT batch: expert-controlled steps only.
    A missing tag degrades to an empty corresponding batch."""
    all_steps: list[StepRecord] = []
    for ep in buffer.naive + buffer.expert:
        all_steps.extend(ep.steps)
    if not all_steps:
        raise EmptyBuffer("hybrid buffer holds no steps")

    idx = rng.integers(0, len(all_steps), size=rl_size)
    chosen = [all_steps[int(i)] for i in np.atleast_1d(idx)]
    returns = optim.normalize_returns(np.array([s.return_to_go for s in chosen]))
    rl_items = [
        optim.RlItem(s.context, s.action, s.old_log_prob, float(a))
        for s, a in zip(chosen, returns)
    ]

    expert_steps = [
        s for ep in buffer.expert for s in ep.steps
        if s.controller == "expert" and s.expert_action is not None
    ]
    sft_items: list[optim.SftItem] = []
    if expert_steps:
        sidx = rng.integers(0, len(expert_steps), size=sft_size)
        for i in np.atleast_1d(sidx):
            s = expert_steps[int(i)]
            sft_items.append(optim.SftItem(s.context, int(s.gate_label or 0), s.expert_action))
    return optim.RlBatch(rl_items), optim.SftBatch(sft_items)


# -- external interface: buffer dump / restore ------------------------------

def dump_buffer(buffer: HybridBuffer, path: str) -> None:
    """One step per JSON line with the documented field set."""
    with open(path, "w") as fh:
        for tag, episodes in (("naive", buffer.naive), ("expert_segment", buffer.expert)):
            for ep in episodes:
                for s in ep.steps:
                    fh.write(json.dumps({
                        "episode_id": ep.episode_id,
                        "step": s.step,
                        "pose": [s.pose.x, s.pose.y, s.pose.theta],
                        "action": [float(v) for v in s.action],
                        "reward": s.reward,
                        "old_log_prob": s.old_log_prob,
                        "tag": tag,
                        "gate_label": s.gate_label,
                        "think": s.think,
                        "summary": s.summary,
                    }) + "\n")


def restore_buffer_steps(path: str) -> list[dict]:
    """Load dumped step records (contexts are not part of the wire format)."""
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
