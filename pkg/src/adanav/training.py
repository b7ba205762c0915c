"""Training drivers: imitation pretraining on expert datasets, online
post-training over the hybrid buffer, and suite evaluation."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import datagen, optim, policy, rollout
from .config import RunConfig
from .core import Rng, Task
from .driver import EpisodeSetup, StuckDetector, run_episode
from .simworld.episodes import EpisodeRecord
from .simworld.metrics import MetricsReport, evaluate
from .tasks import make_setup


class JsonlLogger:
    """Line-delimited training log; every record carries its phase."""

    def __init__(self, path: Optional[str]):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "a")
        else:
            self._fh = None

    def write(self, **fields) -> None:
        if self._fh:
            self._fh.write(json.dumps(fields, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def sft_items_from_records(
    records: list[datagen.DatasetRecord], frames: dict[str, np.ndarray]
) -> list[optim.SftItem]:
    return [
        optim.SftItem(
            datagen.record_to_context(rec, frames),
            rec.gate_label,
            np.asarray(rec.expert_action, dtype=np.float64),
        )
        for rec in records
    ]


def sft_items_from_episodes(episodes: list[EpisodeRecord]) -> list[optim.SftItem]:
    """Build supervision directly from in-memory expert episodes (same items
    the dataset file round-trip produces)."""
    items = []
    for ep in episodes:
        for s in ep.steps:
            if s.expert_action is None:
                continue
            items.append(optim.SftItem(s.context, int(s.gate_label or 0), s.expert_action))
    return items


def train_sft(
    cfg: RunConfig,
    items: list[optim.SftItem],
    rng: Rng,
    params: Optional[policy.PolicyParams] = None,
    adam_state: Optional[optim.AdamState] = None,
    steps: Optional[int] = None,
    logger: Optional[JsonlLogger] = None,
) -> tuple[policy.PolicyParams, optim.AdamState]:
    """Minibatch Adam on the imitation objective."""
    if not items:
        raise ValueError("no SFT items")
    params = params or policy.init_params(
        rng.child("init"), cfg.obs.d, cfg.obs.c, cfg.model.hidden, cfg.model.n_waypoints
    )
    adam_state = adam_state or optim.AdamState.init(params)
    batch_rng = rng.child("batches")
    steps = cfg.sft.steps if steps is None else steps
    for step in range(steps):
        idx = batch_rng.integers(0, len(items), size=cfg.sft.batch)
        batch = optim.SftBatch([items[int(i)] for i in np.atleast_1d(idx)])
        loss_fn = lambda tensors: optim.sft_loss(
            tensors, batch, cfg.optim.alpha, cfg.obs.d, cfg.obs.context_cap
        )
        loss, grads = optim.grad(loss_fn, params)
        params = optim.adam_step(
            params, grads, adam_state, cfg.optim.lr, cfg.optim.clip_norm,
            cfg.optim.adam_beta1, cfg.optim.adam_beta2, cfg.optim.adam_eps,
        )
        if logger and (step % cfg.sft.log_every == 0 or step == steps - 1):
            logger.write(phase="sft", step=step, loss=loss)
    return params, adam_state


def collect_iteration(
    cfg: RunConfig,
    params: policy.PolicyParams,
    buffer: rollout.HybridBuffer,
    rng: Rng,
    iteration: int,
    mode: str = "hybrid",  # hybrid | naive | expert
    task: Task = Task.OBJECT_NAV,
) -> dict:
    """Collect one iteration quota of episodes into the buffer. Hybrid mode
    alternates naive and expert-guided episodes 1:1."""
    stats = {"episodes": 0, "successes": 0, "takeovers": 0, "inserted": 0}
    before = len(buffer)
    for e in range(cfg.rollout.episodes_per_iter):
        ep_rng = rng.child("iter", iteration, "ep", e)
        setup = make_setup(cfg, ep_rng, task, episode_id=f"it{iteration:02d}-e{e:04d}")
        if mode == "hybrid":
            guided = e % 2 == 1
        elif mode == "expert":
            guided = True
        elif mode == "naive":
            guided = False
        else:
            raise ValueError(f"unknown rollout mode {mode}")
        if guided:
            record = rollout.run_expert_guided(
                cfg, params, setup, ep_rng.child("act"),
                StuckDetector(cfg.rollout.k_stuck, cfg.rollout.displacement_eps),
            )
        else:
            record = rollout.run_naive(cfg, params, setup, ep_rng.child("act"))
        stats["episodes"] += 1
        stats["successes"] += int(record.success)
        stats["takeovers"] += int(record.takeover_step is not None)
        rollout.buffer_insert(buffer, record, cfg.optim.gamma)
    stats["inserted"] = len(buffer) - before
    return stats


def post_train(
    cfg: RunConfig,
    params: policy.PolicyParams,
    rng: Rng,
    mode: str = "hybrid",
    task: Task = Task.OBJECT_NAV,
    logger: Optional[JsonlLogger] = None,
) -> policy.PolicyParams:
    """Online post-training: rollout iterations feeding the hybrid buffer,
    each followed by updates on the combined objective."""
    buffer = rollout.HybridBuffer(cfg.rollout.buffer_naive_cap, cfg.rollout.buffer_expert_cap)
    adam_state = optim.AdamState.init(params)
    update_rng = rng.child("updates")
    for iteration in range(cfg.rollout.iterations):
        snapshot = params.copy()
        stats = collect_iteration(cfg, snapshot, buffer, rng, iteration, mode, task)
        if len(buffer) == 0:
            if logger:
                logger.write(phase="post", iteration=iteration, mode=mode, skipped="empty-buffer", **stats)
            continue
        losses = []
        for _ in range(cfg.rollout.updates_per_iter):
            rl_batch, sft_batch = rollout.sample_update_batches(
                buffer, update_rng, cfg.rollout.rl_batch, cfg.rollout.sft_batch
            )
            loss_fn = lambda tensors: optim.post_loss(
                tensors, rl_batch, sft_batch, cfg.optim.lam, cfg.optim.alpha,
                cfg.optim.epsilon, cfg.obs.d, cfg.obs.context_cap,
            )
            loss, grads = optim.grad(loss_fn, params)
            params = optim.adam_step(
                params, grads, adam_state, cfg.optim.lr, cfg.optim.clip_norm,
                cfg.optim.adam_beta1, cfg.optim.adam_beta2, cfg.optim.adam_eps,
            )
            losses.append(loss)
        if logger:
            logger.write(
                phase="post", iteration=iteration, mode=mode,
                loss=float(np.mean(losses)), buffer_naive=len(buffer.naive),
                buffer_expert=len(buffer.expert), **stats,
            )
    return params


@dataclass
class EvalResult:
    metrics: MetricsReport
    revisit_rate: float
    episodes: list[EpisodeRecord] = field(default_factory=list)


def evaluate_policy(
    cfg: RunConfig,
    params: Optional[policy.PolicyParams],
    rng: Rng,
    n_episodes: int,
    task: Task = Task.OBJECT_NAV,
    gate_mode: str = "adaptive",
    memory_enabled: bool = True,
    policy_mode: str = "mean",
    keep_episodes: bool = False,
) -> EvalResult:
    """Deterministic evaluation over a held-out seeded episode suite."""
    episodes = []
    for e in range(n_episodes):
        ep_rng = rng.child("eval", e)
        setup = make_setup(cfg, ep_rng, task, episode_id=f"eval-{e:04d}")
        record = run_episode(
            cfg, params, setup, ep_rng.child("act"),
            policy_mode=policy_mode, gate_mode=gate_mode, memory_enabled=memory_enabled,
            source="naive",
        )
        episodes.append(record)
    metrics = evaluate(episodes)
    revisit = float(np.mean([ep.revisit_fraction() for ep in episodes]))
    return EvalResult(metrics, revisit, episodes if keep_episodes else [])
