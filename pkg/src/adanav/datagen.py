"""Dataset pipeline: expert episodes, adaptive gate labels, pluggable
annotation, two-stage filtering, and JSON-lines shards with a feature
sidecar and a stats report."""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from . import adacot, obs
from .adacot import CotOutput, MalformedCot
from .config import RunConfig
from .core import Instruction, Pose, Rng, Task, Trajectory
from .driver import AnnotateFn, EpisodeSetup, Labeler, expert_direction_word, run_episode
from .memory import MemoryStore
from .simworld.episodes import EpisodeRecord
from .simworld.sensor import Frame
from .tasks import make_setup

FORMAT_RULES = (
    "wrap reasoning in <think></think> followed immediately by <summary></summary>; "
    "the decision clause must read 'decision: move <direction>'"
)


class AnnotatorUnavailable(RuntimeError):
    """Raised when the annotation backend fails for a record."""


@dataclass
class AnnotationRequest:
    """The composite prompt: instruction, recent frame digests (at most 10),
    memory, the expert's direction, and the format contract."""

    instruction: Instruction
    frame_summaries: tuple[str, ...]
    memory_text: str
    expert_direction: Optional[str]
    format_rules: str
    frame: Frame
    memory: MemoryStore
    pose: Pose


class Annotator(Protocol):
    def __call__(self, request: AnnotationRequest) -> str: ...


class MockAnnotator:
    """Deterministic template annotator: fills the same four-clause template
    as the online reasoner, with the decision clause taken from the expert
    trajectory."""

    def __call__(self, request: AnnotationRequest) -> str:
        cot = adacot.reason(
            request.instruction, request.frame, request.memory, request.pose,
            decision_override=request.expert_direction or "ahead",
        )
        return adacot.serialize_cot(cot)


class FaultInjectingAnnotator:
    """Wraps an annotator and corrupts a seeded fraction of its outputs;
    exercises the rule-based filter stage."""

    def __init__(self, inner: Annotator, rate: float, rng: Rng):
        self.inner = inner
        self.rate = rate
        self.rng = rng
        self.corrupted = 0

    def __call__(self, request: AnnotationRequest) -> str:
        text = self.inner(request)
        if self.rng.uniform() < self.rate:
            self.corrupted += 1
            return text.split("<summary>")[0]  # drop the summary block
        return text


class FailingAnnotator:
    """Always unavailable; exercises the skip-and-count path."""

    def __call__(self, request: AnnotationRequest) -> str:
        raise RuntimeError("annotation endpoint unreachable")


def annotate(annotator: Annotator, request: AnnotationRequest) -> str:
    """Run one annotation call; backend failures surface as
    AnnotatorUnavailable so the caller can skip and count the record."""
    if len(request.frame_summaries) > 10:
        raise ValueError("at most 10 frame summaries may be passed")
    try:
        return annotator(request)
    except AnnotatorUnavailable:
        raise
    except Exception as exc:
        raise AnnotatorUnavailable(str(exc)) from exc


def annotate_hook(annotator: Annotator, instruction: Instruction, cfg: RunConfig) -> AnnotateFn:
    """Adapt an annotator to the driver callback; maintains the rolling
    last-10 frame digests."""
    recent: deque[str] = deque(maxlen=cfg.datagen.max_frame_summaries)

    def hook(frame: Frame, memory: MemoryStore, pose: Pose, direction: Optional[str]) -> str:
        cats = " ".join(frame.visible_categories) or "nothing"
        recent.append(f"open {np.max(frame.ray_distances):.1f}m; see {cats}")
        request = AnnotationRequest(
            instruction=instruction,
            frame_summaries=tuple(recent),
            memory_text="",
            expert_direction=direction,
            format_rules=FORMAT_RULES,
            frame=frame,
            memory=memory,
            pose=pose,
        )
        return annotate(annotator, request)

    return hook


def make_labeler() -> Labeler:
    """Adaptive gate labels over an expert path: on at the first step, ahead
    of a >45-degree heading change within the next three waypoints, on first
    target sighting, on room change, and on the recovery step after an
    expert takeover."""
    state = {"target_seen": False, "last_room": None}

    def labeler(expert_ego: Trajectory, frame: Frame, step: int, takeover_now: bool) -> int:
        on = step == 0 or takeover_now
        base = expert_ego.waypoints[0].theta
        # a junction is an upcoming turn on the path itself: only count when
        # the robot is roughly aligned (corrective wobble is not deliberation)
        if abs(base) <= math.pi / 6.0:
            for wp in expert_ego.waypoints[1:3]:
                change = abs(math.remainder(wp.theta - base, 2.0 * math.pi))
                # quantized to the octile 45-degree grid so clearance nudges
                # in the resampled polyline do not masquerade as turns
                if round(change / (math.pi / 4.0)) >= 2:
                    on = True
                    break
        if frame.target_visible and not state["target_seen"]:
            on = True
        if frame.target_visible:
            state["target_seen"] = True
        room = frame.room_id
        if room is not None:
            if state["last_room"] is not None and room != state["last_room"]:
                on = True
            state["last_room"] = room
        return int(on)

    return labeler


# -- dataset records ---------------------------------------------------------

@dataclass
class DatasetRecord:
    episode_id: str
    step: int
    task: str
    instruction: dict
    frame_ages: list[float]
    memory_text: str
    gate_label: int
    think: str
    summary: str
    raw_annotation: str
    expert_action: list[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "DatasetRecord":
        return DatasetRecord(**json.loads(line))


def _instruction_payload(instr: Instruction, episode_id: str) -> dict:
    if instr.task is Task.OBJECT_NAV:
        return {"task": "objectnav", "category": instr.payload}
    if instr.task is Task.TRACK:
        return {"task": "track", "descriptor": instr.payload}
    return {"task": "imagenav", "goal_key": f"{episode_id}/goal"}


def records_from_episode(record: EpisodeRecord, setup: EpisodeSetup) -> tuple[list[DatasetRecord], dict[str, np.ndarray]]:
    """Flatten an expert episode into dataset records plus the feature
    arrays its contexts reference."""
    out: list[DatasetRecord] = []
    frames: dict[str, np.ndarray] = {}
    eid = record.episode_id
    if setup.goal_grid is not None:
        frames[f"{eid}/goal"] = np.asarray(setup.goal_grid, dtype=np.float32)
    for s in record.steps:
        if s.expert_action is None:
            continue
        ctx: obs.ContextSpec = s.context
        ages = [age for _, age in ctx.frames]
        for k, (grid, _) in enumerate(ctx.frames):
            frames[f"{eid}/{s.step}/f{k}"] = np.asarray(grid, dtype=np.float32)
        out.append(DatasetRecord(
            episode_id=eid,
            step=s.step,
            task=record.task.value,
            instruction=_instruction_payload(setup.spec.instruction, eid),
            frame_ages=ages,
            memory_text=ctx.memory_text,
            gate_label=int(s.gate_label or 0),
            think=s.think,
            summary=s.summary,
            raw_annotation=s.raw_annotation,
            expert_action=[float(v) for v in s.expert_action],
        ))
    return out, frames


# -- two-stage filter --------------------------------------------------------

def _expert_bearing(expert_action: list[float], min_disp: float = 0.1) -> Optional[float]:
    arr = np.asarray(expert_action, dtype=np.float64).reshape(-1, 3)
    for x, y, _ in arr:
        if math.hypot(x, y) >= min_disp:
            return math.atan2(y, x)
    return None


def filter_records(records: list[DatasetRecord]) -> tuple[list[DatasetRecord], list[tuple[DatasetRecord, str]]]:
    """Stage 1: rule-based tag/body checks. Stage 2: the decision clause
    must lie within one 45-degree bucket of the expert's next-step bearing."""
    kept: list[DatasetRecord] = []
    rejected: list[tuple[DatasetRecord, str]] = []
    for rec in records:
        if rec.gate_label == 0:
            if rec.raw_annotation or rec.think or rec.summary:
                rejected.append((rec, "label-mismatch"))
            else:
                kept.append(rec)
            continue
        # stage 1: rule-based checks
        try:
            cot = adacot.parse_tags(rec.raw_annotation)
        except MalformedCot:
            rejected.append((rec, "malformed"))
            continue
        if not cot.think.strip() or not cot.summary.strip():
            rejected.append((rec, "empty-body"))
            continue
        decision = adacot.decision_of(cot)
        if decision is None:
            rejected.append((rec, "no-decision"))
            continue
        # stage 2: cross-validation against the expert trajectory
        bearing = _expert_bearing(rec.expert_action)
        if bearing is not None:
            dev = abs(math.remainder(adacot.bucket_angle(decision) - bearing, 2.0 * math.pi))
            if dev > math.pi / 4.0 + 1e-9:
                rejected.append((rec, "decision-mismatch"))
                continue
        kept.append(rec)
    return kept, rejected


# -- dataset generation and IO -----------------------------------------------

def generate_dataset(
    cfg: RunConfig,
    rng: Rng,
    out_dir: str,
    annotator: Optional[Annotator] = None,
) -> dict:
    """Run the expert on procedural episodes, label gates, annotate on-steps,
    filter, and write shards + stats. Returns the stats dict."""
    counts = {
        Task.OBJECT_NAV: cfg.datagen.objectnav_episodes,
        Task.TRACK: cfg.datagen.track_episodes,
        Task.IMAGE_NAV: cfg.datagen.imagenav_episodes,
    }
    if sum(counts.values()) < 1:
        raise ValueError("episode counts must be >= 1")
    annotator = annotator or MockAnnotator()

    all_records: list[DatasetRecord] = []
    frames: dict[str, np.ndarray] = {}
    failures = 0
    episode_idx = 0
    for task, count in counts.items():
        for i in range(count):
            eid = f"{task.value}-{episode_idx:05d}"
            episode_idx += 1
            ep_rng = rng.child("datagen", eid)
            setup = make_setup(cfg, ep_rng, task, episode_id=eid)
            labeler = make_labeler()
            hook = annotate_hook(annotator, setup.spec.instruction, cfg)
            skipped = {"n": 0}

            def guarded_hook(frame, memory, pose, direction, _hook=hook, _skipped=skipped):
                try:
                    return _hook(frame, memory, pose, direction)
                except AnnotatorUnavailable:
                    _skipped["n"] += 1
                    return ""

            record = run_episode(
                cfg, None, setup, ep_rng,
                policy_mode="expert", gate_mode="label", memory_enabled=True,
                labeler=labeler, annotate_fn=guarded_hook, source="dataset",
            )
            failures += skipped["n"]
            recs, fr = records_from_episode(record, setup)
            if skipped["n"]:
                recs = [r for r in recs if not (r.gate_label == 1 and not r.raw_annotation)]
            all_records.extend(recs)
            frames.update(fr)

    kept, rejected = filter_records(all_records)
    stats = {
        "episodes": episode_idx,
        "steps": len(all_records),
        "kept": len(kept),
        "rejected": {},
        "annotator_failures": failures,
        "gate_on_fraction": (
            sum(1 for r in all_records if r.gate_label == 1) / max(len(all_records), 1)
        ),
        "per_task": {
            t.value: sum(1 for r in kept if r.task == t.value) for t in counts
        },
        "cot_records": sum(1 for r in kept if r.gate_label == 1),
    }
    for _, reason in rejected:
        stats["rejected"][reason] = stats["rejected"].get(reason, 0) + 1

    os.makedirs(out_dir, exist_ok=True)
    write_records(kept, frames, out_dir, cfg.datagen.shard_size)
    with open(os.path.join(out_dir, "stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    return stats


def write_records(
    records: list[DatasetRecord], frames: dict[str, np.ndarray], out_dir: str, shard_size: int = 5000
) -> None:
    os.makedirs(out_dir, exist_ok=True)
    shard_names = []
    for shard_idx in range(0, max(len(records), 1), shard_size):
        chunk = records[shard_idx : shard_idx + shard_size]
        name = f"records-{shard_idx // shard_size:03d}.jsonl"
        shard_names.append(name)
        with open(os.path.join(out_dir, name), "w") as fh:
            for rec in chunk:
                fh.write(rec.to_json() + "\n")
    np.savez_compressed(os.path.join(out_dir, "frames.npz"), **frames)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"version": 1, "shards": shard_names, "frames": "frames.npz"}, fh, indent=2)


def load_records(out_dir: str) -> tuple[list[DatasetRecord], dict[str, np.ndarray]]:
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    records = []
    for name in manifest["shards"]:
        with open(os.path.join(out_dir, name)) as fh:
            for line in fh:
                if line.strip():
                    records.append(DatasetRecord.from_json(line))
    frames = dict(np.load(os.path.join(out_dir, manifest["frames"])))
    return records, frames


def record_to_context(rec: DatasetRecord, frames: dict[str, np.ndarray]) -> obs.ContextSpec:
    """Rebuild the training context exactly as the driver assembled it."""
    grids = tuple(
        (np.asarray(frames[f"{rec.episode_id}/{rec.step}/f{k}"], dtype=np.float64), age)
        for k, age in enumerate(rec.frame_ages)
    )
    goal = None
    if rec.instruction["task"] == "imagenav":
        goal = np.asarray(frames[rec.instruction["goal_key"]], dtype=np.float64)
    if rec.instruction["task"] == "objectnav":
        words = ("find", rec.instruction["category"])
    elif rec.instruction["task"] == "track":
        words = ("track", rec.instruction["descriptor"])
    else:
        words = ("match", "goal")
    cot_text = ""
    if rec.gate_label == 1 and rec.think:
        cot_text = adacot.serialize_cot(CotOutput(rec.think, rec.summary))
    return obs.ContextSpec(words, rec.memory_text, grids, goal, cot_text)
