"""Reasoning gate and the template reasoner that produces think/summary
text.

The gate is a learned linear head over the pooled context representation.
The reasoner is deterministic: it fills a fixed four-clause template
(perception, task state, visited check, direction decision) from the
current observation, the instruction, and the linguistic memory.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Instruction, Pose, Task, normalize_angle
from .memory import MemoryStore
from .obs import DIRECTION_WORDS
from .simworld.sensor import Frame

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
SUMMARY_OPEN, SUMMARY_CLOSE = "<summary>", "</summary>"

_DECISION_RE = re.compile(r"decision: move ([a-z_]+)")


class MalformedCot(ValueError):
    """Raised when reasoning text violates the tag grammar."""


@dataclass(frozen=True)
class GateDecision:
    fire: bool
    logits: np.ndarray  # (2,) [off, on]

    def __post_init__(self) -> None:
        expected = bool(self.logits[1] > self.logits[0])
        if self.fire != expected:
            raise ValueError("fire flag inconsistent with logits (ties break to off)")


def gate(hidden: np.ndarray, gate_w: np.ndarray, gate_b: np.ndarray) -> GateDecision:
    """Linear on/off head; ties break to off."""
    logits = hidden @ gate_w + gate_b
    return GateDecision(fire=bool(logits[1] > logits[0]), logits=logits)


@dataclass(frozen=True)
class CotOutput:
    think: str
    summary: str


def serialize_cot(cot: CotOutput) -> str:
    return f"{THINK_OPEN}{cot.think}{THINK_CLOSE}{SUMMARY_OPEN}{cot.summary}{SUMMARY_CLOSE}"


def parse_tags(text: str) -> CotOutput:
    """Strict parse of `<think>...</think><summary>...</summary>`: exactly
    one of each tag pair, in that order, nothing outside them."""
    for tag in (THINK_OPEN, THINK_CLOSE, SUMMARY_OPEN, SUMMARY_CLOSE):
        if text.count(tag) != 1:
            raise MalformedCot(f"expected exactly one {tag}")
    if not text.startswith(THINK_OPEN) or not text.endswith(SUMMARY_CLOSE):
        raise MalformedCot("text must start with <think> and end with </summary>")
    tc = text.index(THINK_CLOSE)
    so = text.index(SUMMARY_OPEN)
    if not (text.index(THINK_OPEN) < tc < so < text.index(SUMMARY_CLOSE)):
        raise MalformedCot("tags out of order")
    if so != tc + len(THINK_CLOSE):
        raise MalformedCot("unexpected text between </think> and <summary>")
    think = text[len(THINK_OPEN) : tc]
    summary = text[so + len(SUMMARY_OPEN) : -len(SUMMARY_CLOSE)]
    return CotOutput(think, summary)


def bucket_of(angle: float) -> str:
    """Nearest of the eight 45-degree ego direction buckets."""
    idx = int(round(normalize_angle(angle) / (math.pi / 4.0))) % 8
    return DIRECTION_WORDS[idx]


def bucket_angle(word: str) -> float:
    return normalize_angle(DIRECTION_WORDS.index(word) * math.pi / 4.0)


def decision_of(cot: CotOutput) -> Optional[str]:
    m = _DECISION_RE.search(cot.think)
    if m and m.group(1) in DIRECTION_WORDS:
        return m.group(1)
    return None


def _angdiff(a: float, b: float) -> float:
    return abs(normalize_angle(a - b))


def choose_direction(
    frame: Frame,
    pose: Pose,
    memory: MemoryStore,
    current_room: Optional[str],
    last_seen_bearing: Optional[float] = None,
) -> tuple[str, str]:
    """Pick an ego direction bucket and the reason for it.

    Priority: visible target > last-seen bearing (tracking) > the most open
    ray, discounted when it points back toward an already-visited room and
    slightly when it reverses the current heading."""
    if frame.target_visible and frame.target_bearing is not None:
        return bucket_of(frame.target_bearing), "target"
    if last_seen_bearing is not None:
        return bucket_of(last_seen_bearing), "last_seen"

    positions = memory.room_positions()
    best_word, best_score = "ahead", -1e9
    dead_end = bool(np.max(frame.ray_distances) < 0.7)
    if dead_end:
        return "back", "dead_end"
    for bearing, dist in zip(frame.ray_bearings, frame.ray_distances):
        world = normalize_angle(pose.theta + bearing)
        score = float(dist)
        for room_id, (px, py) in positions.items():
            if room_id == current_room:
                continue
            d = math.hypot(px - pose.x, py - pose.y)
            if d > 5.0:
                continue
            toward = math.atan2(py - pose.y, px - pose.x)
            if _angdiff(world, toward) < math.pi / 4.0:
                score -= 2.0 * (1.0 - d / 5.0)
        if _angdiff(bearing, math.pi) < math.pi / 3.0:
            score -= 0.5  # mild anti-backtracking
        if score > best_score:
            best_score, best_word = score, bucket_of(bearing)
    return best_word, "frontier"


def reason(
    instruction: Instruction,
    frame: Frame,
    memory: MemoryStore,
    pose: Pose,
    last_seen_bearing: Optional[float] = None,
    decision_override: Optional[str] = None,
) -> CotOutput:
    """Deterministic four-clause reasoning over the observation, the task,
    and the memory. The decision clause names one of the eight ego
    direction buckets."""
    room = frame.room_id or "corridor"
    cats = " ".join(frame.visible_categories) if frame.visible_categories else "nothing"
    best_ray = int(np.argmax(frame.ray_distances))
    open_word = bucket_of(float(frame.ray_bearings[best_ray]))
    open_dist = float(frame.ray_distances[best_ray])

    perception = f"perception: open {open_word} {open_dist:.1f}m; see {cats}"
    if frame.target_visible and frame.target_bearing is not None:
        perception += f"; target visible {bucket_of(frame.target_bearing)} {frame.target_range:.1f}m"

    if instruction.task is Task.OBJECT_NAV:
        goal = f"find {instruction.payload}"
    elif instruction.task is Task.TRACK:
        goal = f"track {instruction.payload}"
    else:
        goal = "match goal image"
    task_clause = f"task: {goal}; room {room}"

    visited_now = memory.visited(room)
    visited_clause = (
        f"visited: room {room} already visited; explored {len(memory.visited_rooms())} rooms"
        if visited_now
        else f"visited: room {room} new; explored {len(memory.visited_rooms())} rooms"
    )

    if decision_override is not None:
        word = decision_override
    else:
        word, _ = choose_direction(frame, pose, memory, frame.room_id, last_seen_bearing)
    decision_clause = f"decision: move {word}"

    think = f"{perception}. {task_clause}. {visited_clause}. {decision_clause}."

    target_word = "seen" if frame.target_visible else "unseen"
    summary = f"{room} at ({pose.x:.1f}, {pose.y:.1f}): saw {cats}; target {target_word}"
    return CotOutput(think, summary)
