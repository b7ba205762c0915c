"""Observation encoding pipeline: decay-scheduled frame sampling, age-based
grid pooling, rotary temporal indicator tokens, the visual projector, and
context assembly.

Text is vectorized by a fixed (non-learned) tokenizer: spatial direction
words carry their unit direction in the first two dimensions, everything
else hashes to a stable random unit vector.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import Instruction, Task

TOKEN_INSTRUCTION = 0
TOKEN_TEMPORAL = 1
TOKEN_VISUAL = 2
TOKEN_MEMORY = 3
TOKEN_GATE = 4

# Ego-frame direction vocabulary used by the reasoner's decision clause.
DIRECTION_WORDS = (
    "ahead", "ahead_left", "left", "back_left",
    "back", "back_right", "right", "ahead_right",
)
DIRECTION_ANGLES = {w: i * math.pi / 4.0 for i, w in enumerate(DIRECTION_WORDS)}


class BadStability(ValueError):
    """Raised when the memory-stability constant is not positive."""


class EmptyCache(ValueError):
    """Raised when frame selection runs on an empty cache."""


class OddDim(ValueError):
    """Raised when a rotary token is requested for an odd width."""


class ContextOverflow(RuntimeError):
    """Raised when an assembled context exceeds the configured token cap."""


def sampling_rate(delta_t: float, f_max: float, s: float) -> float:
    """Frame sampling rate at age delta_t: f_max * exp(-delta_t / s)."""
    if s <= 0:
        raise BadStability(f"stability must be positive, got {s}")
    if delta_t < 0 or f_max <= 0:
        raise ValueError("need delta_t >= 0 and f_max > 0")
    return f_max * math.exp(-delta_t / s)


def sampling_stride(delta_t: float, f_max: float, s: float) -> int:
    """Keep-every-stride derived from the sampling rate; round-half-to-even."""
    return max(1, round(1.0 / sampling_rate(delta_t, f_max, s)))


@dataclass
class FrameFeatures:
    """Patch feature grid for one timestep."""

    timestamp: int
    grid: np.ndarray  # (P, P, C)

    def __post_init__(self) -> None:
        p = self.grid.shape[0]
        if p & (p - 1) != 0 or self.grid.shape[1] != p:
            raise ValueError(f"patch grid must be square with power-of-two side, got {self.grid.shape}")


class VisualCache:
    """Ring of frame features keyed by strictly increasing timestamp."""

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._frames: list[FrameFeatures] = []

    def add(self, frame: FrameFeatures) -> None:
        if self._frames and frame.timestamp <= self._frames[-1].timestamp:
            raise ValueError("timestamps must be strictly increasing")
        self._frames.append(frame)
        if len(self._frames) > self.capacity:
            self._frames.pop(0)

    def __len__(self) -> int:
        return len(self._frames)

    def timestamps(self) -> list[int]:
        return [f.timestamp for f in self._frames]

    def get(self, timestamp: int) -> FrameFeatures:
        for f in self._frames:
            if f.timestamp == timestamp:
                return f
        raise KeyError(timestamp)


def select_frames(
    cache: VisualCache, now: int, f_max: float, s: float, budget: int
) -> list[int]:
    """Pick the timestamps to keep: frame i survives iff i is a multiple of
    the stride for its age; the current frame always survives; over budget,
    oldest survivors are dropped first."""
    if len(cache) == 0:
        raise EmptyCache("no frames cached")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    kept = []
    for ts in cache.timestamps():
        delta = now - ts
        if delta < 0:
            continue
        if ts == now or ts % sampling_stride(delta, f_max, s) == 0:
            kept.append(ts)
    if not kept or kept[-1] != now:
        if now in cache.timestamps():
            kept.append(now)
    if len(kept) > budget:
        kept = kept[-budget:]
    return kept


def pool_stride(delta_t: float, h: float, p: int) -> int:
    """Grid-pool stride doubles every h steps of age, clamped to the grid."""
    if h <= 0:
        raise ValueError("h must be positive")
    return min(p, 2 ** int(delta_t // h))


def grid_pool(frame: FrameFeatures, delta_t: float, h: float) -> FrameFeatures:
    """Mean-pool the grid with the age-dependent stride. delta_t = 0 is the
    identity."""
    p = frame.grid.shape[0]
    g = pool_stride(delta_t, h, p)
    if g == 1:
        return frame
    c = frame.grid.shape[2]
    out = frame.grid.reshape(p // g, g, p // g, g, c).mean(axis=(1, 3))
    return FrameFeatures(frame.timestamp, out)


def rope_angles(d: int) -> np.ndarray:
    if d % 2 != 0:
        raise OddDim(f"rotary width must be even, got {d}")
    j = np.arange(d // 2)
    return 10000.0 ** (-2.0 * j / d)


def temporal_token(base: np.ndarray, delta_t: float) -> np.ndarray:
    """Rotate the base vector pairwise by delta_t * theta_j (rotary position
    encoding); delta_t = 0 returns the base exactly."""
    base = np.asarray(base, dtype=np.float64)
    theta = rope_angles(base.shape[0]) * delta_t
    cos, sin = np.cos(theta), np.sin(theta)
    out = np.empty_like(base)
    out[0::2] = base[0::2] * cos - base[1::2] * sin
    out[1::2] = base[0::2] * sin + base[1::2] * cos
    return out


def rope_matrix(d: int, delta_t: float) -> np.ndarray:
    """The rotation as a block-diagonal matrix (for the differentiable path)."""
    theta = rope_angles(d) * delta_t
    mat = np.zeros((d, d))
    cos, sin = np.cos(theta), np.sin(theta)
    idx = np.arange(d // 2)
    mat[2 * idx, 2 * idx] = cos
    mat[2 * idx, 2 * idx + 1] = -sin
    mat[2 * idx + 1, 2 * idx] = sin
    mat[2 * idx + 1, 2 * idx + 1] = cos
    return mat


def project(weights: dict, grid: Union[np.ndarray, FrameFeatures]) -> np.ndarray:
    """Two-layer per-patch MLP mapping feature width C to token width D."""
    if isinstance(grid, FrameFeatures):
        grid = grid.grid
    with ad.no_grad():
        t = _project_tensor({k: Tensor(v) for k, v in weights.items()}, np.asarray(grid))
    return t.data


def _project_tensor(weights: dict, grid: np.ndarray) -> Tensor:
    p = grid.shape[0]
    flat = Tensor(np.asarray(grid, dtype=np.float64).reshape(p * p, -1))
    h = ad.relu(ad.add(ad.matmul(flat, weights["proj_w1"]), weights["proj_b1"]))
    return ad.add(ad.matmul(h, weights["proj_w2"]), weights["proj_b2"])


# -- fixed text vectorizer -------------------------------------------------

_WORD_CACHE: dict[tuple[str, int], np.ndarray] = {}


def word_vector(word: str, d: int) -> np.ndarray:
    """Deterministic word embedding: direction words get their ego unit
    vector in dims 0-1; every word gets a hashed unit vector in dims 2+."""
    key = (word, d)
    if key not in _WORD_CACHE:
        vec = np.zeros(d)
        if word in DIRECTION_ANGLES:
            ang = DIRECTION_ANGLES[word]
            vec[0] = math.cos(ang)
            vec[1] = math.sin(ang)
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        gen = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))
        tail = gen.standard_normal(d - 2)
        tail /= max(np.linalg.norm(tail), 1e-12)
        vec[2:] = tail
        _WORD_CACHE[key] = vec
    return _WORD_CACHE[key]


def tokenize_words(text: str) -> list[str]:
    return re.findall(r"[A-Za-z_]+\d*|\d+\.\d+|\d+", text.lower())


def text_matrix(text: str, d: int) -> np.ndarray:
    words = tokenize_words(text)
    if not words:
        return np.zeros((0, d))
    return np.stack([word_vector(w, d) for w in words])


# -- context assembly ------------------------------------------------------

@dataclass
class ContextSpec:
    """Compact, parameter-free description of one policy input: rebuildable
    into a token sequence under any projector weights."""

    instruction_words: tuple[str, ...]
    memory_text: str
    frames: tuple[tuple[np.ndarray, float], ...]  # (pooled grid, age) old -> new
    goal_grid: Optional[np.ndarray] = None  # ImageNav goal features
    cot_text: str = ""

    def without_cot(self) -> "ContextSpec":
        if not self.cot_text:
            return self
        return ContextSpec(self.instruction_words, self.memory_text, self.frames, self.goal_grid, "")


@dataclass
class TokenSequence:
    """Assembled context: token vectors (as an autodiff tensor) plus the
    token-type tags."""

    vectors: Tensor  # (L, D)
    types: np.ndarray  # (L,) int

    def __len__(self) -> int:
        return int(self.types.shape[0])

    def visual_token_count(self) -> int:
        return int((self.types == TOKEN_VISUAL).sum())


def instruction_words(instruction: Instruction) -> tuple[str, ...]:
    if instruction.task is Task.OBJECT_NAV:
        return ("find", instruction.payload)
    if instruction.task is Task.TRACK:
        return ("track", instruction.payload)
    return ("match", "goal")


def assemble_context(
    weights: dict,
    ctx: ContextSpec,
    d: int,
    cap: int = 1024,
) -> TokenSequence:
    """Layout: [instruction][memory][per frame: temporal token, visual
    tokens][reasoning tokens]. Frames must be ordered oldest to newest."""
    parts: list[Tensor] = []
    types: list[np.ndarray] = []

    instr = text_matrix(" ".join(ctx.instruction_words), d)
    if instr.shape[0]:
        parts.append(Tensor(instr))
        types.append(np.full(instr.shape[0], TOKEN_INSTRUCTION))
    if ctx.goal_grid is not None:
        goal_feats = FrameFeatures(0, np.asarray(ctx.goal_grid))
        pooled = grid_pool(goal_feats, 2 * 1.0, 1.0).grid  # stride 4 -> 2x2 tokens
        parts.append(_project_tensor(weights, pooled))
        types.append(np.full(pooled.shape[0] * pooled.shape[1], TOKEN_INSTRUCTION))

    mem = text_matrix(ctx.memory_text, d)
    if mem.shape[0]:
        parts.append(Tensor(mem))
        types.append(np.full(mem.shape[0], TOKEN_MEMORY))

    ages = [age for _, age in ctx.frames]
    if ages != sorted(ages, reverse=True):
        raise ValueError("frames must be ordered oldest to newest")
    for grid, age in ctx.frames:
        rot = Tensor(rope_matrix(d, age))
        tok = ad.reshape(ad.matmul(rot, weights["temporal_base"]), (1, d))
        parts.append(tok)
        types.append(np.full(1, TOKEN_TEMPORAL))
        vis = _project_tensor(weights, grid)
        parts.append(vis)
        types.append(np.full(vis.data.shape[0], TOKEN_VISUAL))

    if ctx.cot_text:
        cot = text_matrix(ctx.cot_text, d)
        if cot.shape[0]:
            parts.append(Tensor(cot))
            types.append(np.full(cot.shape[0], TOKEN_GATE))

    if not parts:
        raise ValueError("cannot assemble an empty context")
    type_arr = np.concatenate(types).astype(np.int64)
    if type_arr.shape[0] > cap:
        raise ContextOverflow(
            f"context holds {type_arr.shape[0]} tokens, cap is {cap}; raise pooling "
            "or sampling aggressiveness"
        )
    return TokenSequence(ad.concat(parts, axis=0), type_arr)
