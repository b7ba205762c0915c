"""Shared domain types: planar poses, waypoint trajectories, velocity
commands, task instructions, and a counter-based seeded RNG.

Angle convention: theta = 0 faces +x, counterclockwise positive, wrapped
into (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

TWO_PI = 2.0 * math.pi


class NonFiniteAngle(ValueError):
    """Raised when an angle operation receives a NaN or infinity."""


class InvalidTrajectory(ValueError):
    """Raised when a waypoint list violates length or spacing limits."""


def normalize_angle(theta: float) -> float:
    """Wrap ``theta`` into (-pi, pi], preserving its value modulo 2*pi."""
    if not math.isfinite(theta):
        raise NonFiniteAngle(f"angle must be finite, got {theta!r}")
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


@dataclass(frozen=True)
class Pose:
    """Planar robot pose. x, y in meters, theta in radians.

    theta is normalized to (-pi, pi] at construction, so every derived pose
    stays normalized.
    """

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"pose position must be finite, got ({self.x}, {self.y})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


def pose_distance(a: Pose, b: Pose) -> float:
    """Euclidean distance over (x, y); heading is ignored."""
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class Trajectory:
    """Ordered waypoint plan emitted by the policy or the expert."""

    waypoints: tuple[Pose, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "waypoints", tuple(self.waypoints))
        if len(self.waypoints) < 1:
            raise InvalidTrajectory("trajectory needs at least one waypoint")

    def __len__(self) -> int:
        return len(self.waypoints)

    def validate(self, n: int, max_step_length: float) -> "Trajectory":
        """Check the config-level invariants: exactly n waypoints and bounded
        consecutive displacement."""
        if len(self.waypoints) != n:
            raise InvalidTrajectory(f"expected {n} waypoints, got {len(self.waypoints)}")
        prev: Optional[Pose] = None
        for wp in self.waypoints:
            if prev is not None:
                if pose_distance(prev, wp) > max_step_length + 1e-9:
                    raise InvalidTrajectory(
                        f"waypoint displacement {pose_distance(prev, wp):.3f} exceeds "
                        f"max_step_length {max_step_length}"
                    )
            prev = wp
        return self

    def total_displacement(self) -> float:
        """Sum of consecutive waypoint distances, measured from the origin of
        the trajectory's own frame (first leg counts from (0, 0) for
        ego-frame plans)."""
        total = 0.0
        prev = Pose(0.0, 0.0, 0.0)
        for wp in self.waypoints:
            total += pose_distance(prev, wp)
            prev = wp
        return total


@dataclass(frozen=True)
class VelocityCommand:
    """Low-level unicycle command: linear and angular velocity."""

    v: float
    omega: float

    def clamped(self, v_max: float, omega_max: float) -> "VelocityCommand":
        return VelocityCommand(
            v=min(max(self.v, -v_max), v_max),
            omega=min(max(self.omega, -omega_max), omega_max),
        )


class Task(Enum):
    OBJECT_NAV = "objectnav"
    TRACK = "track"
    IMAGE_NAV = "imagenav"


@dataclass(frozen=True)
class Instruction:
    """Navigation instruction: what to find or follow.

    payload is a category name for OBJECT_NAV, a target descriptor for
    TRACK, and a goal feature grid (P, P, C) for IMAGE_NAV.
    """

    task: Task
    payload: Union[str, np.ndarray]

    def __post_init__(self) -> None:
        if self.task in (Task.OBJECT_NAV, Task.TRACK):
            if not isinstance(self.payload, str) or not self.payload:
                raise ValueError(f"{self.task.value} payload must be a non-empty string")
        else:
            if not isinstance(self.payload, np.ndarray) or self.payload.ndim != 3:
                raise ValueError("imagenav payload must be a (P, P, C) feature grid")


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One round of SplitMix64; used to derive child seeds deterministically."""
    x = (x + _GOLDEN) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def _label_to_u64(label: Union[int, str]) -> int:
    if isinstance(label, int):
        return label & _MASK64
    import hashlib

    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded random stream backed by the counter-based Philox generator.

    Equal seeds produce identical streams on every platform. Child streams
    are derived via SplitMix64 over (seed, label) so workers never share a
    stream.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        self.counter = 0

    def child(self, *labels: Union[int, str]) -> "Rng":
        s = self.seed
        for label in labels:
            s = _splitmix64(s ^ _splitmix64(_label_to_u64(label)))
        return Rng(s)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        """Standard normal draws (numpy's ziggurat sampler)."""
        self.counter += 1
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def choice(self, seq):
        idx = int(self.integers(0, len(seq)))
        return seq[idx]

    def shuffle(self, items: list) -> None:
        self.counter += 1
        self._gen.shuffle(items)
