"""Navigation evaluation metrics: SR, SPL, TR, CR, and reasoning rate."""

from __future__ import annotations

from dataclasses import dataclass

from .episodes import EpisodeRecord


class NoEpisodes(ValueError):
    """Raised when an empty episode list is evaluated."""


@dataclass(frozen=True)
class MetricsReport:
    sr: float
    spl: float
    tr: float
    cr: float
    r_cot: float

    def __post_init__(self) -> None:
        for name in ("sr", "spl", "tr", "cr", "r_cot"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return {"sr": self.sr, "spl": self.spl, "tr": self.tr, "cr": self.cr, "r_cot": self.r_cot}


def evaluate(episodes: list[EpisodeRecord]) -> MetricsReport:
    """SR = mean success; SPL = mean of S_i * l_i / max(p_i, l_i);
    TR = mean tracked fraction; CR = mean collision-step fraction;
    r_cot = mean gate-fire fraction."""
    if not episodes:
        raise NoEpisodes("cannot evaluate an empty episode list")
    sr = 0.0
    spl = 0.0
    tr = 0.0
    cr = 0.0
    r_cot = 0.0
    for ep in episodes:
        success = 1.0 if ep.success else 0.0
        sr += success
        spl += success * ep.shortest_path_length / max(ep.agent_path_length, ep.shortest_path_length)
        n = max(ep.n_steps, 1)
        tr += ep.tracked_steps / n
        cr += ep.collisions / n
        r_cot += sum(1 for s in ep.steps if s.gate_fired) / n
    count = len(episodes)
    return MetricsReport(sr / count, spl / count, tr / count, cr / count, r_cot / count)
