"""Video timeline arithmetic: steps, anticipation times, frame alignment.

A sample is processed as S = s_enc + s_ant snippets, one every ``alpha``
seconds, ending ``alpha`` seconds before the action starts.  The first s_enc
steps only feed the encoder; the remaining s_ant steps each emit a
prediction.  Steps are 1-based throughout, matching the convention used by
the rest of the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class TimelineSpec:
    alpha: float = 0.25
    s_enc: int = 6
    s_ant: int = 8

    def __post_init__(self):
        if not (self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.s_enc < 0:
            raise ValueError(f"s_enc must be >= 0, got {self.s_enc}")
        if self.s_ant < 1:
            raise ValueError(f"s_ant must be >= 1, got {self.s_ant}")

    @property
    def total_steps(self) -> int:
        return self.s_enc + self.s_ant

    @property
    def anticipation_steps(self) -> list[int]:
        """Global step indices at which a prediction is emitted."""
        return list(range(self.s_enc + 1, self.total_steps + 1))

    def unroll_count(self, t: int) -> int:
        """Number of decoder iterations at step t (steps left to the action)."""
        if not (self.s_enc + 1 <= t <= self.total_steps):
            raise ValueError(
                f"step {t} outside anticipation stage "
                f"[{self.s_enc + 1}, {self.total_steps}]"
            )
        return self.s_ant + self.s_enc + 1 - t

    def anticipation_time(self, t: int) -> float:
        """Seconds before the action start covered by the step-t prediction."""
        return self.alpha * self.unroll_count(t)

    def anticipation_times(self) -> list[float]:
        return [self.anticipation_time(t) for t in self.anticipation_steps]

    def observation_ratios(self) -> list[float]:
        """Fraction of the segment observed at each prediction (s_enc=0 mode)."""
        n = self.total_steps
        return [t / n for t in self.anticipation_steps]

    def step_time(self, start_sec: float, t: int) -> float:
        """Absolute time of snippet t for an action starting at start_sec."""
        if not (1 <= t <= self.total_steps):
            raise ValueError(f"step {t} outside [1, {self.total_steps}]")
        return start_sec - self.alpha * (self.total_steps + 1 - t)


def frame_index(time_sec: float, fps: float) -> int:
    """Frame containing ``time_sec``; negative times clamp to frame 0."""
    return max(0, math.floor(time_sec * fps))
