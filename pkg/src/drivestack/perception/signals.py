"""Traffic-light state estimation by majority vote over recent observations."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

from ..config import PerceptionParams
from ..core.geometry import Point, Pose2D
from ..core.types import LightColor
from ..world.sensors import ExteroFrame


@dataclass(frozen=True)
class LightHistory:
    colors: tuple[LightColor, ...] = ()
    position: Optional[Point] = None  # local frame
    unseen: int = 0


@dataclass(frozen=True)
class LightEstimate:
    light_id: int
    state: LightColor
    confidence: float
    position: Optional[Point]
    stop_ids: tuple[int, ...] = ()


def vote(colors: Sequence[LightColor]) -> tuple[LightColor, float]:
    """Majority colour and its vote fraction; a tied top count gives unknown."""
    if not colors:
        return LightColor.UNKNOWN, 0.0
    counts = Counter(colors).most_common()
    top = counts[0][1]
    if len(counts) > 1 and counts[1][1] == top:
        return LightColor.UNKNOWN, top / len(colors)
    return counts[0][0], top / len(colors)


def associate_stop_lines(frame: Optional[ExteroFrame]) -> dict[int, tuple[int, ...]]:
    """Signal id -> ids of the stop lines it governs, as recognised in the frame."""
    out: dict[int, list[int]] = {}
    if frame is None:
        return {}
    for s in frame.stop_lines:
        if s.signal_id is not None:
            out.setdefault(s.signal_id, []).append(s.stop_id)
    return {k: tuple(sorted(v)) for k, v in sorted(out.items())}


def estimate_tsl_state(frame: Optional[ExteroFrame], associations: dict[int, tuple[int, ...]],
                       history: dict[int, LightHistory], ego_pose: Pose2D,
                       params: Optional[PerceptionParams] = None
                       ) -> tuple[dict[int, LightEstimate], dict[int, LightHistory]]:
    """Append this frame's readings to each light's window and vote.

    A light that goes unobserved keeps its window (no vote is added) and is
    forgotten once it has been missing for a full window length.
    """
    p = params or PerceptionParams()
    n = p.vote_window
    seen = {}
    if frame is not None:
        for obs in frame.lights:
            seen[obs.light_id] = obs
    new_hist: dict[int, LightHistory] = {}
    for lid in sorted(set(history) | set(seen)):
        h = history.get(lid, LightHistory())
        if lid in seen:
            obs = seen[lid]
            pos = ego_pose.to_parent(*obs.position)
            h = LightHistory((h.colors + (obs.color,))[-n:], pos, 0)
        elif frame is not None:
            h = LightHistory(h.colors, h.position, h.unseen + 1)
            if h.unseen >= n:
                continue
        new_hist[lid] = h
    estimates = {}
    for lid, h in new_hist.items():
        state, conf = vote(h.colors)
        estimates[lid] = LightEstimate(lid, state, conf, h.position, associations.get(lid, ()))
    return estimates, new_hist
