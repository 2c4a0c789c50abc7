"""Run metrics as a left fold over trace records.

The same fold runs on the live trace and on a trace read back from disk,
so persisted and live metrics agree by construction.
"""
from __future__ import annotations

from functools import reduce
from typing import Any, Iterable

from .trace import TraceRecord


def empty_metrics() -> dict[str, Any]:
    return {
        "ticks": 0,
        "collisions": 0,
        "goal_reached_tick": None,
        "provenance_violations": 0,
        "escalations": {},
        "maneuvers": {},
        "emergency_stops": 0,
        "degraded_reports": 0,
        "route_versions": 0,
        "max_lateral_deviation": 0.0,
        "max_speed_deviation": 0.0,
        "max_decel": 0.0,
        "max_speed": 0.0,
        "first_stop": None,
        "v2x_received": 0,
        "v2x_dropped": 0,
        "hmi_rejected": 0,
        "stale_link_ticks": 0,
        "min_scene_age": None,
    }


def _bump(d: dict, key: str) -> dict:
    out = dict(d)
    out[key] = out.get(key, 0) + 1
    return out


def fold_record(m: dict[str, Any], r: TraceRecord) -> dict[str, Any]:
    """One fold step; returns a new dict and never mutates ``m``."""
    m = dict(m)
    p = r.payload or {}
    k = (r.module, r.kind)
    if k == ("world", "state"):
        m["ticks"] += 1
        m["max_speed"] = max(m["max_speed"], p["speed"])
    elif k == ("world", "collision"):
        m["collisions"] += 1
    elif k == ("world", "goal_reached"):
        if m["goal_reached_tick"] is None:
            m["goal_reached_tick"] = r.tick
    elif k == ("world", "standstill"):
        if m["first_stop"] is None:
            m["first_stop"] = {"tick": r.tick, "front": p["front"]}
    elif k == ("localization", "loop_violation") or k == ("perception", "provenance_violation"):
        m["provenance_violations"] += 1
    elif k == ("guidance", "escalation"):
        m["escalations"] = _bump(m["escalations"], p["escalation"])
    elif k == ("guidance", "decision"):
        m["maneuvers"] = _bump(m["maneuvers"], p["maneuver"])
        if p["maneuver"] == "emergency_stop":
            m["emergency_stops"] += 1
    elif k == ("stabilization", "report"):
        if p.get("status") == "degraded":
            m["degraded_reports"] += 1
    elif k == ("navigation", "routes"):
        m["route_versions"] += 1
    elif k == ("stabilization", "control"):
        m["max_lateral_deviation"] = max(m["max_lateral_deviation"], p.get("lateral_deviation") or 0.0)
        m["max_speed_deviation"] = max(m["max_speed_deviation"], p.get("speed_deviation") or 0.0)
        m["max_decel"] = max(m["max_decel"], -p["acceleration"])
        age = p.get("scene_age")
        if age is not None:
            m["min_scene_age"] = age if m["min_scene_age"] is None else min(m["min_scene_age"], age)
        link = p.get("linked_age")
        if link is not None and link > p.get("link_budget", link):
            m["stale_link_ticks"] += 1
    elif k == ("communication", "v2x_rx"):
        m["v2x_received"] += p["messages"]
        m["v2x_dropped"] += p["dropped"]
    elif k == ("communication", "hmi_rejected"):
        m["hmi_rejected"] += 1
    return m


def metric_series(records: Iterable[TraceRecord]) -> dict[str, list]:
    """Per-tick plot data: true lane offset, speed and the escalations raised at that tick."""
    out: dict[str, list] = {"tick": [], "offset": [], "speed": [], "escalations": []}
    for r in records:
        if (r.module, r.kind) == ("world", "state"):
            out["tick"].append(r.tick)
            out["offset"].append(r.payload.get("offset"))
            out["speed"].append(r.payload["speed"])
            out["escalations"].append(0)
        elif (r.module, r.kind) == ("guidance", "escalation") and out["tick"] and out["tick"][-1] == r.tick:
            out["escalations"][-1] += 1
    return out


def summarize_metrics(records: Iterable[TraceRecord], series: bool = False) -> dict[str, Any]:
    records = list(records)
    m = reduce(fold_record, records, empty_metrics())
    if series:
        m["series"] = metric_series(records)
    return m
