"""Regenerate the bundled scenario and map files.

    python3 scripts/build_scenarios.py

Geometry is built from arcs, straights and Hermite blends so the lane
centerlines stay smooth; road edge lengths are the lane lengths.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "drivestack" / "scenarios"
MAPS = OUT / "maps"
STEP = 2.0


def drive(x: float, y: float, heading: float, segments, step: float = STEP):
    """Points along consecutive (length, curvature) pieces; returns (points, end heading)."""
    pts = [(x, y)]
    for length, kappa in segments:
        n = max(1, int(math.ceil(length / step)))
        ds = length / n
        for _ in range(n):
            if abs(kappa) < 1e-12:
                x += ds * math.cos(heading)
                y += ds * math.sin(heading)
            else:
                h1 = heading + kappa * ds
                x += (math.sin(h1) - math.sin(heading)) / kappa
                y -= (math.cos(h1) - math.cos(heading)) / kappa
                heading = h1
            pts.append((x, y))
    return pts, heading


def hermite(p0, h0, p1, h1, step: float = STEP):
    d = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    m0 = np.array([math.cos(h0), math.sin(h0)]) * d
    m1 = np.array([math.cos(h1), math.sin(h1)]) * d
    a, b = np.asarray(p0, float), np.asarray(p1, float)
    t = np.linspace(0.0, 1.0, 400)[:, None]
    curve = ((2 * t ** 3 - 3 * t ** 2 + 1) * a + (t ** 3 - 2 * t ** 2 + t) * m0
             + (-2 * t ** 3 + 3 * t ** 2) * b + (t ** 3 - t ** 2) * m1)
    seg = np.hypot(*np.diff(curve, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(math.ceil(s[-1] / step)))
    si = np.linspace(0.0, s[-1], n + 1)
    out = np.stack([np.interp(si, s, curve[:, 0]), np.interp(si, s, curve[:, 1])], axis=1)
    return [tuple(map(float, p)) for p in out]


def length(pts) -> float:
    a = np.asarray(pts)
    return float(np.sum(np.hypot(*np.diff(a, axis=0).T)))


def rounded(pts):
    return [[round(x, 4), round(y, 4)] for x, y in pts]


def poles(lanes, offset: float, every: float = 25.0, sides=(1, -1)):
    """Landmarks beside the given centerlines, kept at least 4 m apart and clear of every lane."""
    all_pts = [np.asarray(l["centerline"], float) for l in lanes]
    out = []
    for lane in lanes:
        pts = np.asarray(lane["centerline"], float)
        seg = np.hypot(*np.diff(pts, axis=0).T)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        for si in np.arange(every / 2, s[-1], every):
            x, y = np.interp(si, s, pts[:, 0]), np.interp(si, s, pts[:, 1])
            k = min(np.searchsorted(s, si, side="right") - 1, len(pts) - 2)
            h = math.atan2(pts[k + 1, 1] - pts[k, 1], pts[k + 1, 0] - pts[k, 0])
            for side in sides:
                px, py = x - side * offset * math.sin(h), y + side * offset * math.cos(h)
                if any(np.min(np.hypot(c[:, 0] - px, c[:, 1] - py)) < offset - 0.5 for c in all_pts):
                    continue
                if any(math.hypot(px - q[0], py - q[1]) < 4.0 for q in out):
                    continue
                out.append((px, py))
    return [{"id": i + 1, "x": round(x, 3), "y": round(y, 3), "tag": "pole"} for i, (x, y) in enumerate(out)]


def write(name: str, data) -> None:
    path = OUT / name if not name.startswith("maps/") else OUT / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def straight_maps(prefix: str, end: float, stop_x=None, signal=None, extension: float = 120.0,
                  start: float = -20.0) -> None:
    """Single straight lane along y = 0, split into a mission road and a continuation."""
    lane1 = {"id": 1, "road_id": 1, "centerline": rounded(drive(start, 0.0, 0.0, [(end - start, 0.0)])[0]),
             "successors": [2], "width": 3.5}
    if stop_x is not None:
        lane1["stop_lines"] = [{"id": 501, "position": [stop_x, 0.0], "signal_id": signal}]
    lane2 = {"id": 2, "road_id": 2, "centerline": rounded(drive(end, 0.0, 0.0, [(extension, 0.0)])[0]),
             "width": 3.5}
    lanes = [lane1, lane2]
    roads = {"nodes": [{"id": 1, "x": start, "y": 0.0}, {"id": 2, "x": end, "y": 0.0},
                       {"id": 3, "x": end + extension, "y": 0.0}],
             "edges": [{"id": 1, "source": 1, "target": 2, "length": end - start, "speed_limit": 13.9},
                       {"id": 2, "source": 2, "target": 3, "length": extension, "speed_limit": 13.9}]}
    write(f"maps/{prefix}_roads.json", roads)
    write(f"maps/{prefix}_lanes.json", {"lanes": lanes})
    write(f"maps/{prefix}_features.json", {"landmarks": poles(lanes, 7.0)})


def maps_ref(prefix: str) -> dict:
    return {"roads": f"maps/{prefix}_roads.json", "lanes": f"maps/{prefix}_lanes.json",
            "features": f"maps/{prefix}_features.json"}


def build_s1() -> None:
    straight_maps("straight_light", 250.0, stop_x=100.0, signal=9)
    write("s1_red_light.json", {
        "name": "s1_red_light",
        "description": "Straight road; red light turns green; a parked vehicle ahead pulls away and is followed.",
        "seed": 1,
        "duration": 4500,
        "maps": maps_ref("straight_light"),
        "ego": {"x": 0.0, "y": 0.0, "heading": 0.0, "speed": 10.0},
        "mission": {"waypoints": [2], "criterion": "shortest_time"},
        "lights": [{"id": 9, "position": [101.0, 4.0], "phases": [[0, "red"], [1300, "green"]]}],
        "agents": [{"id": 1, "schedule": [[0, 150.0, 0.0], [1300, 150.0, 0.0], [1800, 170.0, 0.0],
                                          [5300, 450.0, 0.0], [8000, 666.0, 0.0]], "heading": 0.0}],
    })


def build_s2() -> None:
    A, B, D = (0.0, 0.0), (120.0, 0.0), (180.0, 0.0)
    ramp = [(60.0, -1.0 / 100.0), (20.0, 0.0)]
    ramp1, h1 = drive(*B, 0.0, ramp)
    ramp2, _ = drive(*D, 0.0, ramp)
    c1, c2 = ramp1[-1], ramp2[-1]
    road5, _ = drive(*c1, h1, [(130.0, 0.0)])
    J = road5[-1]
    road6 = hermite(c2, h1, J, h1)
    lines = {1: drive(*A, 0.0, [(B[0] - A[0], 0.0)])[0], 2: drive(*B, 0.0, [(D[0] - B[0], 0.0)])[0],
             3: ramp1, 4: ramp2, 5: road5, 6: road6}
    succ = {1: [2, 3], 2: [4], 3: [5], 4: [6], 5: [], 6: []}
    lanes = [{"id": k, "road_id": k, "centerline": rounded(v), "successors": succ[k], "width": 3.5}
             for k, v in lines.items()]
    nodes = {1: A, 2: B, 3: c1, 4: D, 5: c2, 6: J}
    ends = {1: (1, 2), 2: (2, 4), 3: (2, 3), 4: (4, 5), 5: (3, 6), 6: (5, 6)}
    roads = {"nodes": [{"id": k, "x": round(v[0], 4), "y": round(v[1], 4)} for k, v in nodes.items()],
             "edges": [{"id": k, "source": a, "target": b, "length": round(length(lines[k]), 3),
                        "speed_limit": 13.9} for k, (a, b) in ends.items()]}
    write("maps/exits_roads.json", roads)
    write("maps/exits_lanes.json", {"lanes": lanes})
    write("maps/exits_features.json", {"landmarks": poles(lanes, 6.5)})
    # barrier across the first exit ramp, 40 m past the split
    ang = 0.4
    bx, by = B[0] + 100.0 * math.sin(ang), B[1] - 100.0 * (1 - math.cos(ang))
    h = -ang
    c, s = math.cos(h), math.sin(h)
    box = [(bx + c * u - s * v, by + s * u + c * v) for u, v in ((1.5, 2.5), (-1.5, 2.5), (-1.5, -2.5), (1.5, -2.5))]
    write("s2_blocked_exit.json", {
        "name": "s2_blocked_exit",
        "description": "Highway with two exits; the planned exit ramp is blocked, so the vehicle takes the next one.",
        "seed": 2,
        "duration": 5000,
        "maps": maps_ref("exits"),
        "ego": {"x": 70.0, "y": 0.0, "heading": 0.0, "speed": 13.0},
        "mission": {"waypoints": [6], "criterion": "shortest_time"},
        "obstacles": [{"id": 1, "polygon": rounded(box)}],
    })


def build_v2x() -> None:
    straight_maps("straight", 300.0)
    base = {
        "seed": 3,
        "duration": 1600,
        "maps": maps_ref("straight"),
        "ego": {"x": 0.0, "y": 0.0, "heading": 0.0, "speed": 13.0},
        "mission": {"waypoints": [2], "criterion": "shortest_time"},
        "faults": [{"mode": "v2x_phantom", "component": "v2x", "start": 50, "end": 1600,
                    "element": {"x": 120.0, "y": 0.0, "heading": 0.0, "speed": 0.0, "remote_id": 7}}],
        "channel": {"loss": 0.0, "delay": 2},
    }
    write("v2x_phantom.json", dict(base, name="v2x_phantom",
                                   description="A remote sender reports a stopped vehicle that does not exist."))
    write("v2x_twin.json", dict(base, name="v2x_twin",
                                description="The same report, but a stopped vehicle really is there.",
                                agents=[{"id": 1, "schedule": [[0, 120.0, 0.0]], "heading": 0.0}]))


def build_faults() -> None:
    common = {"maps": maps_ref("straight"), "ego": {"x": 0.0, "y": 0.0, "heading": 0.0, "speed": 10.0},
              "mission": {"waypoints": [2], "criterion": "shortest_time"}}
    write("map_loop_injection.json", dict(common, name="map_loop_injection", seed=4, duration=400,
                                          description="A map-derived landmark is fed back into the feature map once.",
                                          faults=[{"mode": "map_loop_injection", "component": "map", "start": 200}]))
    write("steering_failure.json", dict(common, name="steering_failure", seed=5, duration=900,
                                        description="Steering fails at 2 s; the stack must come to an emergency stop.",
                                        faults=[{"mode": "component_failed", "component": "steering",
                                                 "start": 200}]))
    write("regulation.json", {
        "name": "regulation",
        "description": "Noiseless straight lane, ego starting 1 m left of the centerline.",
        "seed": 6,
        "duration": 1000,
        "maps": maps_ref("straight"),
        "ego": {"x": 0.0, "y": 1.0, "heading": 0.0, "speed": 10.0},
        "mission": {"waypoints": [2], "criterion": "shortest_time"},
        "sensors": {"extero": {"sigma_det": 0.0, "sigma_lane": 0.0, "sigma_landmark": 0.0},
                    "proprio": {"sigma_speed": 0.0, "sigma_yaw_rate": 0.0}, "gnss": {"sigma": 0.01}},
    })
    write("goal_at_start.json", {
        "name": "goal_at_start",
        "description": "Empty world with the goal under the parked vehicle.",
        "seed": 7,
        "duration": 100,
        "maps": maps_ref("straight"),
        "ego": {"x": 300.0, "y": 0.0, "heading": 0.0, "speed": 0.0},
        "mission": {"waypoints": [2], "criterion": "shortest_time"},
    })


if __name__ == "__main__":
    build_s1()
    build_s2()
    build_v2x()
    build_faults()
    print(f"wrote scenarios to {OUT}")
