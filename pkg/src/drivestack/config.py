"""Tunable parameters for every stage of the stack.

Scenario files may override any field through a nested ``config`` object.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


@dataclass
class Timing:
    base_dt: float = 0.01
    perception_every: int = 5
    guidance_every: int = 10
    navigation_every: int = 100
    # age of the scene handed to guidance; models context-modeling latency
    scene_latency: int = 10


@dataclass
class VehicleParams:
    wheelbase: float = 2.7
    length: float = 4.5
    width: float = 1.8
    rear_overhang: float = 0.9
    max_steer: float = 0.6
    max_accel: float = 3.0
    max_decel: float = 6.0

    @property
    def front_offset(self) -> float:
        return self.length - self.rear_overhang


@dataclass
class PerceptionParams:
    gate: float = 3.0
    confirm_hits: int = 3
    drop_misses: int = 5
    process_noise: float = 0.5
    measurement_sigma: float = 0.5
    initial_velocity_sigma: float = 5.0
    lane_alpha: float = 0.3
    lane_sample_step: float = 2.0
    vote_window: int = 5
    l_occ: float = 0.85
    l_free: float = -0.4
    l_min: float = -5.0
    l_max: float = 5.0
    occupied_p: float = 0.7
    grid_resolution: float = 1.0
    grid_cells: int = 180
    lane_assign_distance: float = 2.0
    hysteresis_on: int = 3
    hysteresis_off: int = 5
    low_energy: float = 0.05
    congestion_ratio: float = 0.3


@dataclass
class LocalizationParams:
    association_radius: float = 3.0
    smoothing_beta: float = 0.2
    uncertainty_cutoff: float = 25.0
    flow_ttl: int = 600
    extract_radius: float = 150.0
    observation_sigma: float = 0.3
    heading_sigma: float = 0.02
    motion_sigma: float = 0.05
    unmatched_inflation: float = 2.0


@dataclass
class GuidanceParams:
    ahead: float = 80.0
    behind: float = 20.0
    t_gap_min: float = 2.0
    t_follow: float = 2.0
    a_comfort: float = 2.0
    envelope_margin: float = 5.0
    comfort_speed: float = 13.9
    standstill_gap: float = 5.0
    stop_margin: float = 0.25
    v2x_speed_factor: float = 0.7
    v2x_range: float = 60.0
    failure_persistence: int = 2
    lateral_band: float = 6.0
    lookahead_time: float = 3.0
    lookahead_min: float = 20.0
    corridor_margin: float = 0.5
    corridor_behind: float = 10.0
    corridor_ahead: float = 90.0
    goal_tolerance: float = 2.0
    yellow_max_decel: float = 3.0
    standstill_speed: float = 0.1


@dataclass
class StabilizationParams:
    dt: float = 0.1
    horizon: float = 4.0
    lateral_samples: int = 7
    w_acc: float = 0.1
    a_accel: float = 1.5
    a_decel: float = 1.5
    a_brake: float = 3.0
    follow_gain: float = 0.5
    lookahead_min: float = 3.0
    lookahead_gain: float = 0.5
    k_v: float = 1.0
    a_limit: float = 3.0
    max_lateral_deviation: float = 0.5
    max_speed_deviation: float = 2.0
    deviation_cycles: int = 3
    stopped_lead_speed: float = 0.5
    approach_speed: float = 8.0
    stop_tolerance: float = 0.05
    follow_max_speed: float = 20.0
    w_lat: float = 1.0
    w_dev: float = 1.0
    replan_every: int = 10


@dataclass
class NavigationParams:
    k: int = 3
    penalty: float = 10.0
    turn_weight: float = 2.0
    congestion_factor: float = 2.0


@dataclass
class StackConfig:
    timing: Timing = field(default_factory=Timing)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    perception: PerceptionParams = field(default_factory=PerceptionParams)
    localization: LocalizationParams = field(default_factory=LocalizationParams)
    guidance: GuidanceParams = field(default_factory=GuidanceParams)
    stabilization: StabilizationParams = field(default_factory=StabilizationParams)
    navigation: NavigationParams = field(default_factory=NavigationParams)


def apply_overrides(cfg: Any, overrides: dict[str, Any], path: str = "config") -> Any:
    """Return a copy of ``cfg`` with nested overrides applied; unknown keys raise KeyError."""
    names = {f.name: f for f in dataclasses.fields(cfg)}
    changes = {}
    for key, value in overrides.items():
        if key not in names:
            raise KeyError(f"{path}.{key}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise KeyError(f"{path}.{key} must be an object")
            changes[key] = apply_overrides(current, value, f"{path}.{key}")
        else:
            changes[key] = type(current)(value) if isinstance(current, (int, float)) and not isinstance(current, bool) else value
    return dataclasses.replace(cfg, **changes)
