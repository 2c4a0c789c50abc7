"""Deterministic closed loop: ground truth, sensors, the driving stack and actuation on a 10 ms tick.

Per tick, in this order: world step bookkeeping, sensing, perception and
localization (every ``perception_every`` ticks), guidance and communication
(every ``guidance_every``), navigation (every ``navigation_every`` or on
request), stabilization, actuation. Every hand-off between modules is
written to the trace as it happens.
"""
from __future__ import annotations

import dataclasses
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import shapely

from ..communication import (HmiCommand, Integrity, MessageKind, ReceivedInputs, V2xBus, V2xMessage,
                             emit_hmi_feedback, ingest_hmi, merge_v2x, road_state_message, situation_message,
                             v2x_receive, v2x_send)
from ..config import StackConfig
from ..core.errors import ContractViolation
from ..core.geometry import Polyline, Pose2D, rectangle
from ..core.provenance import MAP, VEH_ENV
from ..core.types import (Confirmation, DynamicElement, Escalation, ExecutionReport, Maneuver, Purpose, Reason,
                          RouteSet, Scene, SceneryElement, SceneryKind, Status, TargetPose)
from ..guidance import (GuidanceState, assess_situation, build_v2x_situation, extract_situation, monitor_guidance,
                        plan_behavior)
from ..localization.maps import Landmark, MapStack
from ..localization.pose import GlobalPose, MapRelativePose, fuse_global_pose, initial_global_pose, \
    match_map_relative_pose
from ..localization.provision import LoopViolation, retrieve_map_extract, update_feature_map, update_road_state
from ..navigation import NavigationError, NavigationState, goal_node_position, handle_guidance_request, \
    locate_edge, replan
from ..perception.ego_motion import ZERO_MOTION, EgoMotion, compose_motion, estimate_ego_motion
from ..perception.lanes import LaneTrackerState, extract_track_lanes
from ..perception.occupancy import empty_grid, extract_grid_features, update_occupancy_grid
from ..perception.road_level import model_road_level
from ..perception.scenery import (LandmarkSighting, StopLineSighting, assemble_scene, model_dynamic_environment,
                                  model_scenery)
from ..perception.self_monitor import SelfMonitorRecord, SelfMonitorState, build_self_representation, monitor_self
from ..perception.signals import associate_stop_lines, estimate_tsl_state
from ..perception.tracking import LocalDetection, TrackSet, track_dynamic_elements
from ..stabilization.control import (DeviationMonitor, compute_control, monitor_stabilization,
                                     refresh_target_features, tracking_deviation, trajectory_path)
from ..stabilization.selection import MovingObstacle, select_trajectory
from ..stabilization.trajectory import Trajectory, brake_trajectory, generate_candidates
from ..world.sensors import SensorStream, sense_environment, sense_gnss, sense_vehicle
from ..world.sim import ActuatorCommand, GroundTruthWorld, VehicleState, ego_collisions, step_world
from .metrics import summarize_metrics
from .scenario import ScenarioSpec
from .trace import Trace

EGO_ID = 0
PHANTOM_SENDER = 900
V2X_ELEMENT_TTL = 50  # ticks a received V2X element stays in the scene without a refresh
STANDSTILL = 0.01


@dataclass
class RunResult:
    scenario: ScenarioSpec
    trace: Trace
    metrics: dict[str, Any]
    world: GroundTruthWorld


@dataclass
class _Perception:
    tracks: TrackSet = field(default_factory=TrackSet)
    grid: Any = None
    lanes: LaneTrackerState = field(default_factory=LaneTrackerState)
    lights: dict = field(default_factory=dict)
    monitor: SelfMonitorState = field(default_factory=SelfMonitorState)
    record: Optional[SelfMonitorRecord] = None
    motion_since: EgoMotion = ZERO_MOTION
    last_motion: EgoMotion = ZERO_MOTION
    last_yaw_rate: Optional[float] = None
    speed: float = 0.0
    scenes: deque = field(default_factory=lambda: deque(maxlen=8))
    latest_local: Optional[Scene] = None
    v2x_cache: dict = field(default_factory=dict)  # id -> (element, tick received)
    pending_v2x: Optional[ReceivedInputs] = None


@dataclass
class _Localization:
    global_pose: GlobalPose
    map_pose: MapRelativePose
    extract: Optional[MapStack] = None
    map_to_local: Optional[Pose2D] = None
    motion_since: EgoMotion = ZERO_MOTION


class ClosedLoop:
    """One scenario run. ``run()`` drives it to completion; ``step()`` advances a single tick."""

    def __init__(self, spec: ScenarioSpec, config: Optional[StackConfig] = None, log_candidates: bool = False):
        self.spec = spec
        self.log_candidates = log_candidates
        self.cfg = config or spec.config
        cfg = self.cfg
        self.dt = cfg.timing.base_dt
        self.trace = Trace()
        start = Pose2D(spec.ego.x, spec.ego.y, spec.ego.heading)
        self.maps = spec.maps
        self.roads = spec.maps.roads
        self.features = spec.maps.features
        self.world = GroundTruthWorld(
            0, VehicleState(start, spec.ego.speed, 0.0, cfg.vehicle.wheelbase), spec.agents, spec.lights,
            spec.obstacles, spec.maps.lanes, spec.maps.features, tuple(f.window for f in spec.faults),
            spec.energy_level, spec.energy_per_meter, self.dt, cfg.vehicle)
        self.streams = {k: SensorStream(spec.seed, k) for k in ("extero", "proprio", "gnss")}
        # the local (odometry) frame starts out coincident with the map frame
        self.odom = start
        self.per = _Perception(grid=empty_grid(start, cfg.perception), speed=spec.ego.speed)
        gp = initial_global_pose(start, tick=0)
        self.loc = _Localization(gp, MapRelativePose(start, gp.covariance, 0, 0), map_to_local=Pose2D(0.0, 0.0, 0.0))
        self.nav = NavigationState(spec.mission)
        self.routes: Optional[RouteSet] = None
        self.current_edge: Optional[int] = None
        self.nav_request: Optional[ExecutionReport] = None
        self.nav_forced = False
        self.gstate = GuidanceState()
        self.gparams = cfg.guidance
        self.inbox: list[ExecutionReport] = []
        self.targets: tuple[TargetPose, ...] = ()
        self.targets_new = False
        self.auxiliary = frozenset()
        self.maneuver: Optional[Maneuver] = None
        self.scene_tick_used: Optional[int] = None
        self.requested: Optional[Maneuver] = None
        self.speed_setpoint: Optional[float] = None
        self.last_feedback_routes: Optional[RouteSet] = None
        self.pending_warnings: list[str] = []
        self.traj: Optional[Trajectory] = None
        self.traj_path: Optional[Polyline] = None
        self.deviation = DeviationMonitor()
        self.bus = V2xBus(spec.channel.loss, spec.channel.delay, spec.seed)
        self.bus.register(EGO_ID)
        self.hmi_queue = deque(spec.hmi)
        self.v2x_scripts = sorted(((t, i) for i, m in enumerate(spec.v2x) for t in m.ticks(spec.duration)))
        self.v2x_cursor = 0
        self.goal_map = goal_node_position(self.roads, spec.mission.waypoints[-1]) if spec.mission else None
        self.goal_reached = False
        self.was_moving = spec.ego.speed > STANDSTILL
        self.contacts: set[str] = set()
        self.cmd = ActuatorCommand(0.0, 0.0)
        self.done = False
        self._road_reports: tuple = ()
        self._landmark_reports: tuple = ()
        self._local_features: list[SceneryElement] = []
        self._last_situation = None
        self._last_scene: Optional[Scene] = None

    # --- helpers ---------------------------------------------------------------------

    def _fault_ticks(self, mode: str):
        return [f for f in self.spec.faults if f.window.mode == mode]

    def _goal_local(self) -> Optional[tuple[float, float]]:
        if self.goal_map is None or self.loc.map_to_local is None:
            return None
        return self.loc.map_to_local.to_parent(*self.goal_map)

    # --- stages ------------------------------------------------------------------------

    def _world_stage(self, t: int) -> None:
        w = self.world
        ego = w.ego
        fp = w.ego_footprint()
        self.trace.add(t, "world", "state", {"x": ego.pose.x, "y": ego.pose.y, "heading": ego.pose.heading,
                                              "speed": ego.speed, "offset": w.lane_offset(),
                                              "energy": w.energy_level})
        hits = set(ego_collisions(w))
        for name in sorted(hits - self.contacts):
            self.trace.add(t, "world", "collision", {"with": name})
        self.contacts = hits
        if self.goal_map is not None and not self.goal_reached:
            d = shapely.Polygon(fp).distance(shapely.Point(*self.goal_map))
            if d <= self.gparams.goal_tolerance:
                self.goal_reached = True
                self.trace.add(t, "world", "goal_reached", {"distance": float(d)})
        moving = ego.speed > STANDSTILL
        if self.was_moving and not moving:
            front = ego.pose.to_parent(self.cfg.vehicle.front_offset, 0.0)
            self.trace.add(t, "world", "standstill", {"front": list(front)})
        self.was_moving = moving
        # remote V2X senders are part of the world
        while self.v2x_cursor < len(self.v2x_scripts) and self.v2x_scripts[self.v2x_cursor][0] <= t:
            tick, i = self.v2x_scripts[self.v2x_cursor]
            self.v2x_cursor += 1
            if tick == t:
                self._publish_script(self.spec.v2x[i], t)
        for f in self._fault_ticks("v2x_phantom"):
            if f.window.active(t) and (t - f.window.start) % self.cfg.timing.guidance_every == 0:
                e = f.element
                el = DynamicElement(e.remote_id, Pose2D(e.x, e.y, e.heading), e.speed, 0.0, (e.length, e.width),
                                    ((0.25, 0.0), (0.0, 0.25)), VEH_ENV)
                msg = situation_message(PHANTOM_SENDER, t, None, 0.0, [el])
                self.bus.publish(msg)
                self.trace.add(t, "world", "v2x_sent", {"sender": PHANTOM_SENDER, "kind": msg.kind.value,
                                                         "phantom": True})

    def _publish_script(self, m, t: int) -> None:
        integrity = Integrity(m.integrity)
        if m.raw_body is not None:
            msg = V2xMessage(m.sender, t, MessageKind(m.kind), m.raw_body, integrity)
        elif m.kind == "road_state":
            msg = road_state_message(m.sender, t, [dict(r) for r in m.road_reports], integrity)
        elif m.kind == "situation_extract":
            els = [DynamicElement(e.remote_id, Pose2D(e.x, e.y, e.heading), e.speed, 0.0, (e.length, e.width),
                                  ((0.25, 0.0), (0.0, 0.25)), VEH_ENV) for e in m.elements]
            pose = Pose2D(*m.sender_pose) if m.sender_pose is not None else None
            msg = situation_message(m.sender, t, pose, m.sender_speed, els, integrity)
        else:
            body = json.dumps({"landmarks": [dict(x) for x in m.landmarks]}, sort_keys=True)
            msg = V2xMessage(m.sender, t, MessageKind.MAP_UPDATE, body, integrity)
        self.bus.publish(msg)
        self.trace.add(t, "world", "v2x_sent", {"sender": m.sender, "kind": m.kind})

    def _sense_vehicle(self, t: int) -> None:
        cfg = self.cfg
        f = sense_vehicle(self.world, self.spec.sensors.proprio, self.streams["proprio"])
        if f is None:
            # no proprioceptive frame: coast on the last motion estimate
            motion = dataclasses.replace(self.per.last_motion, degraded=True)
        else:
            motion = estimate_ego_motion(f, self.dt, self.per.last_yaw_rate, self.spec.sensors.proprio.sigma_speed,
                                         self.spec.sensors.proprio.sigma_yaw_rate)
            self.per.last_yaw_rate = motion.yaw_rate
            self.per.speed = f.wheel_speed
            rec, self.per.monitor = monitor_self(f, self.per.monitor, cfg.perception, self.dt)
            self.per.record = rec
            for c in rec.newly_flagged:
                h = rec.component_health[c]
                self.trace.add(t, "sensors", "health", {"component": c, "health": h.value})
                if h.value == "failed":
                    self.inbox.append(ExecutionReport("perception", t, Status.FAILED, Reason.COMPONENT_FAILED,
                                                      component=c))
        self.per.last_motion = motion
        self.odom = self.odom.compose(motion.as_pose())
        self.per.motion_since = compose_motion(self.per.motion_since, motion)
        self.loc.motion_since = compose_motion(self.loc.motion_since, motion)

    def _perception_stage(self, t: int) -> None:
        cfg = self.cfg
        pp = cfg.perception
        frame = sense_environment(self.world, self.spec.sensors.extero, self.streams["extero"])
        motion, self.per.motion_since = self.per.motion_since, ZERO_MOTION
        odom = self.odom
        dets = []
        returns = []
        if frame is not None:
            for d in frame.detections:
                dets.append(LocalDetection(odom.to_parent(*d.position), d.extent, odom.heading + d.heading,
                                           d.classification, d.privacy))
            returns = list(frame.static_returns)
        step_dt = cfg.timing.perception_every * self.dt
        self.per.tracks = track_dynamic_elements(dets, self.per.tracks, motion, step_dt, pp, t)
        self.per.grid = update_occupancy_grid(self.per.grid, returns, motion, pp, ego_pose=odom)
        grid_features = extract_grid_features(self.per.grid, pp)
        self.per.lanes = extract_track_lanes(frame, odom, self.per.lanes, pp)
        lights, self.per.lights = estimate_tsl_state(frame, associate_stop_lines(frame), self.per.lights, odom, pp)
        stops = []
        marks = []
        if frame is not None:
            stops = [StopLineSighting(s.stop_id, odom.to_parent(*s.position), s.lane_id, s.signal_id)
                     for s in frame.stop_lines]
            marks = [LandmarkSighting(odom.to_parent(*m.position), m.tag) for m in frame.landmarks]
        local, extended, warnings = model_scenery(self.per.lanes, grid_features, lights, stops, marks, t,
                                                  self.loc.extract, self.loc.map_to_local)
        for w in warnings:
            self.trace.add(t, "perception", "warning", w)
        # V2X content received on the previous communication cycle
        onboard_local = model_dynamic_environment(self.per.tracks, local, pp)
        extra = self._v2x_elements(t)
        record = self.per.record
        if record is None:
            raise ContractViolation("no self-monitoring record before the first perception cycle",
                                    module="perception", tick=t)
        delta = motion.as_pose()
        self_rep = build_self_representation(odom, self.per.speed, (delta.x, delta.y, delta.heading), record)
        local_scene = assemble_scene(local, onboard_local, self_rep, t)
        if local_scene.extended:
            self.trace.add(t, "perception", "provenance_violation", {"scene": t, "detail": "local scene carries MAP"})
        self.per.latest_local = local_scene
        scenery = extended if extended is not None else local
        merged, remaining = merge_v2x(model_dynamic_environment(self.per.tracks, scenery, pp).elements, extra)
        dyn = model_dynamic_environment(TrackSet(t), scenery, pp, extra=remaining)
        dyn = dataclasses.replace(dyn, elements=tuple(sorted(merged + list(dyn.elements), key=lambda e: e.id)))
        scene = assemble_scene(scenery, dyn, self_rep, t)
        self.per.scenes.append(scene)
        self.trace.add(t, "perception", "scene", _scene_summary(scene))
        # road level: onboard observations plus V2X road reports
        reports = self.per.pending_v2x.road_reports if self.per.pending_v2x is not None else ()
        observed = [e for e in scene.dynamic_elements if e.confirmation == Confirmation.ONBOARD_CONFIRMED]
        lanes_map = self.loc.extract.lanes if self.loc.extract is not None else None
        road_model = model_road_level(self.roads, lanes_map, observed, reports, t, pp)
        self._road_reports = road_model.reports
        self._landmark_reports = self.per.pending_v2x.landmarks if self.per.pending_v2x is not None else ()
        self.per.pending_v2x = None
        self._local_features = [e for e in local.elements if e.kind == SceneryKind.LANDMARK]

    def _v2x_elements(self, t: int) -> list[DynamicElement]:
        cache = self.per.v2x_cache
        if self.per.pending_v2x is not None:
            for e in self.per.pending_v2x.elements:
                # V2X elements are placed through the map-relative pose
                cache[e.id] = (dataclasses.replace(e, provenance=e.provenance | MAP), t)
        for k in [k for k, (_, tr) in cache.items() if t - tr > V2X_ELEMENT_TTL]:
            del cache[k]
        return [cache[k][0] for k in sorted(cache)]

    def _localization_stage(self, t: int) -> None:
        lp = self.cfg.localization
        fix = sense_gnss(self.world, self.spec.sensors.gnss, self.streams["gnss"])
        motion, self.loc.motion_since = self.loc.motion_since, ZERO_MOTION
        self.loc.global_pose = fuse_global_pose(fix, motion, self.loc.global_pose, lp, t)
        frame_marks = []
        # landmark observations in the ego frame, recovered from the local-frame sightings
        for e in self._local_features:
            frame_marks.append(self.odom.to_local(*e.geometry[0]))
        self.loc.map_pose = match_map_relative_pose(self.loc.global_pose, frame_marks, self.features, lp, t)
        if self.loc.map_pose.matched:
            # landmark matching corrects the global estimate as well
            self.loc.global_pose = GlobalPose(self.loc.map_pose.pose, self.loc.global_pose.covariance, t,
                                              self.loc.global_pose.provenance)
        self.loc.map_to_local = self.odom.compose(self.loc.map_pose.pose.inverse())
        local_to_map = self.loc.map_to_local.inverse()
        maps = MapStack(self.roads, self.maps.lanes, self.features)
        self.loc.extract, warnings = retrieve_map_extract(self.loc.map_pose, lp.extract_radius, maps, lp)
        for w in warnings:
            self.trace.add(t, "localization", "warning", w)
        feats = list(self._local_features)
        for f in self._fault_ticks("map_loop_injection"):
            if f.window.start == t:
                feats.append(SceneryElement("feat/injected", SceneryKind.LANDMARK, (self.odom.xy,), VEH_ENV | MAP,
                                            tag="pole"))
        try:
            self.features, warnings = update_feature_map(feats, self.loc.map_pose, self.features, t, local_to_map, lp)
        except LoopViolation as exc:
            self.trace.add(t, "localization", "loop_violation", {"element": str(exc.element_id)})
            clean = [f for f in feats if "MAP" not in f.provenance]
            self.features, warnings = update_feature_map(clean, self.loc.map_pose, self.features, t, local_to_map, lp)
        for w in warnings:
            self.trace.add(t, "localization", "warning", w)
        for x, y, tag in self._landmark_reports:
            self.features = _add_landmark(self.features, x, y, tag, t, lp.association_radius)
        self.roads, warnings = update_road_state(self._road_reports, self.roads, t, lp)
        for w in warnings:
            self.trace.add(t, "localization", "warning", w)
        mp = self.loc.map_pose
        self.trace.add(t, "localization", "pose", {"x": mp.pose.x, "y": mp.pose.y, "heading": mp.pose.heading,
                                                    "matched": mp.matched, "uncertainty": mp.uncertainty,
                                                    "global_cov_trace": float(np.trace(self.loc.global_pose.cov()))})

    def _guidance_stage(self, t: int) -> None:
        latency = self.cfg.timing.scene_latency
        scene = None
        for s in reversed(self.per.scenes):
            if s.tick <= t - latency:
                scene = s
                break
        if scene is None:
            return
        gp = self.gparams
        route = self.routes
        sit, ctx = extract_situation(scene, route, Purpose.EGO_PLANNING, self.current_edge, self._goal_local(), gp,
                                     self.cfg.vehicle, t)
        sit = assess_situation(sit, ctx, gp)
        reports = self.inbox
        self.inbox = []
        for r in reports:
            if r.status != Status.NOMINAL:
                self.trace.add(t, "guidance", "report_in", r)
        esc, rep, self.gstate = monitor_guidance(reports, self.gstate, t, ctx, gp)
        failing = any(r.reason == Reason.NO_COLLISION_FREE_TRAJECTORY for r in reports)
        self.trace.add(t, "guidance", "cycle", {"failing": failing, "failing_cycles": self.gstate.failing_cycles,
                                                "scene_tick": scene.tick})
        if rep is not None:
            self.trace.add(t, "guidance", "escalation", {"escalation": esc.value, "reason": rep.reason.value,
                                                          "edge_id": rep.edge_id, "location": rep.location,
                                                          "component": rep.component})
            self.pending_warnings.append(f"escalation {esc.value}: {rep.reason.value}")
            if esc == Escalation.REPLAN_ROUTE:
                self.nav_request = rep
        requested, self.requested = self.requested, None
        dec, self.gstate = plan_behavior(sit, ctx, esc, self.gstate, gp, requested)
        sit = dataclasses.replace(sit, planned_maneuver=dec.maneuver)
        self.targets = dec.targets
        self.targets_new = True
        self.auxiliary = dec.auxiliary
        self.maneuver = dec.maneuver
        self.scene_tick_used = scene.tick
        tp = dec.targets[0]
        self.trace.add(t, "guidance", "decision", {
            "maneuver": dec.maneuver.value, "rule": dec.rule, "conditions": list(dec.conditions),
            "reason": dec.reason.value, "scene_tick": scene.tick, "auxiliary": sorted(a.value for a in dec.auxiliary),
            "target": {"x": tp.pose.x, "y": tp.pose.y, "heading": tp.pose.heading, "speed": tp.target_speed,
                       "linked": tp.linked_element, "speed_cap": tp.speed_cap},
            "assessments": {k: [a.subject, a.score, a.flag, a.value] for k, a in sorted(sit.assessments.items())},
        })
        self._last_situation = sit
        self._last_scene = scene
        self.pending_warnings.extend(dec.warnings)

    def _communication_stage(self, t: int) -> None:
        # HMI commands due by now
        while self.hmi_queue and self.hmi_queue[0].tick <= t:
            cmd: HmiCommand = self.hmi_queue.popleft()
            directive, warnings = ingest_hmi(cmd)
            if directive is None:
                for w in warnings:
                    self.trace.add(t, "communication", "hmi_rejected", w)
                self.pending_warnings.extend(warnings)
                continue
            self.trace.add(t, "communication", "hmi", {"target": directive.target, "level": cmd.level.value})
            if directive.target == "navigation":
                self.nav = dataclasses.replace(self.nav, mission=directive.mission)
                self.goal_map = goal_node_position(self.roads, directive.mission.waypoints[-1])
                self.goal_reached = False
                self.nav_forced = True
            elif directive.target == "guidance":
                self.requested = directive.maneuver
            else:
                name, value = directive.setpoint
                if name == "time_gap":
                    self.gparams = dataclasses.replace(self.gparams, t_follow=value)
                else:
                    self.speed_setpoint = value
        sit = self._last_situation
        for fb in emit_hmi_feedback(t, self.routes, sit if sit is not None and sit.tick == t else None,
                                    self.pending_warnings, self.last_feedback_routes):
            self.trace.add(t, "communication", "feedback", {"kind": fb.kind, "payload": fb.payload})
        self.last_feedback_routes = self.routes
        self.pending_warnings = []
        # V2X: broadcast our extract, then collect what arrived
        scene = self._last_scene
        if scene is not None and self.loc.map_to_local is not None and sit is not None and sit.tick == t:
            v2x_sit = build_v2x_situation(scene, self.loc.map_to_local.inverse(), self.maneuver, t)
            v2x_send(v2x_sit, self.bus, EGO_ID, t)
        msgs = self.bus.deliver(EGO_ID, t)
        if msgs:
            inputs = v2x_receive(msgs, self.loc.map_to_local, t)
            self.per.pending_v2x = inputs
            self.trace.add(t, "communication", "v2x_rx", {
                "messages": len(msgs), "dropped": inputs.dropped, "elements": [e.id for e in inputs.elements],
                "road_reports": len(inputs.road_reports), "landmarks": len(inputs.landmarks)})

    def _navigation_stage(self, t: int) -> None:
        if self.nav.mission is None:
            return
        periodic = t % self.cfg.timing.navigation_every == 0
        if not (periodic or self.nav_request is not None or self.nav_forced or self.routes is None):
            return
        prefer = self.routes.best.edges if self.routes is not None else ()
        edge = locate_edge(self.loc.map_pose.pose, self.roads, self.maps.lanes, prefer)
        self.current_edge = edge
        low_energy = bool(self.per.record is not None and self.per.record.low_energy)
        np_ = self.cfg.navigation
        try:
            if self.nav_request is not None:
                rs, self.nav = handle_guidance_request(self.nav_request, self.nav, self.roads, edge, None, low_energy,
                                                       t, np_)
                self.trace.add(t, "navigation", "replan", {"edge_id": self.nav_request.edge_id,
                                                           "penalties": {str(k): v for k, v in
                                                                         sorted(self.nav.penalties.items())}})
            else:
                version = self.nav.version + (1 if self.nav_forced else 0)
                rs = replan(dataclasses.replace(self.nav, version=version), self.roads, edge, None, low_energy, t, np_)
        except NavigationError as exc:
            self.trace.add(t, "navigation", "error", {"kind": exc.kind, "message": str(exc)})
            self.nav_request = None
            self.nav_forced = False
            return
        self.nav_request = None
        self.nav_forced = False
        if self.routes is None or _route_key(rs) != _route_key(self.routes) or rs.version != self.routes.version:
            if self.routes is not None and rs.version == self.routes.version and _route_key(rs) != _route_key(self.routes):
                rs = dataclasses.replace(rs, version=self.routes.version + 1)
            self.routes = rs
            self.nav = dataclasses.replace(self.nav, routes=rs, version=rs.version)
            self.trace.add(t, "navigation", "routes", {
                "version": rs.version, "current_edge": edge,
                "best": {"edges": list(rs.best.edges), "cost": rs.best.cost},
                "alternatives": [{"edges": list(r.edges), "cost": r.cost} for r in rs.alternatives]})

    def _stabilization_stage(self, t: int) -> None:
        sp = self.cfg.stabilization
        vp = self.cfg.vehicle
        timing = self.cfg.timing
        if t % timing.perception_every == 0 and self.targets:
            refreshed, reports = refresh_target_features(self.targets, self.per.tracks, t)
            self.targets = refreshed
            for r in reports:
                self.trace.add(t, "stabilization", "report", r)
                self.inbox.append(r)
                self.targets_new = True
        speed = self.per.speed
        if self.targets and (self.targets_new or self.traj is None or t - self.traj.tick >= sp.replan_every):
            self._plan(t, speed)
        if self.traj is None:
            cmd = ActuatorCommand(0.0, 0.0 if not self.targets else -sp.a_limit, self.auxiliary)
            self.cmd = cmd
            self.trace.add(t, "stabilization", "control", {"steering": 0.0, "acceleration": cmd.acceleration,
                                                           "v_ref": None, "scene_age": None, "linked_age": None})
            return
        elapsed = (t - self.traj.tick) * self.dt
        if self.traj_path is None:
            self.traj_path = trajectory_path(self.traj)
        cmd, rep = compute_control(self.traj, speed, elapsed, sp, vp, self.auxiliary, tick=t, ego=self.odom,
                                   path=self.traj_path)
        v_ref = self.traj.state_at(elapsed)[0]
        if self.speed_setpoint is not None and v_ref > self.speed_setpoint:
            cmd = dataclasses.replace(cmd, acceleration=max(-sp.a_limit, min(cmd.acceleration,
                                                                             sp.k_v * (self.speed_setpoint - speed))))
        if rep.status != Status.NOMINAL:
            self.trace.add(t, "stabilization", "report", rep)
            self.inbox.append(rep)
        lat, dv = tracking_deviation(self.traj, self.odom, speed, elapsed, self.traj_path)
        mrep, self.deviation = monitor_stabilization(lat, dv, self.deviation, t, sp)
        if mrep.status != Status.NOMINAL and self.deviation.count == sp.deviation_cycles:
            self.trace.add(t, "stabilization", "report", mrep)
            self.inbox.append(mrep)
        tp = self.targets[0] if self.targets else None
        linked_age = None
        if tp is not None and tp.maneuver == Maneuver.FOLLOW_VEHICLE and tp.linked_state is not None:
            linked_age = t - tp.linked_state.tick
        self.cmd = cmd
        self.trace.add(t, "stabilization", "control", {
            "steering": cmd.steering_angle, "acceleration": cmd.acceleration, "v_ref": v_ref,
            "lateral_deviation": lat, "speed_deviation": dv, "maneuver": self.maneuver.value if self.maneuver else None,
            "scene_age": None if self.scene_tick_used is None else t - self.scene_tick_used,
            "linked_age": linked_age, "link_budget": timing.perception_every})

    def _plan(self, t: int, speed: float) -> None:
        sp = self.cfg.stabilization
        tp = self.targets[0]
        lat_state = (0.0, 0.0)
        cands = generate_candidates(tp, self.odom, speed, sp, lat_state, t)
        static = []
        moving = []
        if self.per.latest_local is not None:
            static = [np.asarray(e.geometry, dtype=float) for e in self.per.latest_local.scenery
                      if e.kind == SceneryKind.STATIC_OBSTACLE and len(e.geometry) >= 3]
        for tr in self.per.tracks.confirmed():
            x, y = tr.position
            lx, _ = self.odom.to_local(x, y)
            if lx < 0.0:
                continue  # behind the ego: not ours to avoid
            vx, vy = tr.mean[2], tr.mean[3]
            heading = tr.motion_heading
            poly = rectangle(x, y, heading, tr.extent[0], tr.extent[1])
            moving.append(MovingObstacle(np.asarray(poly), (vx, vy), tr.id))
        res = select_trajectory(cands, tp, static, moving, sp, self.cfg.vehicle, t)
        self.targets_new = False
        if self.log_candidates:
            self.trace.add(t, "stabilization", "candidates", [
                {"index": c.index, "lateral": c.lateral_sample, "end_time": c.end_time,
                 "cost": c.cost if math.isfinite(c.cost) else None, "collision_free": c.collision_free}
                for c in res.assessed])
        if res.trajectory is None:
            self.trace.add(t, "stabilization", "report", res.report)
            self.inbox.append(res.report)
            self.traj = brake_trajectory(self.odom, speed, sp, t)
            self.traj_path = None
            return
        self.traj = res.trajectory
        self.traj_path = None

    # --- driver ------------------------------------------------------------------------

    def step(self) -> None:
        t = self.world.tick
        timing = self.cfg.timing
        self._world_stage(t)
        self._sense_vehicle(t)
        if t % timing.perception_every == 0:
            self._perception_stage(t)
            self._localization_stage(t)
        if t % timing.guidance_every == 0:
            self._guidance_stage(t)
            self._communication_stage(t)
        self._navigation_stage(t)
        self._stabilization_stage(t)
        res = step_world(self.world, self.cmd)
        if res.saturated:
            self.trace.add(t, "actuation", "saturated", {"steering": self.cmd.steering_angle,
                                                          "acceleration": self.cmd.acceleration})
        self.world = res.world
        stopped = self.world.ego.speed <= STANDSTILL
        if stopped and (self.goal_reached or self.gstate.stop_system):
            self.done = True

    def run(self) -> RunResult:
        while not self.done and self.world.tick < self.spec.duration:
            self.step()
        return RunResult(self.spec, self.trace, summarize_metrics(self.trace), self.world)


def run_closed_loop(spec: ScenarioSpec, config: Optional[StackConfig] = None,
                    log_candidates: bool = False) -> RunResult:
    return ClosedLoop(spec, config, log_candidates).run()


# --- small helpers ------------------------------------------------------------------------

def _route_key(rs: RouteSet) -> tuple:
    return tuple(r.edges for r in rs.all_routes())


def _scene_summary(scene: Scene) -> dict:
    return {
        "extended": scene.extended,
        "scenery": {e.id: e.provenance.names() for e in scene.scenery},
        "dynamic": [{"id": e.id, "x": e.pose.x, "y": e.pose.y, "v": e.velocity, "confirmation": e.confirmation.value,
                     "provenance": e.provenance.names(), "lane": e.lane_assignment} for e in scene.dynamic_elements],
        "ego": {"x": scene.self_rep.pose.x, "y": scene.self_rep.pose.y, "heading": scene.self_rep.pose.heading,
                "speed": scene.self_rep.velocity},
    }


def _add_landmark(fmap, x: float, y: float, tag: str, tick: int, radius: float):
    for lm in fmap.landmarks:
        if math.hypot(lm.x - x, lm.y - y) <= radius:
            return fmap
    next_id = max((l.id for l in fmap.landmarks), default=0) + 1
    return dataclasses.replace(fmap, landmarks=fmap.landmarks + (Landmark(next_id, x, y, tag, tick),))
