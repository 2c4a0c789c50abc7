import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drivestack.config import PerceptionParams
from drivestack.core.errors import ContractViolation
from drivestack.core.geometry import Pose2D
from drivestack.core.provenance import MAP, V2X, VEH, VEH_ENV, ProvenanceMask, Source
from drivestack.core.types import DynamicElement, Health, LightColor, SceneryKind
from drivestack.core.validation import validate_scene
from drivestack.localization.maps import (FeatureMap, FlowState, Lane, LaneMap, MapStack, RoadEdge, RoadNetworkMap,
                                          RoadNode, RoadReport)
from drivestack.perception.ego_motion import EgoMotion, compose_motion, estimate_ego_motion
from drivestack.perception.lanes import LaneTrackerState, extract_track_lanes
from drivestack.perception.occupancy import empty_grid, extract_grid_features, update_occupancy_grid
from drivestack.perception.road_level import model_road_level
from drivestack.perception.scenery import (LandmarkSighting, StopLineSighting, assemble_scene,
                                           model_dynamic_environment, model_scenery)
from drivestack.perception.self_monitor import SelfMonitorState, derive_skill_limits, monitor_self
from drivestack.perception.signals import LightHistory, estimate_tsl_state, vote
from drivestack.perception.tracking import LocalDetection, TrackSet, track_dynamic_elements
from drivestack.world.sensors import (ExteroConfig, ExteroFrame, LaneSample, LightObservation, ProprioFrame,
                                      SensorStream, sense_environment)
from drivestack.world.sim import GroundTruthWorld, VehicleState

import oracles
from conftest import self_rep

P = PerceptionParams()


def proprio(v=0.0, w=0.0, tick=0, health=None, energy=1.0):
    return ProprioFrame(tick, v, w, 0.0, energy, health or {"steering": Health.OK})


# --- ego motion -----------------------------------------------------------------------

def test_ego_motion_straight():
    m = estimate_ego_motion(proprio(2.0, 0.0), 0.05)
    assert (m.dx, m.dy, m.dheading) == pytest.approx((0.1, 0.0, 0.0))
    assert m.provenance == VEH


def test_ego_motion_turn_in_place():
    m = estimate_ego_motion(proprio(0.0, 0.5), 0.1)
    assert (m.dx, m.dy, m.dheading) == pytest.approx((0.0, 0.0, 0.05))


def test_missing_yaw_rate_holds_last_and_degrades():
    f = ProprioFrame(0, 1.0, None, 0.0, 1.0, {})
    m = estimate_ego_motion(f, 0.1, last_yaw_rate=0.2)
    assert m.degraded and m.dheading == pytest.approx(0.02)


def test_ego_motion_rejects_bad_dt():
    with pytest.raises(ContractViolation):
        estimate_ego_motion(proprio(1.0), 0.0)


def test_heading_drift_within_three_sigma():
    # heading after 100 noisy steps is a sum of 100 independent N(0, (sigma dt)^2) terms
    sigma, dt, n = 0.02, 0.01, 100
    bound = 3 * sigma * dt * math.sqrt(n)
    outside = 0
    for seed in range(300):
        rng = np.random.default_rng(seed)
        total = EgoMotion(0.0, 0.0, 0.0)
        for _ in range(n):
            w = 0.1 + sigma * rng.normal()
            total = compose_motion(total, estimate_ego_motion(proprio(5.0, w), dt, sigma_yaw_rate=sigma))
        drift = total.dheading - 0.1 * dt * n
        outside += abs(drift) > bound
        assert total.var_heading == pytest.approx(n * (sigma * dt) ** 2)
    assert outside / 300 <= 0.01  # expected 0.27 %


# --- self monitoring ------------------------------------------------------------------

def _flags(readings):
    state = SelfMonitorState()
    out = []
    for t, r in enumerate(readings):
        rec, state = monitor_self(proprio(tick=t, health={"steering": Health(r)}), state)
        out.append(rec.component_health["steering"].value)
    return out


def test_three_degraded_readings_flag():
    assert _flags(["degraded"] * 3)[-1] == "degraded"


def test_single_bad_reading_no_flag():
    assert _flags(["ok", "degraded", "ok", "ok"]) == ["ok"] * 4


def test_hysteresis_all_length_eight_sequences():
    for seq in oracles.all_sequences(("ok", "degraded", "failed"), 8):
        seq = list(seq)
        assert _flags(seq) == oracles.hysteresis_flags(seq), seq


def test_low_energy_flag():
    rec, _ = monitor_self(proprio(energy=0.04), SelfMonitorState())
    assert rec.low_energy
    rec, _ = monitor_self(proprio(energy=0.06), SelfMonitorState())
    assert not rec.low_energy


def test_skill_limits_cover_every_maneuver():
    from drivestack.core.types import Availability, Maneuver
    lim = derive_skill_limits({"steering": Health.FAILED})
    assert set(lim) == set(Maneuver)
    assert [m for m, a in lim.items() if a == Availability.AVAILABLE] == [Maneuver.EMERGENCY_STOP]


# --- tracking ----------------------------------------------------------------------------

def _run_tracker(zs, dt=0.05):
    ts = TrackSet()
    for z in zs:
        ts = track_dynamic_elements([LocalDetection(tuple(z))], ts, None, dt)
    return ts


def test_tracking_rmse_against_reference_filter():
    mine, ref = [], []
    for seed in oracles.REFERENCE_SEEDS:
        zs = oracles.stationary_measurements(seed)
        ts = _run_tracker(zs)
        t = max(ts.tracks, key=lambda t: t.hits)
        mine.append(np.subtract(t.position, (10.0, 5.0)))
        ref.append(oracles.reference_cv_filter(zs, 0.05, P.process_noise, 0.5, P.initial_velocity_sigma)[-1] - (10, 5))
    rmse = float(np.sqrt(np.mean(np.square(mine))))
    ref_rmse = float(np.sqrt(np.mean(np.square(ref))))
    assert ref_rmse == pytest.approx(oracles.REFERENCE_FINAL_RMSE, abs=5e-4)
    assert rmse <= 0.2
    assert abs(rmse - ref_rmse) <= 0.2 * ref_rmse


def test_single_track_matches_reference_recursion():
    zs = oracles.stationary_measurements(3)
    ts = TrackSet()
    ref = oracles.reference_cv_filter(zs, 0.05, P.process_noise, 0.5, P.initial_velocity_sigma)
    for k, z in enumerate(zs):
        ts = track_dynamic_elements([LocalDetection(tuple(z))], ts, None, 0.05)
        assert len(ts.tracks) == 1
        assert ts.tracks[0].position == pytest.approx(tuple(ref[k]), abs=1e-9)


def test_track_dropped_after_five_misses():
    ts = _run_tracker([(0.0, 0.0)] * 4)
    for k in range(5):
        assert len(ts.tracks) == 1
        ts = track_dynamic_elements([], ts, None, 0.05)
    assert ts.tracks == ()


def test_two_far_detections_two_tracks():
    ts = TrackSet()
    for _ in range(4):
        ts = track_dynamic_elements([LocalDetection((0.0, 0.0)), LocalDetection((20.0, 0.0))], ts, None, 0.05)
    assert len(ts.tracks) == 2 and len(ts.confirmed()) == 2
    assert sorted(t.id for t in ts.tracks) == [1, 2]


def test_confirmation_after_three_hits():
    ts = _run_tracker([(0.0, 0.0)] * 2)
    assert ts.confirmed() == []
    ts = track_dynamic_elements([LocalDetection((0.0, 0.0))], ts, None, 0.05)
    assert len(ts.confirmed()) == 1


@given(st.lists(st.lists(st.tuples(st.floats(-40, 40), st.floats(-40, 40)), max_size=4), min_size=1, max_size=12))
@settings(max_examples=50, deadline=None)
def test_track_bookkeeping_properties(frames):
    ts = TrackSet()
    ids_seen = {}
    for dets in frames:
        ts = track_dynamic_elements([LocalDetection(d) for d in dets], ts, None, 0.05)
        assert len(ts.tracks) <= ts.detections_seen
        for t in ts.tracks:
            assert t.age >= 1
            cov = np.asarray(t.covariance)
            assert np.allclose(cov, cov.T) and np.linalg.eigvalsh(cov).min() > -1e-9
            if t.confirmed:
                assert t.hits >= 3
            ids_seen.setdefault(t.id, t.age)
        assert len({t.id for t in ts.tracks}) == len(ts.tracks)


# --- occupancy grid -----------------------------------------------------------------------

def test_cell_hit_ten_times_clamps():
    g = empty_grid()
    for _ in range(10):
        g = update_occupancy_grid(g, [(10.5, 0.5)], None)
    assert g.value_at(10.5, 0.5) == pytest.approx(min(10 * P.l_occ, P.l_max))


def test_unobserved_cell_unchanged():
    g = update_occupancy_grid(empty_grid(), [(10.5, 0.5)], None)
    assert g.value_at(-20.5, 30.5) == 0.0
    assert g.value_at(5.5, 0.5) == pytest.approx(P.l_free)


def test_alternating_hit_free_sum():
    g = empty_grid()
    hit, through = [(10.5, 0.5)], [(20.5, 0.5)]
    for n in range(1, 9):
        g = update_occupancy_grid(g, hit, None)
        g = update_occupancy_grid(g, through, None)
        expected = oracles.alternating_logodds(n, P.l_occ, P.l_free, P.l_min, P.l_max)
        assert g.value_at(10.5, 0.5) == pytest.approx(expected)
        if n * (P.l_occ + P.l_free) < P.l_max:
            assert expected == pytest.approx(n * (P.l_occ + P.l_free))


def test_grid_scrolls_with_ego():
    g = update_occupancy_grid(empty_grid(), [(10.5, 0.5)], None)
    g2 = update_occupancy_grid(g, [], EgoMotion(30.0, 0.0, 0.0))
    assert g2.ego_pose.x == 30.0
    assert g2.value_at(10.5, 0.5) == g.value_at(10.5, 0.5)


def test_feature_extraction_threshold():
    g = empty_grid()
    for _ in range(3):
        g = update_occupancy_grid(g, [(10.5, 0.5), (11.5, 0.5)], None)
    feats = extract_grid_features(g)
    assert len(feats) == 1 and feats[0].cells == 2
    assert feats[0].polygon[0] == (10.0, 0.0) and feats[0].polygon[2] == (12.0, 1.0)


@given(st.lists(st.lists(st.tuples(st.floats(-60, 60), st.floats(-60, 60)), max_size=6), min_size=1, max_size=8))
@settings(max_examples=40, deadline=None)
def test_logodds_always_clamped(frames):
    g = empty_grid()
    for pts in frames:
        g = update_occupancy_grid(g, pts, EgoMotion(0.7, 0.1, 0.02))
        assert g.logodds.min() >= P.l_min and g.logodds.max() <= P.l_max


# --- lanes --------------------------------------------------------------------------------

def _straight_world():
    lane = Lane(1, 1, ((-50.0, 0.0), (300.0, 0.0)), width=3.5)
    lanes = LaneMap((lane,))
    w = GroundTruthWorld(0, VehicleState(Pose2D(0.0, 0.0, 0.0)), geometry_source=lanes)
    return w, lanes


def test_noiseless_straight_lane_fit():
    w, lanes = _straight_world()
    frame = sense_environment(w, ExteroConfig(sigma_lane=0.0), SensorStream(0, "extero"))
    st_ = extract_track_lanes(frame, Pose2D(0.0, 0.0, 0.0), LaneTrackerState())
    c = st_.hypotheses[0].centerline()
    assert np.max(np.abs(c[:, 1])) < 1e-6
    assert st_.hypotheses[0].width == pytest.approx(3.5, abs=1e-6)
    assert st_.hypotheses[0].provenance == VEH_ENV


def test_map_extract_adds_map_flag():
    w, lanes = _straight_world()
    frame = sense_environment(w, ExteroConfig(), SensorStream(0, "extero"))
    st_ = extract_track_lanes(frame, Pose2D(0.0, 0.0, 0.0), LaneTrackerState(), map_extract=lanes)
    assert Source.MAP in st_.hypotheses[0].provenance


def test_three_samples_no_hypothesis():
    frame = ExteroFrame(0, lane_samples=(LaneSample(1, ((0.0, 1.75), (5.0, 1.75)), ((0.0, -1.75),)),))
    assert extract_track_lanes(frame, Pose2D(0, 0, 0), LaneTrackerState()).hypotheses == ()


def test_lane_smoothing_alpha():
    def frame(y):
        left = tuple((float(x), y + 1.75) for x in range(0, 40, 4))
        right = tuple((float(x), y - 1.75) for x in range(0, 40, 4))
        return ExteroFrame(0, lane_samples=(LaneSample(1, left, right),))
    s = extract_track_lanes(frame(0.0), Pose2D(0, 0, 0), LaneTrackerState())
    s = extract_track_lanes(frame(1.0), Pose2D(0, 0, 0), s)
    h = s.hypotheses[0]
    # centerline moved by alpha of the one metre jump
    y = h.frame.to_parent(0.0, float(np.polyval(h.coeffs, 0.0)))[1]
    assert y == pytest.approx(P.lane_alpha * 1.0, abs=1e-9)


# --- traffic lights ---------------------------------------------------------------------------

def _vote_seq(colors):
    hist = {}
    for c in colors:
        f = ExteroFrame(0, lights=(LightObservation(3, (20.0, 2.0), LightColor(c)),))
        est, hist = estimate_tsl_state(f, {}, hist, Pose2D(0, 0, 0))
    return est[3]


def _vote_oracle(colors):
    window = colors[-5:]
    counts = {c: window.count(c) for c in set(window)}
    top = max(counts.values())
    leaders = [c for c, n in counts.items() if n == top]
    return (leaders[0] if len(leaders) == 1 else "unknown"), top / len(window)


def test_majority_red():
    e = _vote_seq(["red", "red", "red", "green", "red"])
    assert (e.state, e.confidence) == (LightColor.RED, 0.8)
    assert _vote_oracle(["red", "red", "red", "green", "red"]) == ("red", 0.8)


def test_tie_unknown():
    assert _vote_seq(["red", "green"]).state == LightColor.UNKNOWN


def test_empty_history_unknown():
    assert vote([]) == (LightColor.UNKNOWN, 0.0)
    est, _ = estimate_tsl_state(None, {}, {7: LightHistory()}, Pose2D(0, 0, 0))
    assert (est[7].state, est[7].confidence) == (LightColor.UNKNOWN, 0.0)


@given(st.lists(st.sampled_from(["red", "yellow", "green"]), min_size=1, max_size=12))
def test_vote_matches_counting_oracle(colors):
    e = _vote_seq(colors)
    state, conf = _vote_oracle(colors)
    assert e.state.value == state and e.confidence == pytest.approx(conf)


# --- scenery and scene ------------------------------------------------------------------------

def _lanes_state():
    w, lanes = _straight_world()
    frame = sense_environment(w, ExteroConfig(), SensorStream(0, "extero"))
    return extract_track_lanes(frame, Pose2D(0, 0, 0), LaneTrackerState()), lanes


def _map_stack(length=280.0):
    roads = RoadNetworkMap((RoadNode(1, -50.0, 0.0), RoadNode(2, length, 0.0)), (RoadEdge(1, 1, 2, length + 50),))
    lanes = LaneMap((Lane(1, 1, ((-50.0, 0.0), (length, 0.0))),))
    return MapStack(roads, lanes, FeatureMap())


def test_no_map_extended_equals_local():
    lanes, _ = _lanes_state()
    local, ext, warn = model_scenery(lanes, [], {}, [], [], 0)
    assert ext == local and warn == []


def test_map_adds_lane_beyond_fov():
    lanes, _ = _lanes_state()
    local, ext, _ = model_scenery(lanes, [], {}, [], [], 0, _map_stack(), Pose2D(0, 0, 0))
    lane_local = next(e for e in local.elements if e.id == "lane/1")
    lane_ext = next(e for e in ext.elements if e.id == "lane/1")
    assert max(x for x, _ in lane_local.geometry) <= 80.0 + 1e-9
    assert max(x for x, _ in lane_ext.geometry) == pytest.approx(280.0)
    assert Source.MAP in lane_ext.provenance and Source.MAP not in lane_local.provenance
    assert ext.extended and not local.extended


def test_map_without_pose_omits_extended():
    lanes, _ = _lanes_state()
    local, ext, warn = model_scenery(lanes, [], {}, [], [], 0, _map_stack(), None)
    assert ext is None and len(warn) == 1


def test_local_scenery_never_carries_map():
    lanes, _ = _lanes_state()
    local, _, _ = model_scenery(lanes, [], {}, [StopLineSighting(1, (30.0, 0.0), 1)], [LandmarkSighting((5.0, 9.0), "pole")],
                                0, _map_stack(), Pose2D(0, 0, 0))
    assert all(Source.MAP not in e.provenance for e in local.elements)


def _tracks_at(*points):
    ts = TrackSet()
    for _ in range(3):
        ts = track_dynamic_elements([LocalDetection(p) for p in points], ts, None, 0.05)
    return ts


def test_lane_assignment_threshold_and_purity():
    lanes, _ = _lanes_state()
    local, _, _ = model_scenery(lanes, [], {}, [], [], 0)
    ts = _tracks_at((30.0, 0.5), (30.0, 10.0))
    dyn = model_dynamic_environment(ts, local)
    by_id = {e.id: e for e in dyn.elements}
    assert len(by_id) == 2
    near, far = sorted(by_id.values(), key=lambda e: e.pose.y)
    assert near.lane_assignment == 1 and far.lane_assignment is None
    for t in ts.tracks:
        e = by_id[t.id]
        assert (e.pose.x, e.pose.y) == t.position and e.velocity == t.speed
        assert e.provenance == t.provenance


def test_scene_counts_and_extended_flag():
    sr = self_rep()
    from drivestack.core.types import DynamicEnvironment, SceneryElement, Scenery
    scen = Scenery(5, tuple(SceneryElement(f"feat/{k}", SceneryKind.LANDMARK, ((k, 0.0),), VEH_ENV) for k in range(3)),
                   extended=False)
    dyn = model_dynamic_environment(_tracks_at((10.0, 0.0), (40.0, 0.0)), scen)
    dyn = type(dyn)(5, dyn.elements)
    s = assemble_scene(scen, dyn, sr, 5)
    assert len(s.element_ids()) == 5 and s.self_rep is sr and not s.extended
    violet = Scenery(5, scen.elements[:1] + (SceneryElement("lane/9", SceneryKind.LANE, ((0, 0), (1, 0)),
                                                                ProvenanceMask.of("ENV", "MAP")),), extended=False)
    assert assemble_scene(violet, dyn, sr, 5).extended
    empty = assemble_scene(Scenery(5, (), False), DynamicEnvironment(5, ()), sr, 5)
    assert empty.element_ids() == [] and validate_scene(empty) == []


def test_scene_rejects_cross_cycle_inputs():
    from drivestack.core.types import DynamicEnvironment, Scenery
    with pytest.raises(ContractViolation):
        assemble_scene(Scenery(5, (), False), DynamicEnvironment(10, ()), self_rep(), 10)


# --- road level ----------------------------------------------------------------------------------

def _roads():
    nodes = (RoadNode(1, 0, 0), RoadNode(2, 100, 0), RoadNode(3, 200, 0))
    return RoadNetworkMap(nodes, (RoadEdge(7, 1, 2, 100.0, 13.9), RoadEdge(8, 2, 3, 100.0, 13.9)))


def test_no_observations_pass_through():
    r = _roads()
    m = model_road_level(r, None, [], [], 0)
    assert m.roads is r and m.provenance == MAP


def test_v2x_blocked_overlay():
    r = _roads()
    m = model_road_level(r, None, [], [RoadReport(7, FlowState.BLOCKED, 3, V2X)], 3)
    assert m.roads.edge_by_id[7].flow_state() == FlowState.BLOCKED
    assert m.roads.edge_by_id[8].flow_state() == FlowState.FREE
    assert Source.V2X in m.provenance


def test_slow_traffic_congested():
    r = _roads()
    lanes = LaneMap((Lane(1, 7, ((0.0, 0.0), (100.0, 0.0))),))
    el = DynamicElement(4, Pose2D(50, 0, 0), 2.0, 0.0, (4.5, 1.8), ((0.1, 0), (0, 0.1)), VEH_ENV, lane_assignment=1)
    m = model_road_level(r, lanes, [el], [], 0)
    assert m.roads.edge_by_id[7].flow_state() == FlowState.CONGESTED
    fast = DynamicElement(4, Pose2D(50, 0, 0), 5.0, 0.0, (4.5, 1.8), ((0.1, 0), (0, 0.1)), VEH_ENV, lane_assignment=1)
    assert model_road_level(r, lanes, [fast], [], 0).roads.edge_by_id[7].flow_state() == FlowState.FREE
