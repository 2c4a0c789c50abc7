"""Situation extraction, assessment, the behaviour rule cascade, monitoring and the V2X extract."""
from __future__ import annotations

import math

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from drivestack.communication import V2xBus, v2x_receive, v2x_send
from drivestack.config import GuidanceParams, VehicleParams
from drivestack.core.geometry import Pose2D
from drivestack.core.provenance import VEH_ENV
from drivestack.core.types import (Auxiliary, Availability, Confirmation, DynamicElement, Escalation, ExecutionReport,
                                   LightColor, Maneuver, Purpose, Reason, Route, RouteSet, Scene, SceneryElement,
                                   SceneryKind, Status, target_pose_violations)
from drivestack.guidance import (GuidanceState, assess_situation, braking_envelope, build_v2x_situation,
                                 edge_at_location, extract_situation, follow_threshold, gap_quality,
                                 monitor_guidance, plan_behavior)

from conftest import self_rep

FRONT = VehicleParams().front_offset
HALF_LEN = 4.5 / 2


def lane(lid, y, road=1, left=None, right=None, successors=(), x0=-50.0, x1=200.0, limit=13.9):
    return SceneryElement(f"lane/{lid}", SceneryKind.LANE, ((x0, y), (x1, y)), VEH_ENV, width=3.5, road_id=road,
                          lane_id=lid, left_id=left, right_id=right, successors=tuple(successors), speed_limit=limit)


def car(eid, x, y=0.0, v=0.0, confirmation=Confirmation.ONBOARD_CONFIRMED, privacy=False):
    return DynamicElement(eid, Pose2D(x, y, 0.0), v, 0.0, (4.5, 1.8), ((0.1, 0.0), (0.0, 0.1)), VEH_ENV,
                          confirmation=confirmation, privacy=privacy)


def stop_line(x, signal=9):
    return SceneryElement("stop/1", SceneryKind.STOP_LINE, ((x, 0.0),), VEH_ENV, lane_id=1, signal_id=signal)


def light(state, signal=9, x=31.0):
    return SceneryElement(f"light/{signal}", SceneryKind.TRAFFIC_LIGHT, ((x, 4.0),), VEH_ENV, signal_id=signal,
                          light_state=state, confidence=0.9)


def two_lanes():
    return [lane(1, 0.0, left=2), lane(2, 3.5, right=1)]


def scene(scenery=(), dynamic=(), speed=10.0, skills=None, tick=100):
    rep = self_rep(Pose2D(0.0, 0.0, 0.0), speed)
    if skills:
        rep.skill_limits.update(skills)
    return Scene(tick, tuple(scenery), tuple(dynamic), rep, False)


def routes(*edges):
    return RouteSet(Route(tuple(edges), float(len(edges))), (), 1)


def decide(sc, rs=None, escalation=Escalation.NONE, requested=None, params=None, state=None):
    p = params or GuidanceParams()
    sit, ctx = extract_situation(sc, rs if rs is not None else routes(1), Purpose.EGO_PLANNING, params=p)
    sit = assess_situation(sit, ctx, p)
    return plan_behavior(sit, ctx, escalation, state, p, requested), sit


# --- extraction ------------------------------------------------------------------

def reference_relevant(xs_ys, ahead, behind, band):
    """Straight route along y = 0, ego at x = 0: keep what lies in the longitudinal window and lateral band."""
    return {i for i, (x, y) in xs_ys.items() if -behind <= x <= ahead and abs(y) <= band}


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.integers(1, 50), st.tuples(st.floats(-45.0, 190.0), st.floats(-10.0, 10.0)),
                       max_size=12))
def test_relevance_window_matches_reference_filter(positions):
    p = GuidanceParams(ahead=60.0, behind=20.0)
    for x, y in positions.values():
        assume(min(abs(x - 60.0), abs(x + 20.0), abs(abs(y) - p.lateral_band)) > 1e-6)
    sc = scene([lane(1, 0.0)], [car(i, x, y) for i, (x, y) in positions.items()])
    sit, _ = extract_situation(sc, routes(1), Purpose.EGO_PLANNING, params=p)
    got = {e for e in sit.relevant_elements if isinstance(e, int)}
    assert got == reference_relevant(positions, p.ahead, p.behind, p.lateral_band)


def test_route_lanes_and_governing_signal_are_kept():
    sc = scene(two_lanes() + [lane(5, 40.0), stop_line(30.0), light(LightColor.RED),
                              light(LightColor.RED, signal=4, x=120.0)])
    sit, _ = extract_situation(sc, routes(1), Purpose.EGO_PLANNING)
    rel = set(sit.relevant_elements)
    assert {"lane/1", "lane/2", "stop/1", "light/9"} <= rel
    assert "lane/5" not in rel and "light/4" not in rel


def test_broadcast_extract_drops_private_elements():
    sc = scene([lane(1, 0.0)], [car(1, 20.0), car(2, 30.0, privacy=True)])
    own, _ = extract_situation(sc, routes(1), Purpose.EGO_PLANNING)
    shared, _ = extract_situation(sc, routes(1), Purpose.V2X_BROADCAST)
    assert 2 in own.relevant_elements
    assert 2 not in shared.relevant_elements and 1 in shared.relevant_elements


def test_no_route_gives_empty_route_context():
    sit, _ = extract_situation(scene([lane(1, 0.0)]), None, Purpose.EGO_PLANNING)
    assert sit.route_context is None


def test_route_context_reports_edge_and_version():
    sit, _ = extract_situation(scene([lane(1, 0.0)]), routes(1), Purpose.EGO_PLANNING)
    assert sit.route_context.route_version == 1
    assert sit.route_context.current_edge == 1


# --- assessment ------------------------------------------------------------------

@pytest.mark.parametrize("front, rear, v, t, q", [
    (5.0, math.inf, 10.0, 2.0, 0.25),
    (math.inf, math.inf, 10.0, 2.0, 1.0),
    (10.0, 30.0, 10.0, 2.0, 0.5),
    (40.0, 25.0, 10.0, 2.0, 1.0),
    (3.0, 3.0, 0.0, 2.0, 1.0),
])
def test_gap_quality_table(front, rear, v, t, q):
    assert gap_quality(front, rear, v, t) == pytest.approx(q)


def test_empty_neighbour_lane_is_feasible():
    sit, ctx = extract_situation(scene(two_lanes()), routes(1), Purpose.EGO_PLANNING)
    a = assess_situation(sit, ctx).assessments
    assert a["gap_left"].score == 1.0 and a["lane_change_left"].flag is True
    assert a["lane_change_right"].flag is False


def test_five_metre_gap_is_infeasible():
    sc = scene(two_lanes(), [car(3, FRONT + 5.0 + HALF_LEN, 3.5, v=10.0)])
    sit, ctx = extract_situation(sc, routes(1), Purpose.EGO_PLANNING)
    a = assess_situation(sit, ctx).assessments
    assert a["gap_left"].score == pytest.approx(0.25)
    assert a["lane_change_left"].flag is False


def test_unavailable_skill_makes_change_infeasible():
    sc = scene(two_lanes(), skills={Maneuver.LANE_CHANGE_LEFT: Availability.UNAVAILABLE})
    sit, ctx = extract_situation(sc, routes(1), Purpose.EGO_PLANNING)
    assert assess_situation(sit, ctx).assessments["lane_change_left"].flag is False


def test_v2x_only_element_is_a_caution_not_a_lead():
    sc = scene([lane(1, 0.0)], [car(1_000_007, 40.0, confirmation=Confirmation.V2X_ONLY)])
    sit, ctx = extract_situation(sc, routes(1), Purpose.EGO_PLANNING)
    a = assess_situation(sit, ctx).assessments
    assert "lead" not in a
    assert a["v2x_caution"].subject == 1_000_007


# --- behaviour cascade ------------------------------------------------------------

def test_braking_envelope_and_follow_threshold():
    p = GuidanceParams()
    assert braking_envelope(10.0, p) == pytest.approx(100.0 / (2 * p.a_comfort) + p.envelope_margin)
    assert follow_threshold(10.0, 10.0, p) == pytest.approx(10.0 * p.t_follow + 2 * p.standstill_gap)


def test_red_light_ahead_stops_at_the_line():
    (dec, _), _ = decide(scene([lane(1, 0.0), stop_line(30.0), light(LightColor.RED)]))
    assert dec.maneuver == Maneuver.STOP_AT_POINT and dec.rule == 2
    tp = dec.targets[0]
    assert tp.target_speed == 0.0
    assert tp.pose.x + FRONT == pytest.approx(30.0 - GuidanceParams().stop_margin, abs=1e-6)


@pytest.mark.parametrize("state", [LightColor.UNKNOWN, LightColor.RED])
def test_unknown_or_red_demands_a_stop(state):
    (dec, _), _ = decide(scene([lane(1, 0.0), stop_line(30.0), light(state)]))
    assert dec.maneuver == Maneuver.STOP_AT_POINT


def test_green_light_or_distant_line_keeps_the_lane():
    (green, _), _ = decide(scene([lane(1, 0.0), stop_line(30.0), light(LightColor.GREEN)]))
    assert green.maneuver == Maneuver.FOLLOW_LANE
    # line beyond the braking envelope at 10 m/s
    (far, _), _ = decide(scene([lane(1, 0.0), stop_line(60.0), light(LightColor.RED, x=61.0)]))
    assert far.maneuver == Maneuver.FOLLOW_LANE


def test_close_lead_is_followed_and_linked():
    (dec, _), _ = decide(scene([lane(1, 0.0)], [car(7, FRONT + 15.0 + HALF_LEN, v=8.0)]))
    assert dec.maneuver == Maneuver.FOLLOW_VEHICLE and dec.rule == 4
    tp = dec.targets[0]
    assert tp.linked_element == 7 and tp.linked_state is not None
    assert tp.target_speed == pytest.approx(8.0)


def test_distant_lead_is_not_followed():
    (dec, _), _ = decide(scene([lane(1, 0.0)], [car(7, FRONT + 40.0 + HALF_LEN, v=10.0)]))
    assert dec.maneuver == Maneuver.FOLLOW_LANE


def test_requested_left_change_sets_indicator():
    (dec, st_), _ = decide(scene(two_lanes()), requested=Maneuver.LANE_CHANGE_LEFT)
    assert dec.maneuver == Maneuver.LANE_CHANGE_LEFT and dec.rule == 3
    assert Auxiliary.INDICATOR_LEFT in dec.auxiliary
    assert st_.lane_change_target == 2
    assert dec.targets[0].pose.y == pytest.approx(3.5, abs=1e-6)


def test_infeasible_request_is_rejected_with_a_warning():
    sc = scene(two_lanes(), [car(3, FRONT + 5.0 + HALF_LEN, 3.5, v=10.0)])
    (dec, _), _ = decide(sc, requested=Maneuver.LANE_CHANGE_LEFT)
    assert dec.maneuver == Maneuver.FOLLOW_LANE
    assert any("rejected" in w for w in dec.warnings)


def test_route_demands_a_change_onto_the_lane_that_continues():
    lanes = [lane(1, 0.0, left=2, x1=100.0), lane(2, 3.5, right=1, successors=[3], x1=100.0),
             lane(3, 3.5, road=3, x0=100.0, x1=300.0)]
    (dec, _), _ = decide(scene(lanes), rs=routes(1, 3))
    assert dec.maneuver == Maneuver.LANE_CHANGE_LEFT


def test_no_lane_context_is_an_emergency_stop():
    (dec, _), _ = decide(scene([]))
    assert dec.maneuver == Maneuver.EMERGENCY_STOP and dec.reason == Reason.SKILL_LIMITED


def test_stop_system_latches_an_emergency_stop():
    (dec, st_), _ = decide(scene([lane(1, 0.0)]), escalation=Escalation.STOP_SYSTEM)
    assert dec.maneuver == Maneuver.EMERGENCY_STOP and dec.reason == Reason.COMPONENT_FAILED
    assert Auxiliary.LIGHTS in dec.auxiliary
    (again, _), _ = decide(scene([lane(1, 0.0)]), state=st_)
    assert again.maneuver == Maneuver.EMERGENCY_STOP


CASCADE = (Maneuver.EMERGENCY_STOP, Maneuver.STOP_AT_POINT, Maneuver.LANE_CHANGE_LEFT, Maneuver.FOLLOW_VEHICLE)


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.booleans(), st.booleans(), st.booleans(), st.booleans()), st.floats(6.0, 12.0))
def test_first_true_rule_decides(flags, speed):
    stop_sys, red, change, lead = flags
    scenery = two_lanes() + ([stop_line(14.0), light(LightColor.RED, x=15.0)] if red else [])
    dynamic = [car(7, FRONT + 12.0 + HALF_LEN, v=5.0)] if lead else []
    sc = scene(scenery, dynamic, speed=speed)
    args = dict(escalation=Escalation.STOP_SYSTEM if stop_sys else Escalation.NONE,
                requested=Maneuver.LANE_CHANGE_LEFT if change else None)
    (dec, _), _ = decide(sc, **args)
    (again, _), _ = decide(sc, **args)
    expected = next((m for m, f in zip(CASCADE, flags) if f), Maneuver.FOLLOW_LANE)
    assert dec.maneuver == expected
    assert dec.conditions == flags
    assert dec.rule == next((i + 1 for i, f in enumerate(flags) if f), 5)
    assert (again.maneuver, again.targets) == (dec.maneuver, dec.targets)
    for tp in dec.targets:
        assert tp.maneuver == dec.maneuver and not target_pose_violations(tp)


@settings(max_examples=40, deadline=None)
@given(st.floats(5.0, 58.0), st.floats(-1.5, 1.5), st.floats(0.0, 15.0))
def test_v2x_only_elements_never_pick_a_rule(x, y, v_el):
    sc = scene([lane(1, 0.0)], [car(1_000_001, x, y, v=v_el, confirmation=Confirmation.V2X_ONLY)])
    (dec, _), sit = decide(sc)
    assert dec.maneuver == Maneuver.FOLLOW_LANE and dec.conditions == (False, False, False, False)
    cap = GuidanceParams().v2x_speed_factor * 13.9
    assert dec.targets[0].target_speed <= cap + 1e-9


# --- monitoring --------------------------------------------------------------------

def blocked(tick, loc=(40.0, 0.0)):
    return ExecutionReport("stabilization", tick, Status.DEGRADED, Reason.NO_COLLISION_FREE_TRAJECTORY,
                           location=loc)


def test_single_failure_is_transient():
    esc, rep, st_ = monitor_guidance([blocked(10)], GuidanceState(), 20)
    assert esc == Escalation.NONE and rep is None and st_.failing_cycles == 1
    esc, _, st_ = monitor_guidance([], st_, 30)
    assert esc == Escalation.NONE and st_.failing_cycles == 0


def test_second_consecutive_failure_replans_the_route():
    _, ctx = extract_situation(scene([lane(1, 0.0)]), routes(1), Purpose.EGO_PLANNING)
    _, _, st_ = monitor_guidance([blocked(10)], GuidanceState(), 20, ctx)
    esc, rep, st_ = monitor_guidance([blocked(20)], st_, 30, ctx)
    assert esc == Escalation.REPLAN_ROUTE
    assert rep.edge_id == 1 and rep.escalation == Escalation.REPLAN_ROUTE
    assert st_.failing_cycles == 0


def test_component_failure_latches_stop_system():
    failed = ExecutionReport("stabilization", 5, Status.FAILED, Reason.COMPONENT_FAILED, component="steering")
    esc, rep, st_ = monitor_guidance([failed], GuidanceState(), 10)
    assert esc == Escalation.STOP_SYSTEM and rep.component == "steering" and st_.stop_system
    esc, _, _ = monitor_guidance([], st_, 20)
    assert esc == Escalation.STOP_SYSTEM


def test_edge_at_location_follows_the_route_reference():
    lanes = [lane(1, 0.0, successors=[2], x1=50.0), lane(2, 0.0, road=2, x0=50.0, x1=200.0)]
    _, ctx = extract_situation(scene(lanes), routes(1, 2), Purpose.EGO_PLANNING)
    assert edge_at_location(ctx, (20.0, 0.0)) == 1
    assert edge_at_location(ctx, (80.0, 0.0)) == 2


# --- V2X extract ---------------------------------------------------------------------

def test_v2x_extract_filters_and_moves_to_the_map_frame():
    to_map = Pose2D(100.0, 50.0, math.pi / 2)
    sc = scene([lane(1, 0.0)], [car(1, 20.0), car(2, 25.0, privacy=True),
                                car(1_000_009, 30.0, confirmation=Confirmation.V2X_ONLY)])
    sit = build_v2x_situation(sc, to_map, Maneuver.FOLLOW_LANE, 120)
    assert [e.id for e in sit.elements] == [1]
    assert sit.purpose == Purpose.V2X_BROADCAST and sit.planned_maneuver == Maneuver.FOLLOW_LANE
    assert (sit.elements[0].pose.x, sit.elements[0].pose.y) == pytest.approx((100.0, 70.0))
    assert (sit.ego_pose.x, sit.ego_pose.y) == pytest.approx((100.0, 50.0))


def test_empty_scene_broadcasts_ego_state_only():
    sit = build_v2x_situation(scene([]), Pose2D(0.0, 0.0, 0.0), None, 5)
    assert sit.elements == () and sit.ego_pose is not None and sit.ego_velocity == 10.0


def test_received_elements_are_not_echoed_back():
    bus = V2xBus(delay=1)
    bus.register(1)
    bus.register(2)
    origin = Pose2D(0.0, 0.0, 0.0)
    a_scene = scene([lane(1, 0.0)], [car(3, 30.0)])
    v2x_send(build_v2x_situation(a_scene, origin, None, 10), bus, 1, 10)
    got = v2x_receive(bus.deliver(2, 11), origin, 11)
    assert {e.confirmation for e in got.elements} == {Confirmation.V2X_ONLY} and len(got.elements) == 2
    b_scene = scene([lane(1, 0.0)], got.elements)
    b_sit = build_v2x_situation(b_scene, origin, None, 20)
    assert b_sit.elements == ()
    v2x_send(b_sit, bus, 2, 20)
    back = v2x_receive(bus.deliver(1, 21), origin, 21)
    assert len(back.elements) == 1  # only the other vehicle itself
