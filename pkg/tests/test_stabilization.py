"""Trajectory candidates, selection, ego-frame transform, control, deviation monitoring and target refresh."""
from __future__ import annotations

import math

import numpy as np
import pytest
import shapely
from hypothesis import given, settings
from hypothesis import strategies as st

from drivestack.config import StabilizationParams, VehicleParams
from drivestack.core.geometry import Pose2D
from drivestack.core.types import (Auxiliary, LinkedState, Maneuver, Reason, SamplingRanges, Status, TargetPose)
from drivestack.perception.tracking import Track, TrackSet
from drivestack.stabilization.control import (DeviationMonitor, compute_control, monitor_stabilization,
                                              refresh_target_features)
from drivestack.stabilization.selection import MovingObstacle, select_trajectory
from drivestack.stabilization.trajectory import (Trajectory, generate_candidates, lateral_profile,
                                                 quintic_coefficients, quintic_eval, transform_from_ego,
                                                 transform_to_ego)

from oracles import quintic_by_full_solve

VEH = VehicleParams()
P = StabilizationParams()
LINE = ((-10.0, 0.0), (150.0, 0.0))


def box(x0, x1, y0, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def target(x=40.0, y=0.0, speed=10.0, half=3.5, lateral=1.0, maneuver=Maneuver.FOLLOW_LANE, **kw):
    return TargetPose(Pose2D(x, y, 0.0), speed, (box(-10.0, 150.0, -half, half),), LINE, maneuver,
                      sampling_ranges=SamplingRanges(lateral=lateral), **kw)


def straight(speed, n=41, y=0.0):
    t = np.arange(n) * 0.1
    return Trajectory(t, speed * t, np.full(n, y), np.zeros(n), np.full(n, speed), np.zeros(n))


# --- quintic ---------------------------------------------------------------------

bc = st.floats(-5.0, 5.0)


@settings(max_examples=200)
@given(bc, bc, bc, bc, bc, bc, st.floats(1.0, 5.0))
def test_quintic_matches_full_solve_and_meets_boundary_conditions(d0, v0, a0, d1, v1, a1, T):
    c = quintic_coefficients(d0, v0, a0, d1, v1, a1, T)
    np.testing.assert_allclose(c, quintic_by_full_solve(d0, v0, a0, d1, v1, a1, T), rtol=1e-9, atol=1e-9)
    for der, (at0, atT) in enumerate(((d0, d1), (v0, v1), (a0, a1))):
        assert abs(float(quintic_eval(c, 0.0, der)) - at0) <= 1e-9
        assert abs(float(quintic_eval(c, T, der)) - atT) <= 1e-9


def test_lateral_profile_holds_after_the_end_time():
    t = np.arange(41) * 0.1
    d, dv, da = lateral_profile(0.5, 0.2, 0.0, -1.0, 2.0, t)
    assert np.all(d[t >= 2.0] == pytest.approx(-1.0, abs=1e-9))
    assert np.all(dv[t > 2.0] == 0.0) and np.all(da[t > 2.0] == 0.0)


# --- candidates ------------------------------------------------------------------

def test_twenty_one_candidates_with_exact_end_offsets():
    tp = target(lateral=1.5)
    cands = generate_candidates(tp, Pose2D(0.0, 0.0, 0.0), 10.0)
    assert len(cands) == 21
    assert sorted({c.end_time for c in cands}) == [2.0, 3.0, 4.0]
    assert len({c.lateral_sample for c in cands}) == 7
    for c in cands:
        assert abs(c.offset[-1] - c.lateral_sample) <= 1e-9
        assert np.all(np.diff(c.t) > 0) and np.all(c.speed >= 0)


def test_centreline_candidate_is_an_exact_straight_line():
    cands = generate_candidates(target(), Pose2D(0.0, 0.0, 0.0), 10.0)
    zero = [c for c in cands if c.lateral_sample == 0.0]
    assert len(zero) == 3
    for c in zero:
        assert np.max(np.abs(c.y)) == 0.0 and np.max(np.abs(c.heading)) == 0.0


def test_ego_outside_corridor_gets_one_recovery_candidate():
    cands = generate_candidates(target(half=2.0), Pose2D(0.0, 3.0, 0.0), 5.0)
    assert len(cands) == 1
    assert cands[0].heading[0] < 0.0  # aimed back toward the centerline


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 20.0), st.floats(0.0, 20.0), st.floats(-1.5, 1.5), st.floats(-0.2, 0.2))
def test_candidates_keep_the_trajectory_contract(v0, v_target, y0, h0):
    for c in generate_candidates(target(speed=v_target), Pose2D(0.0, y0, h0), v0):
        assert c.t[0] == 0.0 and np.all(np.diff(c.t) > 0)
        assert np.all(c.speed >= 0.0)


def test_stop_profile_never_passes_the_stop_point():
    tp = target(x=20.0, speed=0.0, maneuver=Maneuver.STOP_AT_POINT)
    c = generate_candidates(tp, Pose2D(0.0, 0.0, 0.0), 8.0)[10]
    assert np.all(np.diff(c.speed) <= 1e-12)
    assert np.max(c.x) <= 20.0 + P.stop_tolerance
    # still able to halt before the line from the end of the horizon
    assert c.x[-1] + c.speed[-1] ** 2 / (2 * P.a_brake) <= 20.0 + P.stop_tolerance


# --- selection --------------------------------------------------------------------

def oracle_free(traj: Trajectory, tp: TargetPose, static=(), moving=()):
    """Brute force: every sampled footprint inside the corridor and disjoint from every obstacle polygon."""
    corridor = shapely.union_all([shapely.Polygon(p) for p in tp.corridor]).buffer(1e-6)
    c, s = np.cos(traj.heading), np.sin(traj.heading)
    front = VEH.length - VEH.rear_overhang
    for k in range(len(traj.t)):
        pts = []
        for lx, ly in ((front, VEH.width / 2), (-VEH.rear_overhang, VEH.width / 2),
                       (-VEH.rear_overhang, -VEH.width / 2), (front, -VEH.width / 2)):
            pts.append((traj.x[k] + c[k] * lx - s[k] * ly, traj.y[k] + s[k] * lx + c[k] * ly))
        fp = shapely.Polygon(pts)
        if not corridor.covers(fp):
            return False
        for poly in static:
            if fp.intersects(shapely.Polygon(poly)):
                return False
        for m in moving:
            moved = np.asarray(m.polygon) + traj.t[k] * np.asarray(m.velocity)
            if fp.intersects(shapely.Polygon(moved)):
                return False
    return True


def test_argmin_over_three_free_candidates():
    cands = [straight(v) for v in (13.2, 11.1, 12.0)]
    cands = [Trajectory(c.t, c.x, c.y, c.heading, c.speed, c.accel, index=i) for i, c in enumerate(cands)]
    res = select_trajectory(cands, target(speed=10.0, lateral=0.0))
    assert [round(c.cost, 9) for c in res.assessed] == [3.2, 1.1, 2.0]
    assert res.trajectory.index == 1 and res.report.status == Status.NOMINAL


def test_ties_go_to_smaller_lateral_sample_then_lower_index():
    base = straight(10.0)

    def tagged(i, lat):
        return Trajectory(base.t, base.x, base.y, base.heading, base.speed, base.accel, lateral_sample=lat, index=i)

    res = select_trajectory([tagged(0, 0.5), tagged(1, -0.25), tagged(2, 0.25), tagged(3, 1.0)], target())
    assert res.trajectory.index == 1
    again = select_trajectory([tagged(0, 0.5), tagged(1, -0.25), tagged(2, 0.25), tagged(3, 1.0)], target())
    assert again.trajectory.index == res.trajectory.index


def test_centre_obstacle_forces_a_lateral_offset():
    tp = target(half=5.0, lateral=3.0)
    obstacle = box(35.0, 39.0, -1.0, 1.0)
    cands = generate_candidates(tp, Pose2D(0.0, 0.0, 0.0), 10.0)
    res = select_trajectory(cands, tp, static=[np.array(obstacle)])
    assert res.trajectory is not None and res.trajectory.lateral_sample != 0.0
    for c in res.assessed:
        assert c.collision_free == oracle_free(c, tp, static=[obstacle])


def test_wall_across_corridor_reports_no_free_trajectory():
    tp = target(half=5.0, lateral=3.0)
    wall = box(30.0, 31.0, -6.0, 6.0)
    res = select_trajectory(generate_candidates(tp, Pose2D(0.0, 0.0, 0.0), 10.0), tp, static=[np.array(wall)])
    assert res.trajectory is None
    assert res.report.reason == Reason.NO_COLLISION_FREE_TRAJECTORY and res.report.status == Status.DEGRADED
    assert res.report.location == pytest.approx((30.5, 0.0))


def test_oncoming_obstacle_is_propagated_at_constant_velocity():
    tp = target(half=5.0, lateral=3.0)
    # starts well ahead; only reaches the ego's path because it moves toward it
    mover = MovingObstacle(np.array(box(70.0, 74.5, -0.9, 0.9)), (-10.0, 0.0))
    cands = generate_candidates(tp, Pose2D(0.0, 0.0, 0.0), 10.0)
    res = select_trajectory(cands, tp, moving=[mover])
    assert not all(c.collision_free for c in res.assessed)
    for c in res.assessed:
        assert c.collision_free == oracle_free(c, tp, moving=[mover])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(10.0, 60.0), st.floats(-4.0, 4.0), st.floats(0.5, 3.0)), min_size=1, max_size=3),
       st.floats(4.0, 14.0))
def test_selection_is_free_and_minimal_per_brute_force(obstacles, v0):
    tp = target(half=5.0, lateral=3.0)
    static = [box(x, x + w, y - w / 2, y + w / 2) for x, y, w in obstacles]
    cands = generate_candidates(tp, Pose2D(0.0, 0.0, 0.0), v0)
    res = select_trajectory(cands, tp, static=[np.array(s) for s in static])
    truth = [oracle_free(c, tp, static=static) for c in res.assessed]
    assert [c.collision_free for c in res.assessed] == truth
    if res.trajectory is None:
        assert not any(truth)
    else:
        assert res.trajectory.cost == min(c.cost for c, ok in zip(res.assessed, truth) if ok)


# --- ego frame ---------------------------------------------------------------------

def test_transform_at_origin_is_identity():
    tr = generate_candidates(target(), Pose2D(0.0, 0.0, 0.0), 10.0)[4]
    out = transform_to_ego(tr, Pose2D(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(out.x, tr.x)
    np.testing.assert_array_equal(out.y, tr.y)


@pytest.mark.parametrize("xy, local", [((1.0, 0.0), (0.0, -1.0)), ((0.0, 1.0), (1.0, 0.0)),
                                       ((2.0, 3.0), (3.0, -2.0)), ((-1.0, -4.0), (-4.0, 1.0))])
def test_quarter_turn_rotation_table(xy, local):
    tr = Trajectory(np.array([0.0]), np.array([xy[0]]), np.array([xy[1]]), np.array([0.0]), np.array([1.0]),
                    np.array([0.0]))
    out = transform_to_ego(tr, Pose2D(0.0, 0.0, math.pi / 2))
    assert (out.x[0], out.y[0]) == pytest.approx(local, abs=1e-12)
    assert out.heading[0] == pytest.approx(-math.pi / 2)


@settings(max_examples=50)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi))
def test_transform_round_trip(x, y, h):
    tr = generate_candidates(target(), Pose2D(0.0, 0.5, 0.05), 10.0)[0].with_cost(1.5, True)
    ego = Pose2D(x, y, h)
    back = transform_from_ego(transform_to_ego(tr, ego), ego)
    np.testing.assert_allclose(back.x, tr.x, atol=1e-9)
    np.testing.assert_allclose(back.y, tr.y, atol=1e-9)
    np.testing.assert_allclose(np.cos(back.heading - tr.heading), 1.0, atol=1e-12)
    assert (back.cost, back.collision_free) == (1.5, True)


# --- control -----------------------------------------------------------------------

def test_on_path_on_speed_is_quiet():
    cmd, rep = compute_control(straight(10.0), 10.0, 0.0)
    assert cmd.steering_angle == pytest.approx(0.0, abs=1e-12)
    assert cmd.acceleration == pytest.approx(0.0, abs=1e-12)
    assert rep.status == Status.NOMINAL


def test_left_offset_steers_right_by_pure_pursuit_geometry():
    # ego-frame path 1 m to the right of the vehicle
    cmd, _ = compute_control(straight(10.0, y=-1.0), 10.0, 0.0)
    ld = max(P.lookahead_min, P.lookahead_gain * 10.0)
    alpha = math.atan2(-1.0, ld)
    expected = math.atan(2.0 * VEH.wheelbase * math.sin(alpha) / math.hypot(ld, 1.0))
    assert cmd.steering_angle < 0.0
    assert cmd.steering_angle == pytest.approx(expected, abs=1e-9)


def test_speed_error_saturates_and_auxiliary_passes_through():
    aux = frozenset({Auxiliary.INDICATOR_LEFT})
    cmd, _ = compute_control(straight(10.0), 5.0, 0.0, auxiliary=aux)
    assert cmd.acceleration == 3.0 and cmd.auxiliary == aux


def test_missing_trajectory_brakes_fully():
    cmd, rep = compute_control(None, 10.0, 0.0)
    assert cmd.acceleration == -P.a_limit and rep.status == Status.FAILED


# --- deviation monitor ------------------------------------------------------------

def run_monitor(samples):
    state, reps = DeviationMonitor(), []
    for k, (lat, sp) in enumerate(samples):
        rep, state = monitor_stabilization(lat, sp, state, k)
        reps.append(rep)
    return reps


def test_persistent_lateral_deviation_degrades():
    reps = run_monitor([(0.8, 0.0)] * 3)
    assert [r.status for r in reps] == [Status.NOMINAL, Status.NOMINAL, Status.DEGRADED]
    assert reps[-1].reason == Reason.CONTROL_DEVIATION_EXCEEDED


def test_single_spike_and_nominal_tracking_stay_nominal():
    reps = run_monitor([(0.1, 0.2), (0.9, 0.0), (0.1, 0.1), (0.2, 2.5), (0.0, 0.0)])
    assert all(r.status == Status.NOMINAL and r.reason == Reason.NONE for r in reps)


def test_persistent_speed_deviation_degrades():
    assert run_monitor([(0.0, 2.5)] * 4)[-1].status == Status.DEGRADED


# --- low-latency refresh -------------------------------------------------------------

def follow_target(lead_x=30.0):
    return target(x=lead_x - 12.0, speed=8.0, maneuver=Maneuver.FOLLOW_VEHICLE, linked_element=7,
                  linked_state=LinkedState(lead_x, 0.0, 8.0, 0.0, 100), follow_gap=10.0)


def tracks_with(x, tick=105, confirmed=True):
    tr = Track(7, (x, 0.0, 8.0, 0.0), tuple(tuple(r) for r in np.eye(4)), confirmed=confirmed, last_update_tick=tick)
    return TrackSet(tick, (tr,))


def test_refresh_shifts_the_pose_by_the_track_displacement():
    (tp,), reps = refresh_target_features([follow_target()], tracks_with(30.5))
    assert tp.pose.x == pytest.approx(18.5) and tp.pose.y == 0.0
    assert tp.linked_state.tick == 105 and tp.target_speed == pytest.approx(8.0)
    assert reps == []


def test_refresh_leaves_unlinked_targets_alone():
    lane = target()
    out, reps = refresh_target_features([lane], tracks_with(30.5))
    assert out[0] is lane and reps == []


def test_lost_linked_track_falls_back_to_a_stop():
    (tp,), reps = refresh_target_features([follow_target()], TrackSet(110, ()))
    assert tp.maneuver == Maneuver.STOP_AT_POINT and tp.target_speed == 0.0
    assert tp.pose.x == pytest.approx(18.0)
    assert reps[0].status == Status.DEGRADED and reps[0].reason == Reason.LINKED_ELEMENT_LOST
