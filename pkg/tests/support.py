"""Shared test helpers.

``BooleanRuleEvaluator`` is an independent Boolean-semantics implementation
of every predicate and rule body, written directly from vehicle geometry.
It shares no robustness code with the package and is the oracle for the
sign-consistency acceptance criterion.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from rulehorizon.config import RuleParams
from rulehorizon.scenario import (EGO_ID, EgoConfig, Lane, LaneNetwork,
                                  Scenario, Track, TrafficSign, VehicleState)


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------

def straight_network(n_lanes: int = 3, lane_width: float = 3.5,
                     length: float = 420.0) -> LaneNetwork:
    return LaneNetwork([
        Lane(lane_id=i + 1, center_offset=i * lane_width, width=lane_width,
             s_min=0.0, s_max=length, direction=1, right_index=i)
        for i in range(n_lanes)
    ])


def vehicle(network: LaneNetwork, vid: int, s: float, d: float,
            v_long: float = 15.0, v_lat: float = 0.0,
            length: float = 4.5, width: float = 1.8,
            ax: float = 0.0) -> VehicleState:
    x, y = network.cartesian_of(s, d)
    lane = network.lane_at_d(d)
    heading = math.atan2(v_lat * network.leftward, v_long) if (v_long or v_lat) else 0.0
    return VehicleState(
        vehicle_id=vid, x=x, y=y,
        vx=v_long, vy=v_lat * network.leftward, ax=ax, ay=0.0,
        heading=heading, length=length, width=width, lane_id=lane.lane_id,
    )


def static_scenario(network: LaneNetwork, vehicles, n_frames: int = 10,
                    timestep: float = 0.1, signs=()) -> Scenario:
    """Every listed vehicle frozen in place for ``n_frames``."""
    tracks = {}
    for v in vehicles:
        tracks[v.vehicle_id] = Track(
            first_frame=0, states=tuple(v for _ in range(n_frames)))
    return Scenario(
        timestep=timestep, n_frames=n_frames, lane_network=network,
        tracks=tracks, signs=tuple(signs),
        ego=EgoConfig(goal_s=network.s_max - 5.0),
    )


def moving_scenario(network: LaneNetwork, initial, n_frames: int = 50,
                    timestep: float = 0.1, signs=(),
                    lateral_moves: dict | None = None) -> Scenario:
    """Constant-velocity extrapolation of the initial states.

    ``lateral_moves`` maps vehicle id to (start_frame, d_per_frame, n_steps)
    for simple linear lane drifts.
    """
    lateral_moves = lateral_moves or {}
    tracks = {}
    for v in initial:
        states = []
        s0, d0 = network.frenet_of(v.x, v.y)
        for f in range(n_frames):
            s = s0 + v.vx * network.direction * f * timestep
            d = d0
            v_lat = 0.0
            if v.vehicle_id in lateral_moves:
                start, rate, steps = lateral_moves[v.vehicle_id]
                progressed = min(max(f - start, 0), steps)
                d = d0 + rate * progressed
                v_lat = rate / timestep if start <= f < start + steps else 0.0
            x, y = network.cartesian_of(s, d)
            lane = network.lane_at_d(d)
            states.append(replace(v, x=x, y=y, vy=v_lat * network.leftward,
                                  lane_id=lane.lane_id))
        tracks[v.vehicle_id] = Track(first_frame=0, states=tuple(states))
    return Scenario(
        timestep=timestep, n_frames=n_frames, lane_network=network,
        tracks=tracks, signs=tuple(signs),
        ego=EgoConfig(goal_s=network.s_max - 5.0),
    )


def random_mini_scenario(seed: int):
    """Small randomized scenario plus a moving ego track.

    Returns (scenario, ego_states dict, params). Vehicles get generic float
    kinematics so exact robustness ties have measure zero.
    """
    rng = np.random.default_rng(seed)
    n_lanes = int(rng.integers(2, 5))
    lane_width = float(rng.uniform(3.2, 3.8))
    length = float(rng.uniform(250.0, 500.0))
    network = straight_network(n_lanes, lane_width, length)
    n_frames = int(rng.integers(4, 9))
    timestep = 0.1

    n_vehicles = int(rng.integers(0, 7))
    vehicles = []
    for vid in range(1, n_vehicles + 1):
        lane_idx = int(rng.integers(0, n_lanes))
        d = network.d_center(lane_idx + 1) + float(rng.uniform(-0.8, 0.8))
        s = float(rng.uniform(20.0, length - 20.0))
        vehicles.append(vehicle(
            network, vid, s, d,
            v_long=float(rng.uniform(0.5, 30.0)),
            length=float(rng.uniform(3.8, 6.0)),
            width=float(rng.uniform(1.6, 2.1)),
        ))

    lateral_moves = {}
    for v in vehicles:
        if rng.uniform() < 0.3:
            lateral_moves[v.vehicle_id] = (
                int(rng.integers(0, max(1, n_frames - 2))),
                float(rng.uniform(-0.6, 0.6)),
                int(rng.integers(1, n_frames)),
            )
    signs = []
    if rng.uniform() < 0.5:
        signs.append(TrafficSign(kind="no_overtaking_start",
                                 s=float(rng.uniform(30.0, length - 30.0))))
        if rng.uniform() < 0.3:
            signs.append(TrafficSign(kind="no_overtaking_end",
                                     s=float(rng.uniform(signs[0].s + 10.0, length))))
    scenario = moving_scenario(network, vehicles, n_frames, timestep, signs,
                               lateral_moves)

    ego_lane = int(rng.integers(0, n_lanes))
    ego_d = network.d_center(ego_lane + 1) + float(rng.uniform(-0.9, 0.9))
    ego_s = float(rng.uniform(15.0, length - 15.0))
    ego_v = float(rng.uniform(0.5, 32.0))
    ego_states = {}
    for f in range(n_frames):
        ego_states[f] = vehicle(network, EGO_ID, ego_s + ego_v * f * timestep,
                                ego_d, v_long=ego_v)
    params = RuleParams(cutin_t_c=float(rng.uniform(0.2, 1.0)))
    return scenario, ego_states, params


# ---------------------------------------------------------------------------
# Independent Boolean evaluator
# ---------------------------------------------------------------------------

class BooleanRuleEvaluator:
    """Boolean semantics only, from raw geometry; no robustness reuse."""

    def __init__(self, scenario: Scenario, ego_states, params: RuleParams):
        self.scenario = scenario
        self.network = scenario.lane_network
        self.ego_states = ego_states
        self.params = params

    # -- geometry -----------------------------------------------------------

    def _sd(self, state: VehicleState):
        return self.network.frenet_of(state.x, state.y)

    def _lon_extent(self, state: VehicleState):
        s, _ = self._sd(state)
        return s - state.length / 2.0, s + state.length / 2.0

    def _lat_extent(self, state: VehicleState):
        _, d = self._sd(state)
        return d - state.width / 2.0, d + state.width / 2.0

    def _band(self, lane_id: int):
        center = self.network.d_center(lane_id)
        half = self.network.lane(lane_id).width / 2.0
        return center - half, center + half

    def _v_long(self, state: VehicleState) -> float:
        return state.vx * self.network.direction

    # -- predicates ---------------------------------------------------------

    def in_same_lane(self, ego, other) -> bool:
        e_lo, e_hi = self._lat_extent(ego)
        o_lo, o_hi = self._lat_extent(other)
        for lane in self.network.lanes:
            b_lo, b_hi = self._band(lane.lane_id)
            if (min(e_hi, b_hi) - max(e_lo, b_lo) > 0
                    and min(o_hi, b_hi) - max(o_lo, b_lo) > 0):
                return True
        return False

    def in_front_of(self, ego, other) -> bool:
        _, e_front = self._lon_extent(ego)
        o_rear, _ = self._lon_extent(other)
        return o_rear - e_front > 0

    def keeps_safe_distance_prec(self, ego, other) -> bool:
        _, e_front = self._lon_extent(ego)
        o_rear, _ = self._lon_extent(other)
        brake = abs(self.params.safe_distance_a_min)
        v_e, v_o = self._v_long(ego), self._v_long(other)
        d_safe = (v_e * self.params.safe_distance_delta
                  + v_e * v_e / (2 * brake) - v_o * v_o / (2 * brake))
        return o_rear - e_front - d_safe > 0

    def _overlaps_band(self, state, lane_id) -> float:
        lo, hi = self._lat_extent(state)
        b_lo, b_hi = self._band(lane_id)
        return min(hi, b_hi) - max(lo, b_lo)

    def cut_in(self, t: int, ego, other_id: int) -> bool:
        if t == 0:
            return False
        other = self.scenario.state_of(other_id, t)
        if other is None:
            return False
        enc_now = self._overlaps_band(other, ego.lane_id)
        prev = self.scenario.state_of(other_id, t - 1)
        not_before = True if prev is None else self._overlaps_band(prev, ego.lane_id) < 0
        _, e_front = self._lon_extent(ego)
        o_rear, _ = self._lon_extent(other)
        return enc_now > 0 and not_before and o_rear - e_front > 0

    def left_of(self, ego, other) -> bool:
        idx_e = self.network.lane(ego.lane_id).right_index
        idx_o = self.network.lane(other.lane_id).right_index
        e_rear, e_front = self._lon_extent(ego)
        o_rear, o_front = self._lon_extent(other)
        overlap = min(e_front, o_front) - max(e_rear, o_rear)
        return idx_o > idx_e and overlap > 0

    def drives_faster(self, ego, other) -> bool:
        return self._v_long(ego) - self._v_long(other) > 0

    def _cluster(self, other, t):
        mates = [v for v in self.scenario.vehicles_at(t)
                 if v.lane_id == other.lane_id]
        mates.sort(key=lambda v: self._sd(v)[0])
        idx = next(i for i, v in enumerate(mates)
                   if v.vehicle_id == other.vehicle_id)

        def gap(a, b):
            return self._lon_extent(b)[0] - self._lon_extent(a)[1]

        lo = idx
        while lo > 0 and gap(mates[lo - 1], mates[lo]) < self.params.cluster_gap:
            lo -= 1
        hi = idx
        while hi + 1 < len(mates) and gap(mates[hi], mates[hi + 1]) < self.params.cluster_gap:
            hi += 1
        return mates[lo:hi + 1]

    def _cluster_holds(self, other, t, speed_threshold) -> bool:
        cluster = self._cluster(other, t)
        if len(cluster) < self.params.cluster_min_count:
            return False
        return max(self._v_long(v) for v in cluster) < speed_threshold

    def in_congestion(self, other, t) -> bool:
        return self._cluster_holds(other, t, self.params.congestion_speed)

    def in_slow_moving_traffic(self, other, t) -> bool:
        return self._cluster_holds(other, t, self.params.slow_moving_speed)

    def in_queue_of_vehicles(self, other, t) -> bool:
        return self._cluster_holds(other, t, self.params.queue_speed)

    def no_overtaking_sign(self, ego) -> bool:
        s, _ = self._sd(ego)
        signs = sorted(self.scenario.signs, key=lambda sg: sg.s)
        zones = []
        open_start = None
        for sign in signs:
            if sign.kind == "no_overtaking_start" and open_start is None:
                open_start = sign.s
            elif sign.kind == "no_overtaking_end" and open_start is not None:
                zones.append((open_start, sign.s))
                open_start = None
        if open_start is not None:
            zones.append((open_start, self.network.s_max))
        r = self.params.sign_detection_range
        return any(start - r < s < end for start, end in zones)

    def in_rightmost_lane(self, ego) -> bool:
        rightmost = self.network.rightmost
        _, d = self._sd(ego)
        return abs(d - self.network.d_center(rightmost.lane_id)) < rightmost.width / 2.0

    # -- rule bodies ---------------------------------------------------------

    def _recent_cut_in(self, t: int, other_id: int) -> bool:
        steps = int(round(self.params.cutin_t_c / self.scenario.timestep))
        for u in range(max(0, t - steps), t + 1):
            if u == 0:
                continue  # Previous unevaluable: sample skipped
            ego_u = self.ego_states[u]
            if self.cut_in(u, ego_u, other_id) and not self.cut_in(u - 1, self.ego_states[u - 1], other_id):
                return True
        return False

    def rule_g1(self, t: int) -> bool:
        ego = self.ego_states[t]
        for other in self.scenario.vehicles_at(t):
            antecedent = (self.in_same_lane(ego, other)
                          and self.in_front_of(ego, other)
                          and not self._recent_cut_in(t, other.vehicle_id))
            if antecedent and not self.keeps_safe_distance_prec(ego, other):
                return False
        return True

    def rule_i2(self, t: int) -> bool:
        ego = self.ego_states[t]
        for other in self.scenario.vehicles_at(t):
            if self.left_of(ego, other) and self.drives_faster(ego, other):
                if not (self.in_congestion(other, t)
                        or self.in_slow_moving_traffic(other, t)
                        or self.in_queue_of_vehicles(other, t)):
                    return False
        return True

    def rule_i6(self, t: int) -> bool:
        ego = self.ego_states[t]
        if self.no_overtaking_sign(ego):
            return self.in_rightmost_lane(ego)
        return True
