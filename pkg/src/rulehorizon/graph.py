"""Ego-centric vehicle-to-vehicle graph with normalised features.

Nodes are the ego plus vehicles within the sensor radius; each node links
to its (up to) three nearest neighbours closer than the edge radius.
Stored edges keep the 3-NN out-degree bound; message passing additionally
uses the reversed direction of every stored edge so information flows both
ways regardless of who selected whom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import StateError
from .scenario import Scenario, VehicleState

NODE_DIM = 4    # PosEgoFrameX, PosEgoFrameY, Velocity, Lane
EDGE_DIM = 6    # RelPosEgoX, RelPosEgoY, RelVelEgoX, RelVelEgoY, LeftOf, SameLane
EGO_DIM = 12    # Accel, Velocity, YawRate, DistL/R bound, DistL/R road bound,
                # HeadingError, GoalDistLat, GoalDistLon, Lane, NonOvertakingTS


def signed_log(value: float) -> float:
    """log(|f| + 1) with the sign of f; maps 0 to 0."""
    if value == 0.0:
        return 0.0
    return math.log(abs(value) + 1.0) * math.copysign(1.0, value)


def normalize_velocity(v: float) -> float:
    return (v - 15.0) / 20.0


def normalize_position(p: float) -> float:
    return p / 50.0


def normalize_relative_velocity(v: float) -> float:
    return v / 20.0


def normalize_acceleration(a: float) -> float:
    return a / 20.0


def clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def normalize_sign_distance(raw: float) -> float:
    return (raw - 50.0) / 50.0


@dataclass(frozen=True, eq=False)
class TrafficGraph:
    """Feature tensors plus topology for one timestep."""

    node_features: np.ndarray        # (n, NODE_DIM)
    edges: tuple                     # 3-NN selection, (src, dst) node indices
    message_src: np.ndarray          # symmetrised directed edges
    message_dst: np.ndarray
    message_features: np.ndarray     # (m, EDGE_DIM)
    ego_features: np.ndarray         # (EGO_DIM,)
    ego_index: int
    vehicle_ids: tuple

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_messages(self) -> int:
        return len(self.message_src)


def _ego_frame(ego: VehicleState):
    c, s = math.cos(ego.heading), math.sin(ego.heading)

    def to_ego(dx: float, dy: float) -> tuple:
        return c * dx + s * dy, -s * dx + c * dy

    return to_ego


def _edge_features(src: VehicleState, dst: VehicleState, to_ego, network) -> np.ndarray:
    rel_px, rel_py = to_ego(src.x - dst.x, src.y - dst.y)
    rel_vx, rel_vy = to_ego(src.vx - dst.vx, src.vy - dst.vy)
    # LeftOf mirrors the rule predicate: source in a lane strictly left of
    # the destination with positive longitudinal overlap.
    idx_s = network.lane(src.lane_id).right_index
    idx_d = network.lane(dst.lane_id).right_index
    s_src, _ = network.frenet_unchecked(src.x, src.y)
    s_dst, _ = network.frenet_unchecked(dst.x, dst.y)
    overlap = (min(s_src + src.length / 2, s_dst + dst.length / 2)
               - max(s_src - src.length / 2, s_dst - dst.length / 2))
    left_of = 1.0 if (idx_s > idx_d and overlap > 0.0) else 0.0
    same_lane = 1.0 if src.lane_id == dst.lane_id else 0.0
    return np.array([
        normalize_position(rel_px),
        normalize_position(rel_py),
        normalize_relative_velocity(rel_vx),
        normalize_relative_velocity(rel_vy),
        left_of,
        same_lane,
    ])


def _sign_distance_raw(scenario: Scenario, ego_s: float, sensor_radius: float) -> float:
    """Distance to the governing start sign, capped at the sensor radius.

    Inside an active zone the governing sign lies behind (negative value);
    past an end sign the next start sign ahead applies again. Without any
    sign in range the feature saturates at the radius.
    """
    starts = sorted(s.s for s in scenario.signs if s.kind == "no_overtaking_start")
    ends = sorted(s.s for s in scenario.signs if s.kind == "no_overtaking_end")
    governing = None
    for s_start in starts:
        s_end = next((e for e in ends if e > s_start), scenario.lane_network.s_max)
        if ego_s < s_start:
            governing = s_start - ego_s
            break
        if s_start <= ego_s < s_end:
            governing = s_start - ego_s
            break
    if governing is None:
        return sensor_radius
    return clamp(governing, -sensor_radius, sensor_radius)


def ego_feature_vector(scenario: Scenario, ego: VehicleState, goal_s: float,
                       yaw_rate: float = 0.0,
                       sensor_radius: float = 100.0) -> np.ndarray:
    network = scenario.lane_network
    s, d = network.frenet_unchecked(ego.x, ego.y)
    lane = network.lane(ego.lane_id)
    d_lane = network.d_center(lane.lane_id)
    dist_left_bound = (d_lane + lane.width / 2.0) - d
    dist_right_bound = d - (d_lane - lane.width / 2.0)
    dist_left_road = network.d_max - d
    dist_right_road = d - network.d_min
    heading_error = ego.heading - network.heading
    heading_error = math.remainder(heading_error, 2.0 * math.pi)
    a_long = (ego.ax * math.cos(ego.heading) + ego.ay * math.sin(ego.heading))
    goal_lat = 0.0 - d
    goal_lon = goal_s - s
    sign_raw = _sign_distance_raw(scenario, s, sensor_radius)
    return np.array([
        normalize_acceleration(a_long),
        normalize_velocity(ego.speed),
        clamp(yaw_rate, -1.0, 1.0),
        dist_left_bound / 2.0,
        dist_right_bound / 2.0,
        (dist_left_road + dist_left_bound) / 12.0,
        (dist_right_road + dist_right_bound) / 12.0,
        clamp(heading_error, -math.pi / 4.0, math.pi / 4.0),
        signed_log(goal_lat),
        signed_log(goal_lon),
        float(lane.right_index),
        normalize_sign_distance(sign_raw),
    ])


def build_graph(scenario: Scenario, ego: VehicleState, t: int,
                model: ModelConfig | None = None,
                yaw_rate: float = 0.0,
                goal_s: float | None = None) -> TrafficGraph:
    """Construct the ego-rooted traffic graph at frame ``t``.

    Non-ego vehicles that end up without any edge are dropped; the graph
    degenerates to the lone ego node when nothing is within reach.
    """
    model = model or ModelConfig()
    if ego is None:
        raise StateError(f"ego state required at frame {t}")
    network = scenario.lane_network
    goal_s = scenario.ego.goal_s if goal_s is None else goal_s

    vehicles = [ego]
    for other in scenario.vehicles_at(t):
        if math.hypot(other.x - ego.x, other.y - ego.y) <= model.sensor_radius:
            vehicles.append(other)
    vehicles.sort(key=lambda v: v.vehicle_id)

    positions = np.array([[v.x, v.y] for v in vehicles])
    n = len(vehicles)
    selection = []
    for i in range(n):
        dists = np.hypot(positions[:, 0] - positions[i, 0],
                         positions[:, 1] - positions[i, 1])
        order = sorted(
            (float(dists[j]), vehicles[j].vehicle_id, j)
            for j in range(n) if j != i
        )
        picked = 0
        for dist, _, j in order:
            if dist >= model.edge_radius or picked >= model.neighbors:
                break
            selection.append((i, j))
            picked += 1

    ego_index = next(i for i, v in enumerate(vehicles) if v.vehicle_id == ego.vehicle_id)
    connected = {ego_index}
    for i, j in selection:
        connected.add(i)
        connected.add(j)
    keep = sorted(connected)
    remap = {old: new for new, old in enumerate(keep)}
    vehicles = [vehicles[i] for i in keep]
    selection = [(remap[i], remap[j]) for i, j in selection]
    ego_index = remap[ego_index]

    to_ego = _ego_frame(ego)
    node_rows = []
    for v in vehicles:
        px, py = to_ego(v.x - ego.x, v.y - ego.y)
        node_rows.append([
            normalize_position(px),
            normalize_position(py),
            normalize_velocity(v.speed),
            float(network.lane(v.lane_id).right_index),
        ])
    node_features = np.array(node_rows) if node_rows else np.zeros((0, NODE_DIM))

    messages = sorted({(i, j) for i, j in selection} | {(j, i) for i, j in selection})
    messages.sort(key=lambda e: (e[1], e[0]))   # argmax tie-break order
    if messages:
        message_src = np.array([m[0] for m in messages])
        message_dst = np.array([m[1] for m in messages])
        message_features = np.array([
            _edge_features(vehicles[i], vehicles[j], to_ego, network)
            for i, j in messages
        ])
    else:
        message_src = np.zeros(0, dtype=int)
        message_dst = np.zeros(0, dtype=int)
        message_features = np.zeros((0, EDGE_DIM))

    ego_features = ego_feature_vector(scenario, ego, goal_s, yaw_rate,
                                      model.sensor_radius)
    return TrafficGraph(
        node_features=node_features,
        edges=tuple(selection),
        message_src=message_src,
        message_dst=message_dst,
        message_features=message_features,
        ego_features=ego_features,
        ego_index=ego_index,
        vehicle_ids=tuple(v.vehicle_id for v in vehicles),
    )
