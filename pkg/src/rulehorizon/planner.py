"""Lattice planner: polynomial candidates in the Frenet frame, feasibility
and collision filtering, and cost-based selection (the acting component).

Lateral motion is a quintic in time with zero end velocity/acceleration;
longitudinal motion is a velocity-keeping quartic with free end position.
Two sampling densities are tried in order: a coarse lattice over lane
centres and mid offsets, and a finer fallback adding quarter offsets and
intermediate speeds when the coarse level yields nothing drivable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import PlannerConfig, RuleParams
from .errors import PlannerFailure, StateError
from .rules import RULE_G1, RULE_I2, RULE_I6, rule_body_series
from .scenario import EGO_ID, Scenario, VehicleState, _normalize_heading

STEP_DT = 0.1


@dataclass(frozen=True)
class FrenetState:
    s: float
    s_d: float
    s_dd: float
    d: float
    d_d: float
    d_dd: float


class QuinticPolynomial:
    """x(t) with fixed position/velocity/acceleration at both ends."""

    def __init__(self, x0, v0, a0, x1, v1, a1, T):
        self.c = np.zeros(6)
        self.c[0] = x0
        self.c[1] = v0
        self.c[2] = a0 / 2.0
        A = np.array([
            [T ** 3, T ** 4, T ** 5],
            [3 * T ** 2, 4 * T ** 3, 5 * T ** 4],
            [6 * T, 12 * T ** 2, 20 * T ** 3],
        ])
        b = np.array([
            x1 - (self.c[0] + self.c[1] * T + self.c[2] * T ** 2),
            v1 - (self.c[1] + 2 * self.c[2] * T),
            a1 - 2 * self.c[2],
        ])
        self.c[3:] = np.linalg.solve(A, b)

    def position(self, t):
        c = self.c
        return c[0] + c[1] * t + c[2] * t ** 2 + c[3] * t ** 3 + c[4] * t ** 4 + c[5] * t ** 5

    def velocity(self, t):
        c = self.c
        return c[1] + 2 * c[2] * t + 3 * c[3] * t ** 2 + 4 * c[4] * t ** 3 + 5 * c[5] * t ** 4

    def acceleration(self, t):
        c = self.c
        return 2 * c[2] + 6 * c[3] * t + 12 * c[4] * t ** 2 + 20 * c[5] * t ** 3

    def jerk(self, t):
        c = self.c
        return 6 * c[3] + 24 * c[4] * t + 60 * c[5] * t ** 2


class QuarticPolynomial:
    """x(t) with fixed start state and fixed end velocity/acceleration."""

    def __init__(self, x0, v0, a0, v1, a1, T):
        self.c = np.zeros(5)
        self.c[0] = x0
        self.c[1] = v0
        self.c[2] = a0 / 2.0
        A = np.array([
            [3 * T ** 2, 4 * T ** 3],
            [6 * T, 12 * T ** 2],
        ])
        b = np.array([
            v1 - (self.c[1] + 2 * self.c[2] * T),
            a1 - 2 * self.c[2],
        ])
        self.c[3:] = np.linalg.solve(A, b)

    def position(self, t):
        c = self.c
        return c[0] + c[1] * t + c[2] * t ** 2 + c[3] * t ** 3 + c[4] * t ** 4

    def velocity(self, t):
        c = self.c
        return c[1] + 2 * c[2] * t + 3 * c[3] * t ** 2 + 4 * c[4] * t ** 3

    def acceleration(self, t):
        c = self.c
        return 2 * c[2] + 6 * c[3] * t + 12 * c[4] * t ** 2

    def jerk(self, t):
        c = self.c
        return 6 * c[3] + 24 * c[4] * t


@dataclass
class TrajectoryCandidate:
    """One sampled trajectory with per-step states every 0.1 s."""

    index: int                     # generation index, stable under shuffling
    d_target: float
    v_target: float
    horizon: float
    lateral: QuinticPolynomial
    longitudinal: QuarticPolynomial
    times: np.ndarray
    s: np.ndarray
    s_d: np.ndarray
    s_dd: np.ndarray
    d: np.ndarray
    d_d: np.ndarray
    d_dd: np.ndarray
    v: np.ndarray
    a: np.ndarray
    heading: np.ndarray
    curvature: np.ndarray
    x: np.ndarray
    y: np.ndarray
    feasible: bool = True
    rejection: str | None = None
    cost: float = math.inf
    cost_breakdown: dict = field(default_factory=dict)

    def frenet_state_at(self, t: float) -> FrenetState:
        return FrenetState(
            s=float(self.longitudinal.position(t)),
            s_d=float(self.longitudinal.velocity(t)),
            s_dd=float(self.longitudinal.acceleration(t)),
            d=float(self.lateral.position(t)),
            d_d=float(self.lateral.velocity(t)),
            d_dd=float(self.lateral.acceleration(t)),
        )

    def vehicle_state_at(self, step: int, scenario: Scenario,
                         length: float, width: float) -> VehicleState:
        network = scenario.lane_network
        x, y = network.cartesian_of(float(self.s[step]), float(self.d[step]))
        heading = float(self.heading[step])
        v = float(self.v[step])
        a = float(self.a[step])
        lane = network.lane_at_d(float(self.d[step]))
        return VehicleState(
            vehicle_id=EGO_ID, x=x, y=y,
            vx=v * math.cos(heading), vy=v * math.sin(heading),
            ax=a * math.cos(heading), ay=a * math.sin(heading),
            heading=_normalize_heading(heading), length=length, width=width,
            lane_id=lane.lane_id,
        )


def _build_candidate(index, start: FrenetState, d_target, v_target, horizon,
                     network) -> TrajectoryCandidate:
    lat = QuinticPolynomial(start.d, start.d_d, start.d_dd, d_target, 0.0, 0.0, horizon)
    lon = QuarticPolynomial(start.s, start.s_d, start.s_dd, v_target, 0.0, horizon)
    n = int(round(horizon / STEP_DT)) + 1
    t = np.arange(n) * STEP_DT
    s = lon.position(t)
    s_d = lon.velocity(t)
    s_dd = lon.acceleration(t)
    d = lat.position(t)
    d_d = lat.velocity(t)
    d_dd = lat.acceleration(t)
    v = np.hypot(s_d, d_d)
    a = np.hypot(s_dd, d_dd)
    direction = network.direction
    leftward = network.leftward
    base = 0.0 if direction == 1 else math.pi
    # Native-frame heading from the frenet velocity vector.
    heading = np.where(v > 1e-9, base + np.arctan2(leftward * d_d * direction, s_d), base)
    speed3 = np.maximum(v, 0.1) ** 3
    curvature = (s_d * d_dd - d_d * s_dd) / speed3
    xy = np.array([network.cartesian_of(float(si), float(di)) for si, di in zip(s, d)])
    return TrajectoryCandidate(
        index=index, d_target=d_target, v_target=v_target, horizon=horizon,
        lateral=lat, longitudinal=lon, times=t,
        s=s, s_d=s_d, s_dd=s_dd, d=d, d_d=d_d, d_dd=d_dd,
        v=v, a=a, heading=heading, curvature=curvature,
        x=xy[:, 0], y=xy[:, 1],
    )


def _lateral_targets(network, level: int) -> list:
    centers = [network.d_center(ln.lane_id) for ln in network.lanes]
    targets = list(centers)
    for a, b in zip(centers, centers[1:]):
        targets.append((a + b) / 2.0)
        if level >= 2:
            targets.append(a + (b - a) * 0.25)
            targets.append(a + (b - a) * 0.75)
    return sorted(set(targets))


def _speed_targets(current: float, level: int, params: PlannerConfig) -> list:
    # The fine fallback biases towards braking: it is reached exactly when
    # the coarse lattice found no collision-free candidate.
    deltas = (-2.0, 0.0, 2.0) if level == 1 else (-6.0, -3.0, -1.0, 0.0, 2.0)
    targets = []
    for delta in deltas:
        v = min(max(current + delta, params.speed_min), params.speed_max)
        if v not in targets:
            targets.append(v)
    return targets


def sample_candidates(start: FrenetState, scenario: Scenario,
                      params: PlannerConfig, level: int = 1) -> list:
    """Cartesian product of lateral end offsets and target speeds."""
    if not all(map(math.isfinite, (start.s, start.s_d, start.s_dd,
                                   start.d, start.d_d, start.d_dd))):
        raise StateError("non-finite ego frenet state")
    network = scenario.lane_network
    laterals = _lateral_targets(network, level)
    speeds = _speed_targets(start.s_d, level, params)
    if not speeds:
        raise PlannerFailure("empty target-speed set")
    candidates = []
    index = 0
    for d_target in laterals:
        for v_target in speeds:
            candidates.append(_build_candidate(index, start, d_target, v_target,
                                               params.horizon, network))
            index += 1
    if not candidates:
        raise PlannerFailure("empty candidate set")
    return candidates


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    constraint: str | None = None


def check_feasibility(candidate: TrajectoryCandidate, scenario: Scenario,
                      params: PlannerConfig) -> FeasibilityVerdict:
    """Per-step kinematic limits; reports the first violated constraint.

    Off-road means leaving the road laterally; running past the recorded
    longitudinal extent is an episode-termination concern, not a kinematic
    one (the goal sits just before the road end).
    """
    network = scenario.lane_network
    if np.any(np.abs(candidate.a) > params.accel_max):
        return FeasibilityVerdict(False, "acceleration")
    if np.any(np.abs(candidate.curvature) > params.curvature_max):
        return FeasibilityVerdict(False, "curvature")
    if np.any(candidate.s_d < params.speed_min - 1e-12):
        return FeasibilityVerdict(False, "velocity")
    if np.any(candidate.s_d > params.speed_max + 1e-12):
        return FeasibilityVerdict(False, "velocity")
    if np.any(candidate.d < network.d_min) or np.any(candidate.d > network.d_max):
        return FeasibilityVerdict(False, "off-road")
    return FeasibilityVerdict(True)


# ---------------------------------------------------------------------------
# Collision checking on oriented rectangles
# ---------------------------------------------------------------------------

def _rect_corners(cx, cy, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    axes = np.array([[c, s], [-s, c]])
    half = np.array([length / 2.0, width / 2.0])
    signs = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
    return np.array([cx, cy]) + (signs * half) @ axes


def _segment_distance(p1, p2, q1, q2) -> float:
    def point_seg(p, a, b):
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
        return float(np.linalg.norm(p - (a + t * ab)))

    return min(point_seg(p1, q1, q2), point_seg(p2, q1, q2),
               point_seg(q1, p1, p2), point_seg(q2, p1, p2))


def _polygons_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    # Separating-axis test for convex quadrilaterals.
    for poly in (a, b):
        for i in range(len(poly)):
            edge = poly[(i + 1) % len(poly)] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def rectangle_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two oriented rectangles (0 when overlapping)."""
    if _polygons_intersect(a, b):
        return 0.0
    best = math.inf
    for i in range(4):
        p1, p2 = a[i], a[(i + 1) % 4]
        for j in range(4):
            q1, q2 = b[j], b[(j + 1) % 4]
            best = min(best, _segment_distance(p1, p2, q1, q2))
    return best


def vehicle_distance(a: VehicleState, b: VehicleState) -> float:
    return rectangle_distance(
        _rect_corners(a.x, a.y, a.heading, a.length, a.width),
        _rect_corners(b.x, b.y, b.heading, b.length, b.width),
    )


def check_collision(candidate: TrajectoryCandidate, scenario: Scenario, t0: int,
                    clearance: float = 3.0,
                    ego_length: float = 4.5, ego_width: float = 1.8) -> bool:
    """True iff every per-step rectangle pair keeps at least ``clearance``.

    Other vehicles are log-replayed from the scenario over the horizon.
    """
    for step in range(len(candidate.times)):
        frame = t0 + step
        others = scenario.vehicles_at(frame)
        if not others:
            continue
        ego = candidate.vehicle_state_at(step, scenario, ego_length, ego_width)
        ego_corners = _rect_corners(ego.x, ego.y, ego.heading, ego.length, ego.width)
        for other in others:
            # Centre-distance prefilter: beyond bounding radii plus clearance.
            reach = (math.hypot(ego.length, ego.width)
                     + math.hypot(other.length, other.width)) / 2.0 + clearance
            if math.hypot(other.x - ego.x, other.y - ego.y) > reach:
                continue
            corners = _rect_corners(other.x, other.y, other.heading,
                                    other.length, other.width)
            if rectangle_distance(ego_corners, corners) < clearance:
                return False
    return True


# ---------------------------------------------------------------------------
# Cost terms
# ---------------------------------------------------------------------------

VALUE_STRIDE = 5  # evaluate the critic every 0.5 s along the candidate


@dataclass
class CostContext:
    """Everything a cost term may need besides the candidate itself."""

    scenario: Scenario
    t0: int
    params: PlannerConfig
    rule_params: RuleParams
    critic: object = None           # callable (VehicleState, frame) -> V
    ego_length: float = 4.5
    ego_width: float = 1.8
    ego_history: dict = field(default_factory=dict)   # frame -> VehicleState

    def ego_states_along(self, candidate: TrajectoryCandidate) -> dict:
        states = dict(self.ego_history)
        for step in range(len(candidate.times)):
            states[self.t0 + step] = candidate.vehicle_state_at(
                step, self.scenario, self.ego_length, self.ego_width)
        return states


def _strided_steps(n: int) -> list:
    steps = list(range(0, n, VALUE_STRIDE))
    if steps[-1] != n - 1:
        steps.append(n - 1)
    return steps


def cost_value(candidate: TrajectoryCandidate, ctx: CostContext) -> float:
    """Mean of -V over strided per-step states (terminal state included)."""
    if ctx.critic is None:
        raise StateError("value cost term requires a critic")
    total = 0.0
    steps = _strided_steps(len(candidate.times))
    for step in steps:
        state = candidate.vehicle_state_at(step, ctx.scenario,
                                           ctx.ego_length, ctx.ego_width)
        total += -ctx.critic(state, ctx.t0 + step)
    return total / len(steps)


def _cost_rule(rule_id: str):
    def term(candidate: TrajectoryCandidate, ctx: CostContext) -> float:
        clip = ctx.rule_params.clip
        ego_states = ctx.ego_states_along(candidate)
        n = len(candidate.times)
        start = ctx.t0
        if rule_id == RULE_G1:
            # Include executed history so the cut-in window reaches back.
            back = int(round(ctx.rule_params.cutin_t_c / ctx.scenario.timestep)) + 1
            start = max(ctx.t0 - back, min(ego_states))
        series = rule_body_series(rule_id, ctx.scenario, ego_states,
                                  range(start, ctx.t0 + n), ctx.rule_params)
        values = series.values[-n:]
        return float(np.mean(-np.clip(values, -clip, clip)))

    return term


def cost_jerk(candidate: TrajectoryCandidate, ctx: CostContext) -> float:
    """Integral of squared jerk over the horizon (trapezoidal)."""
    t = candidate.times
    jerk_sq = candidate.longitudinal.jerk(t) ** 2 + candidate.lateral.jerk(t) ** 2
    return float(np.trapezoid(jerk_sq, t))


def cost_speed_deviation(candidate: TrajectoryCandidate, ctx: CostContext) -> float:
    return float(np.mean((candidate.s_d - candidate.v_target) ** 2))


def cost_lateral_deviation(candidate: TrajectoryCandidate, ctx: CostContext) -> float:
    return float(np.mean((candidate.d - ctx.params.route_offset) ** 2))


COST_TERMS = {
    "value": cost_value,
    "rule_g1": _cost_rule(RULE_G1),
    "rule_i6": _cost_rule(RULE_I6),
    "rule_i2": _cost_rule(RULE_I2),
    "jerk": cost_jerk,
    "speed": cost_speed_deviation,
    "lateral": cost_lateral_deviation,
}


def cost_weights(params: PlannerConfig, with_value: bool) -> dict:
    weights = {
        "rule_g1": params.weight_rule_g1,
        "rule_i6": params.weight_rule_i6,
        "rule_i2": params.weight_rule_i2,
        "jerk": params.weight_jerk,
        "speed": params.weight_speed,
        "lateral": params.weight_lateral,
    }
    weights["value"] = params.weight_value if with_value else 0.0
    return weights


def total_cost(candidate: TrajectoryCandidate, weights: dict,
               ctx: CostContext) -> tuple:
    """Weighted sum of registered terms; returns (total, breakdown)."""
    breakdown = {}
    total = 0.0
    for name, weight in weights.items():
        if weight == 0.0:
            continue
        if name not in COST_TERMS:
            raise StateError(f"unknown cost term {name!r}")
        if name == "value" and ctx.critic is None:
            raise StateError("value cost weighted but no critic configured")
        value = COST_TERMS[name](candidate, ctx)
        breakdown[name] = value
        total += weight * value
    return total, breakdown


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

def plan(start: FrenetState, scenario: Scenario, t0: int,
         params: PlannerConfig, rule_params: RuleParams,
         critic=None, clearance: float = 3.0,
         ego_length: float = 4.5, ego_width: float = 1.8,
         ego_history: dict | None = None,
         candidates: list | None = None) -> TrajectoryCandidate:
    """Select the cheapest feasible, collision-free candidate.

    Ties break on lower |d_target - route_offset| and then on the stable
    generation index, so the result does not depend on list order. Raises
    :class:`PlannerFailure` when both sampling levels come up empty.
    """
    ctx = CostContext(
        scenario=scenario, t0=t0, params=params, rule_params=rule_params,
        critic=critic, ego_length=ego_length, ego_width=ego_width,
        ego_history=dict(ego_history or {}),
    )
    weights = cost_weights(params, with_value=critic is not None)

    levels = [candidates] if candidates is not None else None
    if levels is None:
        levels = [sample_candidates(start, scenario, params, level)
                  for level in (1, 2)]

    rejection = "no candidates"
    for pool in levels:
        survivors = []
        for candidate in pool:
            verdict = check_feasibility(candidate, scenario, params)
            if not verdict.feasible:
                candidate.feasible = False
                candidate.rejection = verdict.constraint
                rejection = f"infeasible ({verdict.constraint})"
                continue
            if not check_collision(candidate, scenario, t0, clearance,
                                   ego_length, ego_width):
                candidate.feasible = False
                candidate.rejection = "collision"
                rejection = "collision"
                continue
            survivors.append(candidate)
        if not survivors:
            continue
        for candidate in survivors:
            candidate.cost, candidate.cost_breakdown = total_cost(candidate, weights, ctx)
        return min(survivors, key=lambda c: (
            c.cost, abs(c.d_target - params.route_offset), c.index))
    raise PlannerFailure(f"all candidates rejected ({rejection})")
