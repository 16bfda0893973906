"""Quantitative temporal-logic engine and the three interstate traffic rules.

Robustness semantics: a signed real margin whose sign matches Boolean
satisfaction (strictly positive means the property holds) and whose
magnitude is a physical margin (metres for distances, m/s for speeds).
Negation flips the sign, conjunction takes the minimum, disjunction the
maximum; past operators look backwards over a sliding window.

Two evaluation modes exist for past operators. Strict mode marks a
timestep invalid when the window reaches before the start of the trace.
Truncated mode clips the window to the available history and skips
unevaluable samples, which is the convention used when rules are turned
into per-step rewards; the first samples of a trace then carry "no past
event" semantics.

Absent vehicles contribute the sentinel ``-ABSENT`` (predicate false);
vacuously true quantifications report ``+ABSENT``. Sentinels only enter
min/max chains through explicit quantifier expansion.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .config import RuleParams
from .errors import InvalidTimestepError, PredicateLookupError, StateError
from .scenario import LaneNetwork, Scenario, VehicleState

ABSENT = 1.0e6

RULE_G1 = "R_G1"
RULE_I6 = "R_I6"
RULE_I2 = "R_I2"

#: Priority order, highest first.
RULE_PRIORITY = (RULE_G1, RULE_I6, RULE_I2)


# ---------------------------------------------------------------------------
# Formula syntax tree
# ---------------------------------------------------------------------------

class Formula:
    """Base class; subclasses implement ``_eval`` and ``_valid``."""

    def robustness(self, traces: dict, t: int, truncate_past: bool = False) -> float:
        """Evaluate at integer step ``t`` over named predicate traces.

        In strict mode an :class:`InvalidTimestepError` is raised where
        history is insufficient.
        """
        value = self._eval(traces, t, truncate_past)
        if value is None:
            raise InvalidTimestepError(f"insufficient history at step {t}")
        return value

    def valid_from(self, traces: dict) -> int:
        """First step at which strict evaluation is defined."""
        n = _trace_length(traces)
        for t in range(n):
            if self._eval(traces, t, False) is not None:
                return t
        return n

    def _eval(self, traces, t, truncate):
        raise NotImplementedError

    def evaluate_trace(self, traces: dict, truncate_past: bool = True):
        """Evaluate at every step; returns (values, valid_mask).

        The mask reflects strict semantics regardless of ``truncate_past``;
        values beyond the mask are filled with truncated-mode results when
        requested, else NaN.
        """
        n = _trace_length(traces)
        values = np.full(n, np.nan)
        mask = np.zeros(n, dtype=bool)
        for t in range(n):
            strict = self._eval(traces, t, False)
            if strict is not None:
                mask[t] = True
                values[t] = strict
            elif truncate_past:
                loose = self._eval(traces, t, True)
                values[t] = np.nan if loose is None else loose
        return values, mask


def _trace_length(traces: dict) -> int:
    lengths = {len(v) for v in traces.values()}
    if len(lengths) != 1:
        raise StateError("predicate traces must share one length")
    return lengths.pop()


@dataclass(frozen=True)
class Predicate(Formula):
    name: str

    def _eval(self, traces, t, truncate):
        try:
            trace = traces[self.name]
        except KeyError:
            raise PredicateLookupError(f"no trace for predicate {self.name!r}") from None
        return float(trace[t])


@dataclass(frozen=True)
class Not(Formula):
    child: Formula

    def _eval(self, traces, t, truncate):
        value = self.child._eval(traces, t, truncate)
        return None if value is None else -value


class _Nary(Formula):
    def __init__(self, *children: Formula):
        if not children:
            raise ValueError("connective needs at least one operand")
        self.children = children

    def _combine(self, values):
        raise NotImplementedError

    def _eval(self, traces, t, truncate):
        values = [c._eval(traces, t, truncate) for c in self.children]
        if any(v is None for v in values):
            return None
        return self._combine(values)


class And(_Nary):
    def _combine(self, values):
        return min(values)


class Or(_Nary):
    def _combine(self, values):
        return max(values)


@dataclass(frozen=True)
class Implies(Formula):
    antecedent: Formula
    consequent: Formula

    def _eval(self, traces, t, truncate):
        a = self.antecedent._eval(traces, t, truncate)
        b = self.consequent._eval(traces, t, truncate)
        if a is None or b is None:
            return None
        return max(-a, b)


@dataclass(frozen=True)
class Globally(Formula):
    """Future G over the remainder of the trace (running infimum)."""

    child: Formula

    def _eval(self, traces, t, truncate):
        n = _trace_length(traces)
        values = [self.child._eval(traces, u, truncate) for u in range(t, n)]
        if any(v is None for v in values):
            return None
        return min(values)


class Once(Formula):
    """Past O over a window [a, b] seconds before now (b >= a >= 0)."""

    def __init__(self, window: tuple, dt: float, child: Formula):
        a, b = window
        if not (0 <= a <= b):
            raise ValueError(f"bad Once window [{a}, {b}]")
        self.window = (a, b)
        self.steps = (int(round(a / dt)), int(round(b / dt)))
        self.child = child

    def _eval(self, traces, t, truncate):
        lo = t - self.steps[1]
        hi = t - self.steps[0]
        if hi < 0:
            return -ABSENT if truncate else None
        if lo < 0:
            if not truncate:
                return None
            lo = 0
        best = None
        for u in range(lo, hi + 1):
            value = self.child._eval(traces, u, truncate)
            if value is None:
                if not truncate:
                    return None
                continue  # sample unevaluable even with clipping: skip
            best = value if best is None else max(best, value)
        if best is None:
            return -ABSENT if truncate else None
        return best


@dataclass(frozen=True)
class Previous(Formula):
    child: Formula

    def _eval(self, traces, t, truncate):
        if t - 1 < 0:
            return None
        return self.child._eval(traces, t - 1, truncate)


# ---------------------------------------------------------------------------
# World view: the scenario plus an externally supplied ego track
# ---------------------------------------------------------------------------

class WorldView:
    """Scenario snapshot window with the ego track supplied separately.

    ``ego_states`` maps frame index to :class:`VehicleState`; a mapping with
    a default (e.g. a fixed template for heatmap probes) works as well.
    """

    def __init__(self, scenario: Scenario, ego_states):
        self.scenario = scenario
        self.network: LaneNetwork = scenario.lane_network
        self._ego_states = ego_states

    def ego_at(self, frame: int):
        try:
            return self._ego_states[frame]
        except KeyError:
            return None

    def other_at(self, vehicle_id: int, frame: int):
        return self.scenario.state_of(vehicle_id, frame)

    def others_at(self, frame: int):
        return self.scenario.vehicles_at(frame)

    def other_ids(self) -> list:
        return sorted(self.scenario.tracks)


def constant_ego(state: VehicleState):
    """Ego mapping that returns the same state for every frame."""

    class _Constant(dict):
        def __missing__(self, key):
            return state

    return _Constant()


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def _lon(world: WorldView, state: VehicleState) -> tuple:
    """(s_center, s_rear, s_front) along the driving direction."""
    s, _ = world.network.frenet_unchecked(state.x, state.y)
    half = state.length / 2.0
    return s, s - half, s + half


def _lat(world: WorldView, state: VehicleState) -> tuple:
    """(d_center, d_low, d_high) in frenet d."""
    _, d = world.network.frenet_unchecked(state.x, state.y)
    half = state.width / 2.0
    return d, d - half, d + half


def _v_long(world: WorldView, state: VehicleState) -> float:
    return state.vx * world.network.direction


def _lane_band(world: WorldView, lane_id: int) -> tuple:
    center = world.network.d_center(lane_id)
    half = world.network.lane(lane_id).width / 2.0
    return center - half, center + half


def _interval_overlap(lo_a, hi_a, lo_b, hi_b) -> float:
    return min(hi_a, hi_b) - max(lo_a, lo_b)


def safe_distance(v_ego: float, v_prec: float, params: RuleParams) -> float:
    """Reachability-based safe following distance (both vehicles braking)."""
    brake = abs(params.safe_distance_a_min)
    return (v_ego * params.safe_distance_delta
            + v_ego * v_ego / (2.0 * brake)
            - v_prec * v_prec / (2.0 * brake))


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------

def _pred_in_same_lane(world, ego, other, params):
    # Positive iff some lane band is laterally overlapped by both vehicles.
    _, e_lo, e_hi = _lat(world, ego)
    _, o_lo, o_hi = _lat(world, other)
    best = -math.inf
    for lane in world.network.lanes:
        b_lo, b_hi = _lane_band(world, lane.lane_id)
        margin = min(_interval_overlap(e_lo, e_hi, b_lo, b_hi),
                     _interval_overlap(o_lo, o_hi, b_lo, b_hi))
        best = max(best, margin)
    return best


def _pred_in_front_of(world, ego, other, params):
    # Other precedes ego: its rear edge beyond the ego's front edge.
    _, _, e_front = _lon(world, ego)
    _, o_rear, _ = _lon(world, other)
    return o_rear - e_front


def _pred_keeps_safe_distance_prec(world, ego, other, params):
    _, _, e_front = _lon(world, ego)
    _, o_rear, _ = _lon(world, other)
    gap = o_rear - e_front
    return gap - safe_distance(_v_long(world, ego), _v_long(world, other), params)


def _encroachment(world, state: VehicleState, lane_id: int) -> float:
    """Lateral overlap depth of a vehicle into a lane band."""
    _, lo, hi = _lat(world, state)
    b_lo, b_hi = _lane_band(world, lane_id)
    return _interval_overlap(lo, hi, b_lo, b_hi)


def _pred_cut_in(world, ego, other, prev_other, params):
    """Edge-triggered: other newly overlaps the ego's lane while ahead.

    ``prev_other`` is the other vehicle's state one step earlier; None means
    the vehicle just appeared (treated as not having overlapped before).
    """
    enc_now = _encroachment(world, other, ego.lane_id)
    if prev_other is None:
        enc_prev = -ABSENT
    else:
        enc_prev = _encroachment(world, prev_other, ego.lane_id)
    _, _, e_front = _lon(world, ego)
    _, o_rear, _ = _lon(world, other)
    lead = o_rear - e_front
    return min(enc_now, -enc_prev, lead)


def _pred_left_of(world, ego, other, params):
    # Other occupies a lane strictly left of the ego's with longitudinal
    # overlap. The lane-index margin is shifted by half a lane so the
    # discrete index difference never produces an exact-zero robustness.
    idx_e = world.network.lane(ego.lane_id).right_index
    idx_o = world.network.lane(other.lane_id).right_index
    lane_margin = (idx_o - idx_e - 0.5) * world.network.lane(ego.lane_id).width
    _, e_rear, e_front = _lon(world, ego)
    _, o_rear, o_front = _lon(world, other)
    overlap = _interval_overlap(e_rear, e_front, o_rear, o_front)
    return min(lane_margin, overlap)


def _pred_drives_faster(world, ego, other, params):
    return _v_long(world, ego) - _v_long(world, other)


def _cluster_around(world, other: VehicleState, frame: int, params: RuleParams):
    """Maximal same-lane chain around a vehicle with gaps below threshold.

    Returns (members sorted by s, max internal gap or gap to the nearest
    same-lane vehicle for singletons).
    """
    mates = [v for v in world.others_at(frame) if v.lane_id == other.lane_id]
    mates.sort(key=lambda v: _lon(world, v)[0])
    index = next(i for i, v in enumerate(mates) if v.vehicle_id == other.vehicle_id)

    def gap(rear_v, front_v):
        return _lon(world, front_v)[1] - _lon(world, rear_v)[2]

    lo = index
    while lo > 0 and gap(mates[lo - 1], mates[lo]) < params.cluster_gap:
        lo -= 1
    hi = index
    while hi + 1 < len(mates) and gap(mates[hi], mates[hi + 1]) < params.cluster_gap:
        hi += 1
    cluster = mates[lo:hi + 1]
    if len(cluster) > 1:
        worst_gap = max(gap(a, b) for a, b in zip(cluster, cluster[1:]))
    else:
        nearest = [gap(mates[i], mates[i + 1])
                   for i in (index - 1, index) if 0 <= i < len(mates) - 1]
        worst_gap = min(nearest) if nearest else 2.0 * params.cluster_gap
    return cluster, worst_gap


def _cluster_margin(world, other, frame, speed_threshold, params):
    cluster, worst_gap = _cluster_around(world, other, frame, params)
    count_margin = float(len(cluster) - params.cluster_min_count + 1)
    gap_margin = params.cluster_gap - worst_gap
    speed_margin = speed_threshold - max(_v_long(world, v) for v in cluster)
    return min(count_margin, gap_margin, speed_margin)


def _no_overtaking_zones(world) -> list:
    """(start, end) zone intervals in s; unmatched starts run to the road end."""
    signs = sorted(world.scenario.signs, key=lambda sg: sg.s)
    zones = []
    open_start = None
    for sign in signs:
        if sign.kind == "no_overtaking_start" and open_start is None:
            open_start = sign.s
        elif sign.kind == "no_overtaking_end" and open_start is not None:
            zones.append((open_start, sign.s))
            open_start = None
    if open_start is not None:
        zones.append((open_start, world.network.s_max))
    return zones


def _pred_no_overtaking_sign(world, ego, params):
    """Positive once the ego has detected or entered a no-overtaking zone.

    The constrained region starts one detection range before the sign and
    runs to the matching end sign (road end if there is none).
    """
    zones = _no_overtaking_zones(world)
    if not zones:
        return -ABSENT
    s, _, _ = _lon(world, ego)
    r = params.sign_detection_range
    return max(min(s - (start - r), end - s) for start, end in zones)


def _pred_in_rightmost_lane(world, ego, params):
    rightmost = world.network.rightmost
    d, _, _ = _lat(world, ego)
    return rightmost.width / 2.0 - abs(d - world.network.d_center(rightmost.lane_id))


_EGO_OTHER_PREDICATES = {
    "in_same_lane": _pred_in_same_lane,
    "in_front_of": _pred_in_front_of,
    "keeps_safe_distance_prec": _pred_keeps_safe_distance_prec,
    "left_of": _pred_left_of,
    "drives_faster": _pred_drives_faster,
}

_EGO_PREDICATES = {
    "no_overtaking_sign": _pred_no_overtaking_sign,
    "in_rightmost_lane": _pred_in_rightmost_lane,
}

_CLUSTER_PREDICATES = {
    "in_congestion": "congestion_speed",
    "in_slow_moving_traffic": "slow_moving_speed",
    "in_queue_of_vehicles": "queue_speed",
}


def eval_predicate(name: str, world: WorldView, other_id, t: int,
                   params: RuleParams | None = None) -> float:
    """Evaluate one named predicate at frame ``t``.

    ``other_id`` is None for ego-only predicates. Absent vehicles yield the
    ``-ABSENT`` sentinel (predicate false).
    """
    params = params or RuleParams()
    ego = world.ego_at(t)
    if ego is None:
        raise StateError(f"ego absent at frame {t}")
    if name in _EGO_PREDICATES:
        return float(_EGO_PREDICATES[name](world, ego, params))
    if name in _EGO_OTHER_PREDICATES or name == "cut_in" or name in _CLUSTER_PREDICATES:
        if other_id is None:
            raise PredicateLookupError(f"predicate {name!r} needs a second vehicle")
        other = world.other_at(other_id, t)
        if other is None:
            return -ABSENT
        if name == "cut_in":
            prev_other = world.other_at(other_id, t - 1) if t >= 1 else None
            prev_ego = world.ego_at(t - 1) if t >= 1 else None
            if t >= 1 and prev_ego is None:
                prev_other = None
            if t == 0:
                return -ABSENT  # no history: no edge can trigger
            return float(_pred_cut_in(world, ego, other, prev_other, params))
        if name in _CLUSTER_PREDICATES:
            threshold = getattr(params, _CLUSTER_PREDICATES[name])
            return float(_cluster_margin(world, other, t, threshold, params))
        return float(_EGO_OTHER_PREDICATES[name](world, ego, other, params))
    raise PredicateLookupError(f"unknown predicate {name!r}")


def predicate_names() -> tuple:
    return tuple(sorted({*_EGO_PREDICATES, *_EGO_OTHER_PREDICATES,
                         *_CLUSTER_PREDICATES, "cut_in"}))


# ---------------------------------------------------------------------------
# Rule bodies
# ---------------------------------------------------------------------------

def g1_formula(dt: float, params: RuleParams) -> Formula:
    """Safe distance to the preceding vehicle, with cut-in grace window."""
    recent_cut_in = Once((0.0, params.cutin_t_c), dt,
                         And(Predicate("cut_in"), Previous(Not(Predicate("cut_in")))))
    antecedent = And(Predicate("in_same_lane"), Predicate("in_front_of"),
                     Not(recent_cut_in))
    return Implies(antecedent, Predicate("keeps_safe_distance_prec"))


def i2_formula() -> Formula:
    """No driving faster than left traffic, unless that traffic is jammed."""
    exception = Or(Predicate("in_congestion"),
                   Predicate("in_slow_moving_traffic"),
                   Predicate("in_queue_of_vehicles"))
    return Implies(And(Predicate("left_of"), Predicate("drives_faster")), exception)


def i6_formula() -> Formula:
    """Keep to the rightmost lane while a no-overtaking sign applies."""
    return Implies(Predicate("no_overtaking_sign"), Predicate("in_rightmost_lane"))


def _vehicle_traces(rule_id: str, world: WorldView, other_id: int,
                    frames: range, params: RuleParams) -> dict:
    if rule_id == RULE_G1:
        names = ("in_same_lane", "in_front_of", "cut_in", "keeps_safe_distance_prec")
    elif rule_id == RULE_I2:
        names = ("left_of", "drives_faster", "in_congestion",
                 "in_slow_moving_traffic", "in_queue_of_vehicles")
    else:
        raise PredicateLookupError(f"rule {rule_id!r} has no per-vehicle traces")
    return {name: np.array([eval_predicate(name, world, other_id, t, params)
                            for t in frames])
            for name in names}


def _ego_traces(world: WorldView, frames: range, params: RuleParams) -> dict:
    return {name: np.array([eval_predicate(name, world, None, t, params)
                            for t in frames])
            for name in ("no_overtaking_sign", "in_rightmost_lane")}


@dataclass
class RuleSeries:
    """Per-step rule body robustness plus the strict-validity warmup mask."""

    rule_id: str
    values: np.ndarray
    valid: np.ndarray

    @property
    def verdict(self) -> float:
        """Whole-trace verdict: the running infimum (outer G)."""
        return float(np.min(self.values))


def rule_body_series(rule_id: str, scenario: Scenario, ego_states,
                     frames: range, params: RuleParams | None = None) -> RuleSeries:
    """Evaluate a rule body over a frame range.

    Universally quantified rules expand to the minimum over all vehicles
    present; an empty quantification reports the ``+ABSENT`` sentinel.
    Values at warm-up steps use the truncated-window convention and the
    mask marks them invalid under strict semantics.
    """
    params = params or RuleParams()
    world = WorldView(scenario, ego_states)
    dt = scenario.timestep
    n = len(frames)

    if rule_id == RULE_I6:
        formula = i6_formula()
        traces = _ego_traces(world, frames, params)
        values, mask = formula.evaluate_trace(traces, truncate_past=True)
        return RuleSeries(rule_id, values, mask)

    if rule_id == RULE_G1:
        formula = g1_formula(dt, params)
    elif rule_id == RULE_I2:
        formula = i2_formula()
    else:
        raise PredicateLookupError(f"unknown rule {rule_id!r}")

    values = np.full(n, ABSENT)
    mask = np.ones(n, dtype=bool)
    any_vehicle = False
    for other_id in world.other_ids():
        traces = _vehicle_traces(rule_id, world, other_id, frames, params)
        v, m = formula.evaluate_trace(traces, truncate_past=True)
        values = np.minimum(values, v)
        mask &= m
        any_vehicle = True
    if not any_vehicle:
        mask[:] = True
    return RuleSeries(rule_id, values, mask)


def rule_robustness(rule_id: str, scenario: Scenario, ego_states, t: int,
                    params: RuleParams | None = None) -> float:
    """Instantaneous rule-body robustness at one frame.

    History needed by past operators is taken from the frames up to ``t``
    (window truncated at the trace start).
    """
    params = params or RuleParams()
    if rule_id == RULE_G1:
        back = int(round(params.cutin_t_c / scenario.timestep)) + 1
        start = max(0, t - back)
    else:
        start = t
    series = rule_body_series(rule_id, scenario, ego_states,
                              range(start, t + 1), params)
    return float(series.values[-1])


# ---------------------------------------------------------------------------
# Rule book
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleBook:
    """Strict priority order over the three rules."""

    rules: tuple = RULE_PRIORITY

    def __post_init__(self):
        if tuple(self.rules) != RULE_PRIORITY:
            raise StateError("rule book must contain exactly R_G1 > R_I6 > R_I2")


@dataclass
class RuleBookVerdict:
    """Lexicographic ranking key for one trajectory."""

    series: dict                     # rule id -> RuleSeries
    signs: tuple                     # per-rule sign of the series minimum
    tiebreak: float                  # summed clipped robustness

    def sort_key(self) -> tuple:
        """Higher is better; compares lexicographically by priority."""
        return (*self.signs, self.tiebreak)


def rulebook_evaluate(scenario: Scenario, ego_states, frames: range | None = None,
                      params: RuleParams | None = None,
                      book: RuleBook | None = None) -> RuleBookVerdict:
    params = params or RuleParams()
    book = book or RuleBook()
    if frames is None:
        frames = range(scenario.n_frames)
    series = {}
    signs = []
    tiebreak = 0.0
    for rule_id in book.rules:
        s = rule_body_series(rule_id, scenario, ego_states, frames, params)
        series[rule_id] = s
        signs.append(float(np.sign(s.verdict)))
        tiebreak += float(np.sum(np.clip(s.values, -params.clip, params.clip)))
    return RuleBookVerdict(series=series, signs=tuple(signs), tiebreak=tiebreak)


def export_robustness_csv(series_by_rule: dict, timestep: float) -> str:
    """Render rule robustness traces as CSV rows (t, rule, value)."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["t", "rule", "value"])
    for rule_id in sorted(series_by_rule):
        series = series_by_rule[rule_id]
        for i, value in enumerate(series.values):
            writer.writerow([repr(i * timestep), rule_id, repr(float(value))])
    return out.getvalue()
