import math

import numpy as np
import pytest

from rulehorizon.config import RuleParams
from rulehorizon.errors import InvalidTimestepError, PredicateLookupError
from rulehorizon.rules import (ABSENT, RULE_G1, RULE_I2, RULE_I6, And,
                               Globally, Implies, Not, Once, Or, Predicate,
                               Previous, RuleBook, WorldView, constant_ego,
                               eval_predicate, rule_body_series,
                               rule_robustness, rulebook_evaluate,
                               safe_distance)
from rulehorizon.scenario import EGO_ID, TrafficSign
from support import moving_scenario, static_scenario, straight_network, vehicle

PARAMS = RuleParams()


def world_with(network, vehicles, ego, n_frames=10, signs=()):
    scenario = static_scenario(network, vehicles, n_frames=n_frames, signs=signs)
    return scenario, constant_ego(ego)


class TestPredicates:
    def test_in_front_of_geometric_margin(self):
        # Other's rear exactly 12 m ahead of the ego's front.
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0, length=4.0)
        other = vehicle(network, 1, s=100.0 + 2.0 + 12.0 + 2.5, d=0.0, length=5.0)
        scenario, ego_states = world_with(network, [other], ego)
        rho = eval_predicate("in_front_of", WorldView(scenario, ego_states), 1, 0)
        assert rho == pytest.approx(12.0, abs=1e-12)

    def test_drives_faster_equality_boundary(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=22.0)
        other = vehicle(network, 1, s=140.0, d=3.5, v_long=22.0)
        scenario, ego_states = world_with(network, [other], ego)
        rho = eval_predicate("drives_faster", WorldView(scenario, ego_states), 1, 0)
        assert rho == 0.0

    def test_safe_distance_boundary_is_zero(self):
        network = straight_network()
        v_e, v_p = 20.0, 15.0
        gap = safe_distance(v_e, v_p, PARAMS)
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=v_e, length=4.0)
        other = vehicle(network, 1, s=100.0 + 2.0 + gap + 2.5, d=0.0,
                        v_long=v_p, length=5.0)
        scenario, ego_states = world_with(network, [other], ego)
        rho = eval_predicate("keeps_safe_distance_prec",
                             WorldView(scenario, ego_states), 1, 0)
        assert rho == pytest.approx(0.0, abs=1e-9)

    def test_absent_vehicle_gives_sentinel(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0)
        scenario, ego_states = world_with(network, [], ego)
        rho = eval_predicate("in_front_of", WorldView(scenario, ego_states), 77, 0)
        assert rho == -ABSENT

    def test_unknown_predicate_raises(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0)
        scenario, ego_states = world_with(network, [], ego)
        with pytest.raises(PredicateLookupError):
            eval_predicate("flies_over", WorldView(scenario, ego_states), None, 0)

    def test_left_of_requires_overlap_and_left_lane(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0)
        beside_left = vehicle(network, 1, s=101.0, d=3.5)
        ahead_left = vehicle(network, 2, s=200.0, d=3.5)
        right = vehicle(network, 3, s=101.0, d=0.0)
        scenario, ego_states = world_with(network, [beside_left, ahead_left, right], ego)
        world = WorldView(scenario, ego_states)
        assert eval_predicate("left_of", world, 1, 0) > 0
        assert eval_predicate("left_of", world, 2, 0) <= 0   # no overlap
        assert eval_predicate("left_of", world, 3, 0) <= 0   # same lane

    def test_cut_in_edge_trigger(self):
        network = straight_network()
        # Vehicle 1 drifts from the left lane into the ego lane over frames.
        start = vehicle(network, 1, s=115.0, d=3.5, v_long=15.0)
        scenario = moving_scenario(
            network, [start], n_frames=20,
            lateral_moves={1: (5, -0.35, 10)})
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=15.0)
        world = WorldView(scenario, constant_ego(ego))
        values = [eval_predicate("cut_in", world, 1, t) for t in range(20)]
        assert values[0] == -ABSENT
        assert all(v <= 0 for v in values[:6])       # still fully left
        crossing = [t for t, v in enumerate(values) if v > 0]
        assert len(crossing) == 1                     # edge fires exactly once

    def test_congestion_cluster_margins(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=10.0, d=0.0)
        slow = [vehicle(network, i + 1, s=100.0 + i * 15.0, d=3.5, v_long=2.0)
                for i in range(3)]
        scenario, ego_states = world_with(network, slow, ego)
        world = WorldView(scenario, ego_states)
        assert eval_predicate("in_congestion", world, 1, 0) > 0
        assert eval_predicate("in_queue_of_vehicles", world, 1, 0) > 0
        # Two vehicles only: below the minimum cluster size.
        scenario2, ego_states2 = world_with(network, slow[:2], ego)
        world2 = WorldView(scenario2, ego_states2)
        assert eval_predicate("in_congestion", world2, 1, 0) <= 0

    def test_no_overtaking_sign_detection_range(self):
        network = straight_network()
        sign = TrafficSign(kind="no_overtaking_start", s=300.0)
        for s, expected_positive in [(200.0, False), (251.0, True),
                                     (300.0, True), (350.0, True)]:
            ego = vehicle(network, EGO_ID, s=s, d=0.0)
            scenario, ego_states = world_with(network, [], ego, signs=[sign])
            rho = eval_predicate("no_overtaking_sign",
                                 WorldView(scenario, ego_states), None, 0)
            assert (rho > 0) == expected_positive, s

    def test_in_rightmost_lane_margin(self):
        network = straight_network(lane_width=3.5)
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0)
        scenario, ego_states = world_with(network, [], ego)
        rho = eval_predicate("in_rightmost_lane",
                             WorldView(scenario, ego_states), None, 0)
        assert rho == pytest.approx(1.75)


class TestEngine:
    def traces(self, **kwargs):
        return {k: np.asarray(v, dtype=float) for k, v in kwargs.items()}

    def test_and_is_min(self):
        tr = self.traces(a=[3.0], b=[-1.0])
        assert And(Predicate("a"), Predicate("b")).robustness(tr, 0) == -1.0

    def test_implies_vacuous(self):
        tr = self.traces(a=[-2.0], b=[-5.0])
        assert Implies(Predicate("a"), Predicate("b")).robustness(tr, 0) == 2.0

    def test_once_brute_force_sup(self):
        # Once over the past 2 s on a 0.1 s grid: window of 21 samples.
        values = [-1.0] * 18 + [-1.0, 4.0, -1.0]
        tr = self.traces(a=values)
        formula = Once((0.0, 2.0), 0.1, Predicate("a"))
        t = len(values) - 1
        assert formula.robustness(tr, t, truncate_past=True) == 4.0

    def test_previous_shifts(self):
        tr = self.traces(a=[1.0, 2.0, 3.0])
        assert Previous(Predicate("a")).robustness(tr, 2) == 2.0
        with pytest.raises(InvalidTimestepError):
            Previous(Predicate("a")).robustness(tr, 0)

    def test_globally_running_inf(self):
        tr = self.traces(a=[5.0, -2.0, 3.0])
        assert Globally(Predicate("a")).robustness(tr, 0) == -2.0
        assert Globally(Predicate("a")).robustness(tr, 2) == 3.0

    def test_strict_mask_vs_truncated_values(self):
        tr = self.traces(a=[1.0, 2.0, 3.0, 4.0])
        formula = Once((0.0, 0.2), 0.1, Predicate("a"))
        values, mask = formula.evaluate_trace(tr, truncate_past=True)
        assert list(mask) == [False, False, True, True]
        assert list(values) == [1.0, 2.0, 3.0, 4.0]


class TestRuleBodies:
    def test_i6_positive_margin_inside_zone_rightmost(self):
        network = straight_network()
        sign = TrafficSign(kind="no_overtaking_start", s=150.0)
        ego = vehicle(network, EGO_ID, s=200.0, d=0.0)
        scenario, ego_states = world_with(network, [], ego, signs=[sign])
        rho = rule_robustness(RULE_I6, scenario, ego_states, 0, PARAMS)
        assert rho == pytest.approx(1.75)   # margin to the lane boundary

    def test_i6_vacuous_without_sign(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=200.0, d=3.5)
        scenario, ego_states = world_with(network, [], ego)
        assert rule_robustness(RULE_I6, scenario, ego_states, 0, PARAMS) > 0

    def test_i6_negative_in_left_lane_inside_zone(self):
        network = straight_network()
        sign = TrafficSign(kind="no_overtaking_start", s=150.0)
        ego = vehicle(network, EGO_ID, s=200.0, d=3.5)
        scenario, ego_states = world_with(network, [], ego, signs=[sign])
        assert rule_robustness(RULE_I6, scenario, ego_states, 0, PARAMS) < 0

    def test_i2_empty_left_lanes_vacuous(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=25.0)
        scenario, ego_states = world_with(network, [], ego)
        rho = rule_robustness(RULE_I2, scenario, ego_states, 0, PARAMS)
        assert rho == ABSENT

    def test_i6_independent_of_other_tracks(self):
        network = straight_network()
        sign = TrafficSign(kind="no_overtaking_start", s=150.0)
        ego = vehicle(network, EGO_ID, s=180.0, d=3.5)
        others = [vehicle(network, i + 1, s=50.0 + 30 * i, d=0.0) for i in range(4)]
        full, ego_states = world_with(network, others, ego, signs=[sign])
        empty, _ = world_with(network, [], ego, signs=[sign])
        series_full = rule_body_series(RULE_I6, full, ego_states, range(10), PARAMS)
        series_empty = rule_body_series(RULE_I6, empty, ego_states, range(10), PARAMS)
        assert np.array_equal(series_full.values, series_empty.values)

    def test_g1_monotone_in_gap(self):
        network = straight_network()
        previous = -math.inf
        for gap in (5.0, 10.0, 20.0, 40.0, 80.0):
            ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=20.0, length=4.0)
            other = vehicle(network, 1, s=102.0 + gap + 2.5, d=0.0,
                            v_long=15.0, length=5.0)
            scenario, ego_states = world_with(network, [other], ego)
            rho = rule_robustness(RULE_G1, scenario, ego_states, 5, PARAMS)
            assert rho >= previous
            previous = rho

    def test_g1_and_i2_vacuous_without_traffic(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=30.0)
        scenario, ego_states = world_with(network, [], ego)
        for t in range(5):
            assert rule_robustness(RULE_G1, scenario, ego_states, t, PARAMS) >= 0
            assert rule_robustness(RULE_I2, scenario, ego_states, t, PARAMS) >= 0

    def test_g1_warmup_mask(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0)
        other = vehicle(network, 1, s=150.0, d=0.0)
        scenario, ego_states = world_with(network, [other], ego, n_frames=50)
        series = rule_body_series(RULE_G1, scenario, ego_states, range(50), PARAMS)
        warmup = int(round(PARAMS.cutin_t_c / scenario.timestep)) + 1
        assert not series.valid[:warmup].any()
        assert series.valid[warmup:].all()
        assert np.isfinite(series.values).all()


class TestRuleBook:
    def _trajectory_with_violation(self, rule_id):
        """Scenario + ego track violating exactly one rule."""
        network = straight_network()
        signs = []
        others = []
        if rule_id == RULE_I6:
            signs = [TrafficSign(kind="no_overtaking_start", s=100.0)]
            ego = vehicle(network, EGO_ID, s=150.0, d=3.5, v_long=10.0)
        elif rule_id == RULE_G1:
            ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=20.0, length=4.0)
            others = [vehicle(network, 1, s=105.0, d=0.0, v_long=10.0, length=4.0)]
        elif rule_id == RULE_I2:
            ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=25.0)
            others = [vehicle(network, 1, s=101.0, d=3.5, v_long=15.0)]
        else:
            ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=10.0)
        scenario = static_scenario(network, others, n_frames=10, signs=signs)
        return scenario, constant_ego(ego)

    def _compliant_trajectory(self):
        network = straight_network()
        ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=10.0)
        return static_scenario(network, [], n_frames=10), constant_ego(ego)

    def test_single_rule_violations_are_isolated(self):
        for rule_id in (RULE_G1, RULE_I6, RULE_I2):
            scenario, ego_states = self._trajectory_with_violation(rule_id)
            verdict = rulebook_evaluate(scenario, ego_states, range(10), PARAMS)
            for other_rule, series in verdict.series.items():
                if other_rule == rule_id:
                    assert series.verdict < 0, other_rule
                else:
                    assert series.verdict > 0, other_rule

    def test_priority_ordering_all_pairs(self):
        priority = {RULE_G1: 3, RULE_I6: 2, RULE_I2: 1}
        for high in priority:
            for low in priority:
                if priority[high] <= priority[low]:
                    continue
                sc_high, ego_high = self._trajectory_with_violation(high)
                sc_low, ego_low = self._trajectory_with_violation(low)
                v_high = rulebook_evaluate(sc_high, ego_high, range(10), PARAMS)
                v_low = rulebook_evaluate(sc_low, ego_low, range(10), PARAMS)
                # Violating the lower-priority rule must rank strictly better.
                assert v_low.sort_key() > v_high.sort_key(), (high, low)

    def test_compliant_beats_all_violating(self):
        sc_good, ego_good = self._compliant_trajectory()
        v_good = rulebook_evaluate(sc_good, ego_good, range(10), PARAMS)
        for rule_id in (RULE_G1, RULE_I6, RULE_I2):
            sc_bad, ego_bad = self._trajectory_with_violation(rule_id)
            v_bad = rulebook_evaluate(sc_bad, ego_bad, range(10), PARAMS)
            assert v_good.sort_key() > v_bad.sort_key()

    def test_tiebreak_by_summed_clipped_robustness(self):
        network = straight_network()
        # Both compliant inside a no-overtaking zone; the centred trajectory
        # keeps a larger rightmost-lane margin, so its clipped sum is larger.
        sign = TrafficSign(kind="no_overtaking_start", s=100.0)
        ego_center = vehicle(network, EGO_ID, s=150.0, d=0.0, v_long=10.0)
        ego_offset = vehicle(network, EGO_ID, s=150.0, d=0.9, v_long=10.0)
        scenario = static_scenario(network, [], n_frames=10, signs=[sign])
        v_center = rulebook_evaluate(scenario, constant_ego(ego_center), range(10), PARAMS)
        v_offset = rulebook_evaluate(scenario, constant_ego(ego_offset), range(10), PARAMS)
        assert v_center.signs == v_offset.signs
        assert v_center.sort_key() > v_offset.sort_key()

    def test_rulebook_requires_exact_rules(self):
        from rulehorizon.errors import StateError
        with pytest.raises(StateError):
            RuleBook(rules=(RULE_I6, RULE_G1, RULE_I2))
