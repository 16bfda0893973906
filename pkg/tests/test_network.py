import numpy as np
import pytest

from rulehorizon.config import ModelConfig
from rulehorizon.errors import FormatError, TrainingError
from rulehorizon.graph import EDGE_DIM, NODE_DIM, TrafficGraph
from rulehorizon.network import (AdamState, ValueNetParams, load_checkpoint,
                                 optimizer_step, save_checkpoint,
                                 value_forward, value_gradient)
from rulehorizon.scenario import EGO_ID
from support import static_scenario, straight_network, vehicle
from rulehorizon.graph import build_graph


def tiny_graph(seed=0, n_nodes=2, n_messages=2):
    """Hand-assembled graph with generic float features."""
    rng = np.random.default_rng(seed)
    node_features = rng.normal(size=(n_nodes, NODE_DIM))
    src = rng.integers(0, n_nodes, size=n_messages)
    dst = rng.integers(0, n_nodes, size=n_messages)
    order = np.lexsort((src, dst))
    return TrafficGraph(
        node_features=node_features,
        edges=tuple(zip(src[order].tolist(), dst[order].tolist())),
        message_src=src[order],
        message_dst=dst[order],
        message_features=rng.normal(size=(n_messages, EDGE_DIM)),
        ego_features=rng.normal(size=12),
        ego_index=0,
        vehicle_ids=tuple(range(-1, n_nodes - 1)),
    )


def scenario_graph(seed=0, n_vehicles=4):
    network = straight_network()
    rng = np.random.default_rng(seed)
    others = [vehicle(network, i + 1,
                      s=float(rng.uniform(80.0, 140.0)),
                      d=float(rng.uniform(network.d_min + 1, network.d_max - 1)),
                      v_long=float(rng.uniform(5.0, 25.0)))
              for i in range(n_vehicles)]
    scenario = static_scenario(network, others, n_frames=2)
    ego = vehicle(network, EGO_ID, s=100.0, d=0.0, v_long=15.0)
    return build_graph(scenario, ego, 0)


class TestForward:
    def test_zero_parameters_give_zero_value(self):
        params = ValueNetParams.initialize(0)
        for name in params.blocks:
            params.blocks[name] = np.zeros_like(params.blocks[name])
        assert value_forward(tiny_graph(), params) == 0.0
        assert value_forward(scenario_graph(), params) == 0.0

    def test_deterministic(self):
        params = ValueNetParams.initialize(1)
        graph = scenario_graph(3)
        assert value_forward(graph, params) == value_forward(graph, params)

    def test_in_edge_order_invariance(self):
        # Two messages into the same node, reversed storage order.
        params = ValueNetParams.initialize(2)
        rng = np.random.default_rng(4)
        node_features = rng.normal(size=(3, NODE_DIM))
        feats = rng.normal(size=(2, EDGE_DIM))
        ego_features = rng.normal(size=12)

        def graph_with(order):
            idx = np.array(order)
            return TrafficGraph(
                node_features=node_features,
                edges=((1, 0), (2, 0)),
                message_src=np.array([1, 2])[idx],
                message_dst=np.array([0, 0]),
                message_features=feats[idx],
                ego_features=ego_features,
                ego_index=0,
                vehicle_ids=(-1, 1, 2),
            )

        v_a = value_forward(graph_with([0, 1]), params)
        v_b = value_forward(graph_with([1, 0]), params)
        assert v_a == pytest.approx(v_b, rel=1e-15)

    def test_matches_independent_reimplementation(self):
        # Plain-loop re-computation of the full forward pass on a 2-node graph.
        params = ValueNetParams.initialize(7)
        graph = tiny_graph(seed=5, n_nodes=2, n_messages=2)
        model = params.model

        states = [graph.node_features[i].copy() for i in range(2)]
        for k in range(model.message_layers):
            We = params.blocks[f"mp{k}_edge_w"]
            be = params.blocks[f"mp{k}_edge_b"]
            Wn = params.blocks[f"mp{k}_node_w"]
            bn = params.blocks[f"mp{k}_node_b"]
            inbox = {0: [], 1: []}
            for m in range(graph.n_messages):
                source = int(graph.message_src[m])
                destination = int(graph.message_dst[m])
                stacked = np.concatenate([states[source],
                                          graph.message_features[m]])
                inbox[destination].append(We @ stacked + be)
            new_states = []
            for i in range(2):
                if inbox[i]:
                    agg = np.max(np.stack(inbox[i]), axis=0)
                else:
                    agg = np.zeros(model.hidden_width)
                new_states.append(np.tanh(Wn @ np.concatenate([states[i], agg]) + bn))
            states = new_states

        z = np.tanh(params.blocks["ego_w"]
                    @ np.concatenate([states[graph.ego_index], graph.ego_features])
                    + params.blocks["ego_b"])
        h = np.tanh(params.blocks["head0_w"] @ z + params.blocks["head0_b"])
        h = np.tanh(params.blocks["head1_w"] @ h + params.blocks["head1_b"])
        h = np.tanh(params.blocks["head2_w"] @ h + params.blocks["head2_b"])
        expected = float((params.blocks["head3_w"] @ h + params.blocks["head3_b"])[0])

        assert value_forward(graph, params) == pytest.approx(expected, rel=1e-14)


class TestGradient:
    def test_zero_upstream_zero_gradients(self):
        params = ValueNetParams.initialize(3)
        grads = value_gradient(scenario_graph(1), params, upstream=0.0)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_finite_differences_small(self):
        params = ValueNetParams.initialize(9)
        graph = scenario_graph(2)
        grads = value_gradient(graph, params, upstream=1.0)
        rng = np.random.default_rng(0)
        h = 1e-5
        for name, block in params.blocks.items():
            flat = block.ravel()
            for i in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                original = flat[i]
                flat[i] = original + h
                up = value_forward(graph, params)
                flat[i] = original - h
                down = value_forward(graph, params)
                flat[i] = original
                fd = (up - down) / (2 * h)
                analytic = grads[name].ravel()[i]
                denom = max(abs(fd), abs(analytic), 1e-10)
                assert abs(fd - analytic) / denom < 1e-4, name

    def test_upstream_scales_linearly(self):
        params = ValueNetParams.initialize(4)
        graph = scenario_graph(3)
        g1 = value_gradient(graph, params, upstream=1.0)
        g3 = value_gradient(graph, params, upstream=3.0)
        for name in g1:
            assert np.allclose(3.0 * g1[name], g3[name], rtol=1e-12)

    def test_inactive_max_path_gets_zero_gradient(self):
        # Node 1 sends two identical-destination messages; the loser of the
        # elementwise max must contribute nothing where it lost.
        params = ValueNetParams.initialize(5)
        graph = tiny_graph(seed=8, n_nodes=3, n_messages=4)
        value, cache = value_forward(graph, params, with_cache=True)
        grads = value_gradient(graph, params, upstream=1.0, cache=cache)
        # An isolated scenario: a graph with no messages at all routes no
        # gradient into any edge transform.
        lonely = TrafficGraph(
            node_features=graph.node_features[:1],
            edges=(), message_src=np.zeros(0, dtype=int),
            message_dst=np.zeros(0, dtype=int),
            message_features=np.zeros((0, EDGE_DIM)),
            ego_features=graph.ego_features, ego_index=0, vehicle_ids=(-1,),
        )
        lonely_grads = value_gradient(lonely, params, upstream=1.0)
        for k in range(params.model.message_layers):
            assert np.all(lonely_grads[f"mp{k}_edge_w"] == 0.0)
            assert np.all(lonely_grads[f"mp{k}_edge_b"] == 0.0)


class TestOptimizer:
    def test_zero_gradients_zero_decay_is_identity(self):
        params = ValueNetParams.initialize(0)
        state = AdamState.for_params(params)
        updated, _ = optimizer_step(params, params.zeros_like(), state,
                                    weight_decay=0.0)
        for name in params.blocks:
            assert np.array_equal(updated.blocks[name], params.blocks[name])

    def test_descends_on_scalar(self):
        params = ValueNetParams.initialize(0)
        params.blocks = {"p": np.array([1.0])}
        state = AdamState.for_params(params)
        updated, _ = optimizer_step(params, {"p": np.array([1.0])}, state,
                                    weight_decay=0.0)
        assert updated.blocks["p"][0] < 1.0

    def test_converges_on_quadratic(self):
        # Minimise (p - 3)^2 with analytic gradient 2 (p - 3).
        params = ValueNetParams.initialize(0)
        params.blocks = {"p": np.array([0.0])}
        state = AdamState.for_params(params)
        for _ in range(1000):
            grad = {"p": 2.0 * (params.blocks["p"] - 3.0)}
            params, state = optimizer_step(params, grad, state, lr=5e-2,
                                           weight_decay=0.0)
        assert params.blocks["p"][0] == pytest.approx(3.0, abs=1e-3)

    def test_non_finite_gradient_aborts(self):
        params = ValueNetParams.initialize(0)
        state = AdamState.for_params(params)
        grads = params.zeros_like()
        first = next(iter(grads))
        grads[first].ravel()[0] = np.nan
        with pytest.raises(TrainingError):
            optimizer_step(params, grads, state)

    def test_weight_decay_shrinks_parameters(self):
        params = ValueNetParams.initialize(0)
        params.blocks = {"p": np.array([2.0])}
        state = AdamState.for_params(params)
        updated, _ = optimizer_step(params, {"p": np.zeros(1)}, state,
                                    lr=0.1, weight_decay=0.5)
        assert updated.blocks["p"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = ValueNetParams.initialize(21, ModelConfig())
        path = tmp_path / "model.rhnet"
        save_checkpoint(params, path)
        again = load_checkpoint(path)
        assert set(again.blocks) == set(params.blocks)
        for name in params.blocks:
            assert np.array_equal(again.blocks[name], params.blocks[name])
        graph = scenario_graph(6)
        assert value_forward(graph, again) == value_forward(graph, params)

    def test_sidecar_written(self, tmp_path):
        import json
        params = ValueNetParams.initialize(2)
        path = tmp_path / "model.rhnet"
        save_checkpoint(params, path)
        sidecar = json.loads((tmp_path / "model.rhnet.json").read_text())
        assert sidecar["format"] == "RHNET 1"
        assert sidecar["parameter_count"] == params.count
        assert sidecar["head_widths"] == [256, 128, 64]

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "junk.rhnet"
        path.write_bytes(b"WRONG 9\n\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_parameter_count_reported(self):
        params = ValueNetParams.initialize(0)
        assert params.count == sum(b.size for b in params.blocks.values())
        assert params.count > 50_000
