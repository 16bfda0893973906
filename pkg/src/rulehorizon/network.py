"""Message-passing value network with hand-written reverse-mode gradients.

Three rounds of message passing (linear message transform over the source
state concatenated with edge features, elementwise max aggregation, tanh
node update), an ego embedder joining the ego node state with the extended
ego features, and a three-hidden-layer value head producing one scalar.
Everything runs in float64 so finite-difference checks at 1e-4 relative
tolerance are meaningful.

Gradient flow through the max aggregation goes to the argmax contributor
per feature dimension, first index winning ties; nodes without incoming
messages aggregate to zeros and route no gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import FormatError, StateError, TrainingError
from .graph import EDGE_DIM, EGO_DIM, NODE_DIM, TrafficGraph

CHECKPOINT_HEADER = b"RHNET 1\n"


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


@dataclass
class ValueNetParams:
    """All learnable parameter blocks, keyed by name."""

    blocks: dict
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    @classmethod
    def initialize(cls, seed: int, model: ModelConfig | None = None) -> "ValueNetParams":
        model = model or ModelConfig()
        rng = np.random.default_rng(seed)
        h = model.hidden_width
        z = model.embed_width
        blocks = {}
        for k in range(model.message_layers):
            state_dim = NODE_DIM if k == 0 else h
            blocks[f"mp{k}_edge_w"] = _glorot(rng, h, state_dim + EDGE_DIM)
            blocks[f"mp{k}_edge_b"] = np.zeros(h)
            blocks[f"mp{k}_node_w"] = _glorot(rng, h, state_dim + h)
            blocks[f"mp{k}_node_b"] = np.zeros(h)
        blocks["ego_w"] = _glorot(rng, z, h + EGO_DIM)
        blocks["ego_b"] = np.zeros(z)
        widths = (z,) + tuple(model.head_widths) + (1,)
        for i in range(len(widths) - 1):
            blocks[f"head{i}_w"] = _glorot(rng, widths[i + 1], widths[i])
            blocks[f"head{i}_b"] = np.zeros(widths[i + 1])
        return cls(blocks=blocks, model=model, seed=seed)

    @property
    def count(self) -> int:
        return sum(b.size for b in self.blocks.values())

    def zeros_like(self) -> dict:
        return {name: np.zeros_like(block) for name, block in self.blocks.items()}

    def copy(self) -> "ValueNetParams":
        return ValueNetParams(
            blocks={k: v.copy() for k, v in self.blocks.items()},
            model=self.model, seed=self.seed,
        )


def _aggregate_max(messages: np.ndarray, dst: np.ndarray, n_nodes: int, width: int):
    """Elementwise max per destination; returns (agg, argmax message index)."""
    agg = np.zeros((n_nodes, width))
    arg = np.full((n_nodes, width), -1, dtype=int)
    for m in range(len(dst)):
        node = dst[m]
        if arg[node, 0] == -1:
            agg[node] = messages[m]
            arg[node] = m
        else:
            better = messages[m] > agg[node]
            agg[node][better] = messages[m][better]
            arg[node][better] = m
    return agg, arg


def value_forward(graph: TrafficGraph, params: ValueNetParams,
                  with_cache: bool = False):
    """Scalar V(s) for one graph; optionally returns the backprop cache."""
    blocks = params.blocks
    model = params.model
    h_width = model.hidden_width
    states = graph.node_features.astype(float)
    cache = {"states": [states]} if with_cache else None

    for k in range(model.message_layers):
        We = blocks[f"mp{k}_edge_w"]
        be = blocks[f"mp{k}_edge_b"]
        Wn = blocks[f"mp{k}_node_w"]
        bn = blocks[f"mp{k}_node_b"]
        if graph.n_messages:
            msg_in = np.concatenate(
                [states[graph.message_src], graph.message_features], axis=1)
            messages = msg_in @ We.T + be
        else:
            msg_in = np.zeros((0, We.shape[1]))
            messages = np.zeros((0, h_width))
        agg, arg = _aggregate_max(messages, graph.message_dst,
                                  graph.n_nodes, h_width)
        upd_in = np.concatenate([states, agg], axis=1)
        states = np.tanh(upd_in @ Wn.T + bn)
        if with_cache:
            cache.setdefault("msg_in", []).append(msg_in)
            cache.setdefault("arg", []).append(arg)
            cache.setdefault("upd_in", []).append(upd_in)
            cache["states"].append(states)

    ego_in = np.concatenate([states[graph.ego_index], graph.ego_features])
    z = np.tanh(blocks["ego_w"] @ ego_in + blocks["ego_b"])
    head_inputs = [z]
    activation = z
    n_head = len(model.head_widths) + 1
    for i in range(n_head):
        pre = blocks[f"head{i}_w"] @ activation + blocks[f"head{i}_b"]
        activation = pre if i == n_head - 1 else np.tanh(pre)
        head_inputs.append(activation)
    value = float(activation[0])

    if not with_cache:
        return value
    cache["ego_in"] = ego_in
    cache["z"] = z
    cache["head"] = head_inputs
    return value, cache


def value_gradient(graph: TrafficGraph, params: ValueNetParams,
                   upstream: float = 1.0, cache=None) -> dict:
    """Exact gradients of ``upstream * V`` w.r.t. every parameter block."""
    if cache is None:
        _, cache = value_forward(graph, params, with_cache=True)
    blocks = params.blocks
    model = params.model
    grads = {name: np.zeros_like(block) for name, block in blocks.items()}

    n_head = len(model.head_widths) + 1
    head = cache["head"]
    delta = np.array([float(upstream)])
    for i in reversed(range(n_head)):
        if i != n_head - 1:
            delta = delta * (1.0 - head[i + 1] ** 2)
        grads[f"head{i}_w"] += np.outer(delta, head[i])
        grads[f"head{i}_b"] += delta
        delta = blocks[f"head{i}_w"].T @ delta

    z = cache["z"]
    dz_pre = delta * (1.0 - z ** 2)
    grads["ego_w"] += np.outer(dz_pre, cache["ego_in"])
    grads["ego_b"] += dz_pre
    d_ego_in = blocks["ego_w"].T @ dz_pre

    h_width = model.hidden_width
    d_states = np.zeros((graph.n_nodes, h_width))
    d_states[graph.ego_index] = d_ego_in[:h_width]

    for k in reversed(range(model.message_layers)):
        states_out = cache["states"][k + 1]
        upd_in = cache["upd_in"][k]
        msg_in = cache["msg_in"][k]
        arg = cache["arg"][k]
        state_dim = cache["states"][k].shape[1]

        d_pre = d_states * (1.0 - states_out ** 2)
        grads[f"mp{k}_node_w"] += d_pre.T @ upd_in
        grads[f"mp{k}_node_b"] += d_pre.sum(axis=0)
        d_upd_in = d_pre @ blocks[f"mp{k}_node_w"]
        d_states_prev = d_upd_in[:, :state_dim].copy()
        d_agg = d_upd_in[:, state_dim:]

        d_messages = np.zeros((len(msg_in), h_width))
        routed = arg >= 0
        if routed.any():
            nodes, dims = np.nonzero(routed)
            np.add.at(d_messages, (arg[nodes, dims], dims), d_agg[nodes, dims])
        grads[f"mp{k}_edge_w"] += d_messages.T @ msg_in
        grads[f"mp{k}_edge_b"] += d_messages.sum(axis=0)
        if len(msg_in):
            d_msg_in = d_messages @ blocks[f"mp{k}_edge_w"]
            np.add.at(d_states_prev, graph.message_src, d_msg_in[:, :state_dim])
        d_states = d_states_prev
    return grads


# ---------------------------------------------------------------------------
# Optimiser: Adam with decoupled weight decay
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ValueNetParams) -> "AdamState":
        return cls(step=0, m=params.zeros_like(), v=params.zeros_like())


def optimizer_step(params: ValueNetParams, grads: dict, state: AdamState,
                   lr: float = 5e-4, weight_decay: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> tuple:
    """One adaptive-moment update with bias correction and decoupled decay."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in block {name!r}")
    new = params.copy()
    state = AdamState(
        step=state.step + 1,
        m={k: v.copy() for k, v in state.m.items()},
        v={k: v.copy() for k, v in state.v.items()},
    )
    t = state.step
    for name, grad in grads.items():
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * new.blocks[name]
        new.blocks[name] = new.blocks[name] - lr * update
    return new, state


# ---------------------------------------------------------------------------
# Checkpoint I/O: versioned binary blocks plus a JSON sidecar
# ---------------------------------------------------------------------------

def save_checkpoint(params: ValueNetParams, path) -> None:
    """Write ``RHNET 1`` binary blocks (little-endian) and a .json sidecar."""
    path = str(path)
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_HEADER)
        names = sorted(params.blocks)
        handle.write(struct.pack("<I", len(names)))
        for name in names:
            block = np.ascontiguousarray(params.blocks[name], dtype="<f8")
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", block.ndim))
            for dim in block.shape:
                handle.write(struct.pack("<Q", dim))
            handle.write(block.tobytes(order="C"))
    sidecar = {
        "format": "RHNET 1",
        "seed": params.seed,
        "message_layers": params.model.message_layers,
        "hidden_width": params.model.hidden_width,
        "embed_width": params.model.embed_width,
        "head_widths": list(params.model.head_widths),
        "sensor_radius": params.model.sensor_radius,
        "edge_radius": params.model.edge_radius,
        "neighbors": params.model.neighbors,
        "parameter_count": params.count,
    }
    with open(path + ".json", "w", encoding="utf-8") as handle:
        json.dump(sidecar, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_checkpoint(path) -> ValueNetParams:
    path = str(path)
    with open(path, "rb") as handle:
        header = handle.read(len(CHECKPOINT_HEADER))
        if header != CHECKPOINT_HEADER:
            raise FormatError("not a checkpoint file (expected 'RHNET 1' header)")
        (n_blocks,) = struct.unpack("<I", handle.read(4))
        blocks = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<H", handle.read(2))
            name = handle.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", handle.read(1))
            shape = tuple(struct.unpack("<Q", handle.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            raw = handle.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(f"truncated checkpoint block {name!r}")
            blocks[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    try:
        with open(path + ".json", "r", encoding="utf-8") as handle:
            sidecar = json.load(handle)
        model = ModelConfig(
            message_layers=sidecar["message_layers"],
            hidden_width=sidecar["hidden_width"],
            embed_width=sidecar["embed_width"],
            head_widths=tuple(sidecar["head_widths"]),
            sensor_radius=sidecar["sensor_radius"],
            edge_radius=sidecar["edge_radius"],
            neighbors=sidecar["neighbors"],
        )
        seed = sidecar.get("seed", 0)
    except FileNotFoundError:
        model = ModelConfig()
        seed = 0
    params = ValueNetParams(blocks=blocks, model=model, seed=seed)
    _check_shapes(params)
    return params


def _check_shapes(params: ValueNetParams) -> None:
    reference = ValueNetParams.initialize(0, params.model)
    if set(reference.blocks) != set(params.blocks):
        raise StateError("parameter blocks do not match the model layout")
    for name, block in reference.blocks.items():
        if params.blocks[name].shape != block.shape:
            raise StateError(
                f"block {name!r} has shape {params.blocks[name].shape}, "
                f"expected {block.shape}"
            )
