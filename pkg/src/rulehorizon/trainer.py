"""On-policy training loop with the planner acting and the critic learning.

The planner selects a 2 s trajectory every 0.5 s; each executed 0.1 s step
emits one transition (graph snapshot, reward, done). Rewards combine the
phase rule's clipped robustness with a progression term. Returns are
Monte-Carlo within each episode segment, bootstrapped with the critic at
buffer truncation. The critic regresses onto scaled returns with Adam.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .errors import PlannerFailure, StateError, TrainingError
from .graph import TrafficGraph, build_graph
from .network import AdamState, ValueNetParams, optimizer_step, save_checkpoint, value_forward, value_gradient
from .planner import STEP_DT, FrenetState, plan, vehicle_distance
from .rules import RULE_G1, RULE_I2, RULE_I6, rule_robustness
from .scenario import EGO_ID, Scenario, VehicleState, _normalize_heading, resample_scenario

log = logging.getLogger(__name__)

PHASES = {"G1": RULE_G1, "I6": RULE_I6, "I2": RULE_I2}


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

def reward_rule(phase: str, scenario: Scenario, ego_states, t: int,
                rule_params, weight: float = 10.0) -> tuple:
    """Weighted clipped robustness of the phase rule at frame ``t``.

    Returns (reward, valid). During the rule's warm-up (history shorter
    than the cut-in window for the safe-distance rule) the reward is 0 and
    ``valid`` is False.
    """
    rule_id = PHASES[phase]
    if rule_id == RULE_G1:
        warmup = int(round(rule_params.cutin_t_c / scenario.timestep)) + 1
        first = min(ego_states) if ego_states else 0
        if t - first < warmup:
            return 0.0, False
    rho = rule_robustness(rule_id, scenario, ego_states, t, rule_params)
    return weight * float(np.clip(rho, -rule_params.clip, rule_params.clip)), True


def reward_progression(s0: float, s1: float, route_length: float,
                       weight: float = 8.0, v_ref: float = 15.0,
                       dt: float = 0.1) -> float:
    """Reward both the rate and the extent of advancement along the route.

    With progress fraction p = s1/L and dynamic weight w = 1 - p:
    ``weight * (w * (s1 - s0) / (v_ref * dt) + (1 - w) * p)``. The rate term
    clamps at zero for backward motion; the arclength term grows towards 1
    as the route completes.
    """
    if route_length <= 0:
        raise StateError("route length must be positive")
    p = min(max(s1 / route_length, 0.0), 1.0)
    w = 1.0 - p
    rate = max(s1 - s0, 0.0) / (v_ref * dt)
    return weight * (w * rate + (1.0 - w) * p)


# ---------------------------------------------------------------------------
# Rollout buffer
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    graph: TrafficGraph
    reward: float
    components: dict
    done: bool
    episode_id: int


@dataclass
class RolloutBuffer:
    capacity: int = 256
    param_version: int = 0
    transitions: list = field(default_factory=list)
    bootstrap_graphs: dict = field(default_factory=dict)  # segment-end index -> graph

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def full(self) -> bool:
        return len(self.transitions) >= self.capacity

    def add(self, transition: Transition) -> None:
        if self.full:
            raise StateError("rollout buffer full")
        self.transitions.append(transition)

    def segments(self) -> list:
        """(start, end, done) triples; end is exclusive."""
        out = []
        start = 0
        for i, tr in enumerate(self.transitions):
            if tr.done:
                out.append((start, i + 1, True))
                start = i + 1
            elif i + 1 < len(self.transitions) and \
                    self.transitions[i + 1].episode_id != tr.episode_id:
                out.append((start, i + 1, False))
                start = i + 1
        if start < len(self.transitions):
            out.append((start, len(self.transitions), False))
        return out


def compute_returns(buffer: RolloutBuffer, gamma: float, critic=None) -> np.ndarray:
    """Discounted return-to-go per transition.

    Terminal segments bootstrap with zero; truncated segments with the
    critic's value of the recorded next-state graph (zero if the critic or
    the graph is unavailable). The recursion G_t = r_t + gamma * G_{t+1}
    holds exactly within each segment.
    """
    n = len(buffer.transitions)
    returns = np.zeros(n)
    for start, end, done in buffer.segments():
        tail = 0.0
        if not done:
            graph = buffer.bootstrap_graphs.get(end)
            if critic is not None and graph is not None:
                tail = float(critic(graph))
        g = tail
        for i in range(end - 1, start - 1, -1):
            g = buffer.transitions[i].reward + gamma * g
            returns[i] = g
    return returns


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def explained_variance(targets, predictions) -> float:
    """1 - Var(G - V) / Var(G); NaN when the target variance vanishes."""
    targets = np.asarray(targets, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    if targets.size < 2:
        return float("nan")
    var = float(np.var(targets))
    if var == 0.0:
        return float("nan")
    return 1.0 - float(np.var(targets - predictions)) / var


def episode_reward_mean(episode_totals) -> float:
    """Average total reward over completed episodes."""
    totals = [float(np.sum(rewards)) for rewards in episode_totals]
    if not totals:
        raise StateError("need at least one completed episode")
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# Critic update
# ---------------------------------------------------------------------------

def update_critic(params: ValueNetParams, buffer: RolloutBuffer,
                  targets: np.ndarray, config: Config, opt_state: AdamState,
                  rng: np.random.Generator) -> tuple:
    """Minibatch MSE regression of V(graph) onto the scaled targets.

    Returns (params, opt_state, per-epoch mean losses). Aborts with
    :class:`TrainingError` on a non-finite loss, leaving the caller's
    previous parameters untouched.
    """
    tc = config.training
    scaled = targets * tc.return_scale
    n = len(buffer.transitions)
    epoch_losses = []
    for _ in range(tc.epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for chunk_start in range(0, n, tc.batch_size):
            batch = perm[chunk_start:chunk_start + tc.batch_size]
            if len(batch) == 0:
                continue
            grads = params.zeros_like()
            loss = 0.0
            for i in batch:
                graph = buffer.transitions[int(i)].graph
                value, cache = value_forward(graph, params, with_cache=True)
                residual = value - scaled[int(i)]
                loss += residual * residual
                g = value_gradient(graph, params, upstream=2.0 * residual / len(batch),
                                   cache=cache)
                for name in grads:
                    grads[name] += g[name]
            loss /= len(batch)
            if not math.isfinite(loss):
                raise TrainingError("non-finite loss during critic update")
            params, opt_state = optimizer_step(
                params, grads, opt_state,
                lr=tc.learning_rate, weight_decay=tc.weight_decay)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return params, opt_state, epoch_losses


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

class Episode:
    """One ego run through a scenario; owns ego state and reward bookkeeping."""

    def __init__(self, scenario: Scenario, config: Config, phase: str,
                 rng: np.random.Generator, episode_id: int,
                 scenario_index: int = 0):
        self.scenario = scenario
        self.config = config
        self.phase = phase
        self.episode_id = episode_id
        self.scenario_index = scenario_index
        network = scenario.lane_network
        self.goal_s = scenario.ego.goal_s
        # Resample the start until the spawn position is clear of traffic.
        for _ in range(20):
            back = rng.uniform(scenario.ego.start_min, scenario.ego.start_max)
            start_s = max(network.s_min + 5.0, self.goal_s - back)
            lane = network.lanes[int(rng.integers(0, len(network.lanes)))]
            start_d = network.d_center(lane.lane_id)
            probe = FrenetState(s=start_s, s_d=scenario.ego.start_speed,
                                s_dd=0.0, d=start_d, d_d=0.0, d_dd=0.0)
            spawn = self._ego_vehicle(probe)
            clearance = max(config.environment.min_clearance, 10.0)
            if all(vehicle_distance(spawn, other) >= clearance
                   for other in scenario.vehicles_at(0)):
                break
        self.frenet = FrenetState(
            s=start_s, s_d=scenario.ego.start_speed, s_dd=0.0,
            d=start_d, d_d=0.0, d_dd=0.0,
        )
        self.route_start = start_s
        self.route_length = self.goal_s - start_s
        self.t = 0
        self.ego_states = {}
        self.ego_yaw_rate = 0.0
        self.done = False
        self.reason = None
        self.rewards = []
        self._record_state()

    def _ego_vehicle(self, frenet: FrenetState, heading=None, accel=None):
        network = self.scenario.lane_network
        x, y = network.cartesian_of(frenet.s, frenet.d)
        if heading is None:
            base = network.heading
            heading = base + math.atan2(network.leftward * frenet.d_d * network.direction,
                                        max(frenet.s_d, 1e-9))
        v = math.hypot(frenet.s_d, frenet.d_d)
        a = math.hypot(frenet.s_dd, frenet.d_dd) if accel is None else accel
        lane = network.lane_at_d(frenet.d)
        return VehicleState(
            vehicle_id=EGO_ID, x=x, y=y,
            vx=v * math.cos(heading), vy=v * math.sin(heading),
            ax=a * math.cos(heading), ay=a * math.sin(heading),
            heading=_normalize_heading(heading),
            length=self.config.environment.ego_length,
            width=self.config.environment.ego_width,
            lane_id=lane.lane_id,
        )

    def _record_state(self) -> None:
        self.ego_states[self.t] = self._ego_vehicle(self.frenet)

    def current_graph(self) -> TrafficGraph:
        return build_graph(self.scenario, self.ego_states[self.t], self.t,
                           self.config.model, yaw_rate=self.ego_yaw_rate,
                           goal_s=self.goal_s)

    def plan_step(self, critic):
        return plan(
            self.frenet, self.scenario, self.t,
            self.config.planner, self.config.rules, critic=critic,
            clearance=self.config.environment.min_clearance,
            ego_length=self.config.environment.ego_length,
            ego_width=self.config.environment.ego_width,
            ego_history=self.ego_states,
        )

    def execute(self, candidate, max_steps: int) -> list:
        """Advance up to ``max_steps`` 0.1 s steps along the candidate.

        Emits one transition per executed step; stops early on termination.
        """
        tc = self.config.training
        network = self.scenario.lane_network
        macro = int(round(self.config.planner.replan_period / STEP_DT))
        steps = min(max_steps, macro, len(candidate.times) - 1)
        transitions = []
        for i in range(1, steps + 1):
            graph_before = self.current_graph()
            prev_progress = min(max(self.frenet.s - self.route_start, 0.0),
                                self.route_length)
            new_frenet = candidate.frenet_state_at(i * STEP_DT)
            self.frenet = new_frenet
            self.t += 1
            kappa = float(candidate.curvature[i])
            self.ego_yaw_rate = kappa * float(candidate.v[i])
            self.ego_states[self.t] = self._ego_vehicle(new_frenet)
            ego = self.ego_states[self.t]

            progress = min(max(new_frenet.s - self.route_start, 0.0),
                           self.route_length)
            rule_reward, valid = reward_rule(
                self.phase, self.scenario, self.ego_states, self.t,
                self.config.rules, tc.reward_rule_weight)
            prog_reward = reward_progression(
                prev_progress, progress, self.route_length,
                tc.reward_progression_weight, tc.progression_ref_speed,
                self.scenario.timestep)
            reward = rule_reward + prog_reward

            done = False
            if new_frenet.s >= self.goal_s:
                done, self.reason = True, "goal"
            elif not (network.d_min <= new_frenet.d <= network.d_max):
                done, self.reason = True, "off-road"
            elif self.t >= self.scenario.n_frames - 1:
                done, self.reason = True, "scenario-end"
            else:
                for other in self.scenario.vehicles_at(self.t):
                    if vehicle_distance(ego, other) <= 1e-9:
                        done, self.reason = True, "collision"
                        break

            self.rewards.append(reward)
            transitions.append(Transition(
                graph=graph_before, reward=reward,
                components={"rule": rule_reward, "progression": prog_reward,
                            "rule_valid": valid},
                done=done, episode_id=self.episode_id,
            ))
            if done:
                self.done = True
                break
        return transitions


# ---------------------------------------------------------------------------
# Training phase
# ---------------------------------------------------------------------------

@dataclass
class PhaseResult:
    params: ValueNetParams
    metrics: list                    # rows: dict per update round
    episodes_completed: int


def make_critic(params: ValueNetParams, config: Config, scenario: Scenario,
                goal_s: float):
    """Planner-facing critic: V for an ego probe state at a frame."""

    def critic(state, frame) -> float:
        graph = build_graph(scenario, state, frame, config.model,
                            yaw_rate=0.0, goal_s=goal_s)
        return value_forward(graph, params)

    return critic


def metrics_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["update_round", "explained_variance",
                     "episode_reward_mean", "mean_loss"])
    for row in rows:
        writer.writerow([
            row["update_round"], repr(row["explained_variance"]),
            repr(row["episode_reward_mean"]), repr(row["mean_loss"]),
        ])
    return out.getvalue()


def train_phase(phase: str, scenarios, config: Config, seed: int,
                checkpoint_path=None, metrics_path=None) -> PhaseResult:
    """Run one rule phase: rollouts, returns, critic regression, metrics.

    All randomness derives from ``seed`` through named substreams, so a
    fixed (inputs, config, seed) triple reproduces the metric log exactly.
    """
    if phase not in PHASES:
        raise StateError(f"unknown phase {phase!r}; expected one of {sorted(PHASES)}")
    if not scenarios:
        raise StateError("scenario set must not be empty")
    interval = config.environment.interval
    scenarios = [resample_scenario(s, interval) for s in scenarios]

    root = np.random.SeedSequence(seed)
    init_seq, episode_seq, update_seq = root.spawn(3)
    params = ValueNetParams.initialize(init_seq.generate_state(1)[0], config.model)
    opt_state = AdamState.for_params(params)
    episode_rng = np.random.default_rng(episode_seq)
    update_rng = np.random.default_rng(update_seq)

    scale = config.training.return_scale
    total_steps = config.training.total_steps
    rollout = config.learning.rollout_steps
    gamma = config.learning.gamma

    failures = {i: 0 for i in range(len(scenarios))}
    active = list(range(len(scenarios)))
    episode = None
    episode_id = 0
    completed_totals = []
    steps_collected = 0
    version = 0
    metrics = []

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)

    def raw_value(graph) -> float:
        return value_forward(graph, params) / scale

    while steps_collected < total_steps:
        buffer = RolloutBuffer(capacity=rollout, param_version=version)
        while not buffer.full:
            if episode is None or episode.done:
                if not active:
                    raise TrainingError("all scenarios skipped after planner failures")
                idx = active[int(episode_rng.integers(0, len(active)))]
                episode_id += 1
                episode = Episode(scenarios[idx], config, phase,
                                  episode_rng, episode_id, scenario_index=idx)
            critic = make_critic(params, config, episode.scenario, episode.goal_s)
            try:
                candidate = episode.plan_step(critic)
            except PlannerFailure:
                failures[episode.scenario_index] += 1
                log.warning("planner failure in scenario %d (count %d)",
                            episode.scenario_index, failures[episode.scenario_index])
                if failures[episode.scenario_index] >= 3 and \
                        episode.scenario_index in active and len(active) > 1:
                    active.remove(episode.scenario_index)
                    log.warning("scenario %d skipped", episode.scenario_index)
                episode.done = True
                episode.reason = "planner-failure"
                for tr in reversed(buffer.transitions):
                    if tr.episode_id == episode.episode_id:
                        tr.done = True
                        break
                # Aborted episodes do not enter the episode reward mean.
                continue
            room = buffer.capacity - len(buffer)
            for tr in episode.execute(candidate, max_steps=room):
                buffer.add(tr)
            if episode.done and episode.rewards:
                completed_totals.append(list(episode.rewards))
            if buffer.full and not (episode.done and buffer.transitions[-1].done):
                buffer.bootstrap_graphs[len(buffer)] = episode.current_graph()
        steps_collected += len(buffer)

        targets = compute_returns(buffer, gamma, critic=raw_value)
        predictions = np.array([value_forward(tr.graph, params) / scale
                                for tr in buffer.transitions])
        ev = explained_variance(targets, predictions)
        params, opt_state, losses = update_critic(
            params, buffer, targets, config, opt_state, update_rng)
        version += 1

        erm = episode_reward_mean(completed_totals) if completed_totals else float("nan")
        metrics.append({
            "update_round": version,
            "explained_variance": ev,
            "episode_reward_mean": erm,
            "mean_loss": float(np.mean(losses)),
        })
        if checkpoint_path is not None:
            save_checkpoint(params, checkpoint_path)

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8", newline="") as handle:
            handle.write(metrics_csv(metrics))
    return PhaseResult(params=params, metrics=metrics,
                       episodes_completed=len(completed_totals))
