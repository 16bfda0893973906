"""Flat text configuration: ``[section]`` headers with ``key = value`` lines.

Every key is optional and falls back to the documented default. Unknown
sections or keys are rejected so that typos never silently change a run.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class EnvironmentConfig:
    interval: float = 0.1            # simulation step (s)
    start_min: float = 150.0         # ego start window, metres before goal
    start_max: float = 350.0
    start_speed: float = 15.0        # m/s
    min_clearance: float = 3.0       # planner clearance to other vehicles (m)
    ego_length: float = 4.5
    ego_width: float = 1.8


@dataclass
class PlannerConfig:
    horizon: float = 2.0             # planning horizon (s)
    replan_period: float = 0.5       # 2 Hz replanning
    accel_max: float = 8.0           # combined |a| limit (m/s^2)
    curvature_max: float = 0.2       # 1/m
    speed_min: float = 0.0
    speed_max: float = 50.0
    route_offset: float = 0.0        # lateral route reference (m, frenet d)
    weight_value: float = 1.0
    weight_rule_g1: float = 2.0
    weight_rule_i6: float = 1.0
    weight_rule_i2: float = 0.5
    weight_jerk: float = 0.1
    weight_speed: float = 0.2
    weight_lateral: float = 0.1


@dataclass
class RuleParams:
    safe_distance_delta: float = 0.3      # reaction time (s)
    safe_distance_a_min: float = -10.0    # emergency deceleration (m/s^2)
    cutin_t_c: float = 3.0                # recovery window after a cut-in (s)
    congestion_speed: float = 2.78        # m/s
    slow_moving_speed: float = 8.33
    queue_speed: float = 11.11
    cluster_gap: float = 20.0             # max inter-vehicle gap in a cluster (m)
    cluster_min_count: int = 3
    sign_detection_range: float = 50.0    # no-overtaking sign trigger distance (m)
    clip: float = 10.0                    # robustness clip bound for rewards/costs

    _KEYMAP = {
        "safe_distance.delta": "safe_distance_delta",
        "safe_distance.a_min": "safe_distance_a_min",
        "cutin.t_c": "cutin_t_c",
        "congestion.speed": "congestion_speed",
        "congestion.slow_speed": "slow_moving_speed",
        "congestion.queue_speed": "queue_speed",
        "congestion.gap": "cluster_gap",
        "congestion.min_count": "cluster_min_count",
        "sign_detection_range": "sign_detection_range",
        "clip": "clip",
    }


@dataclass
class ModelConfig:
    message_layers: int = 3
    hidden_width: int = 80
    embed_width: int = 80
    head_widths: tuple = (256, 128, 64)
    sensor_radius: float = 100.0     # node inclusion radius around ego (m)
    edge_radius: float = 50.0        # max 3-NN edge length (m)
    neighbors: int = 3


@dataclass
class LearningConfig:
    rollout_steps: int = 256
    gamma: float = 0.99


@dataclass
class TrainingConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-3
    epochs: int = 8
    batch_size: int = 32
    total_steps: int = 2000          # desk scale; 20000 for full scale
    reward_rule_weight: float = 10.0
    reward_progression_weight: float = 8.0
    progression_ref_speed: float = 15.0
    return_scale: float = 0.001      # target scaling applied before regression


@dataclass
class EvalConfig:
    cell_long: float = 4.0
    cell_lat: float = 1.0
    ego_speed: float = 25.0
    onset_upstream_margin: float = 100.0


@dataclass
class Config:
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    rules: RuleParams = field(default_factory=RuleParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "environment": EnvironmentConfig,
    "planner": PlannerConfig,
    "rules": RuleParams,
    "model": ModelConfig,
    "learning": LearningConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
}


def _coerce(name: str, raw: str, kind):
    try:
        if kind is int:
            value = int(raw)
        elif kind is float:
            value = float(raw)
        elif kind is tuple:
            value = tuple(int(part) for part in raw.split(","))
        else:
            value = raw
    except ValueError as exc:
        raise ConfigError(f"invalid value for {name!r}: {raw!r}") from exc
    return value


def _validate(cfg: Config) -> None:
    env, pl, ru = cfg.environment, cfg.planner, cfg.rules
    checks = [
        (env.interval > 0, "environment.interval must be > 0"),
        (env.start_min <= env.start_max, "environment start window inverted"),
        (pl.replan_period <= pl.horizon, "planner.replan_period exceeds horizon"),
        (pl.accel_max > 0 and pl.curvature_max > 0, "planner limits must be positive"),
        (pl.speed_min <= pl.speed_max, "planner speed bounds inverted"),
        (ru.safe_distance_a_min < 0, "rules safe_distance.a_min must be negative"),
        (ru.cutin_t_c >= 0, "rules cutin.t_c must be >= 0"),
        (ru.clip > 0, "rules clip must be positive"),
        (cfg.learning.gamma > 0 and cfg.learning.gamma <= 1, "learning.gamma out of range"),
        (cfg.learning.rollout_steps > 0, "learning.rollout_steps must be positive"),
        (cfg.training.batch_size > 0 and cfg.training.epochs > 0, "training batch/epochs must be positive"),
        (cfg.training.return_scale > 0, "training.return_scale must be positive"),
        (cfg.eval.cell_long > 0 and cfg.eval.cell_lat > 0, "eval cell sizes must be positive"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def load_config_text(text: str) -> Config:
    """Parse a flat config file body into a validated :class:`Config`."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    cfg = Config()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        keymap = getattr(type(target), "_KEYMAP", None)
        known = {f.name: f.type for f in fields(target)}
        for key, raw in parser.items(section):
            attr = keymap.get(key) if keymap else key
            if attr is None or attr not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            current = getattr(target, attr)
            setattr(target, attr, _coerce(f"{section}.{key}", raw, type(current)))
    _validate(cfg)
    return cfg


def load_config(path) -> Config:
    with open(path, "r", encoding="utf-8") as handle:
        return load_config_text(handle.read())


def default_config() -> Config:
    return Config()


def config_hash(text: str) -> str:
    """Stable hash of the raw config text for run manifests."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_defaults() -> str:
    """Render the full default config as a commented template."""
    out = io.StringIO()
    for section, cls in _SECTIONS.items():
        out.write(f"[{section}]\n")
        instance = cls()
        keymap = getattr(cls, "_KEYMAP", None)
        reverse = {v: k for k, v in keymap.items()} if keymap else {}
        for f in fields(cls):
            value = getattr(instance, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.write(f"{reverse.get(f.name, f.name)} = {value}\n")
        out.write("\n")
    return out.getvalue()
