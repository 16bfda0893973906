"""Command-line entry point.

Subcommands: ingest, synth, train, evaluate, heatmap, replay, version.
Exit codes: 0 success, 1 usage, 2 data/format error, 3 runtime failure.
A machine-readable run manifest is written beside every output set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, config_hash, default_config, dump_defaults, load_config
from .errors import (ConfigError, DataError, FormatError, GenerationError,
                     OutOfDomainError, PlannerFailure, RuleHorizonError,
                     StateError, TrainingError)
from .heatmap import emit_grid, robustness_heatmap, value_heatmap
from .network import load_checkpoint
from .rules import RULE_PRIORITY, export_robustness_csv, rule_body_series
from .scenario import (BrakeEvent, SynthSpec, from_archive,
                       generate_synthetic_scenario, insert_no_overtaking_sign,
                       load_archive, parse_tracks_csv, resample_scenario,
                       save_archive)
from .trainer import PHASES, Episode, make_critic, train_phase

_USAGE_EXIT = 1
_DATA_EXIT = 2
_RUNTIME_EXIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(_USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _seed_for(component: str, seed: int) -> int:
    """Documented per-component derivation from the single --seed flag."""
    offsets = {"scenario": 0, "sign": 1, "train": 2, "replay": 3, "evaluate": 4}
    return int(np.random.SeedSequence([seed, offsets[component]]).generate_state(1)[0])


def _write_manifest(outdir: Path, command: str, inputs: list, seeds: dict,
                    cfg_text: str, outputs: list) -> None:
    manifest = {
        "command": command,
        "inputs": [str(p) for p in inputs],
        "seeds": seeds,
        "config_sha256": config_hash(cfg_text),
        "outputs": [str(p) for p in outputs],
    }
    with open(outdir / "run_manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _load_config(args) -> tuple:
    if getattr(args, "config", None):
        path = Path(args.config)
        text = path.read_text(encoding="utf-8")
        return load_config(path), text
    return default_config(), dump_defaults()


def _outdir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_version(args) -> int:
    print(f"rulehorizon {__version__}")
    return 0


def _cmd_ingest(args) -> int:
    cfg, cfg_text = _load_config(args)
    meta = Path(args.meta).read_text(encoding="utf-8")
    tracks = Path(args.tracks).read_text(encoding="utf-8")
    scenario = parse_tracks_csv(meta, tracks)
    if args.resample:
        scenario = resample_scenario(scenario, cfg.environment.interval)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_archive(scenario, out)
    _write_manifest(out.parent, "ingest", [args.meta, args.tracks], {},
                    cfg_text, [out])
    print(f"wrote {out} ({len(scenario.tracks)} tracks, "
          f"{scenario.n_frames} frames at {scenario.timestep} s)")
    return 0


def _cmd_synth(args) -> int:
    cfg, cfg_text = _load_config(args)
    brake = None
    if args.brake_at is not None:
        brake = BrakeEvent(t_start=args.brake_at, decel=args.brake_decel,
                           duration=args.brake_duration)
    spec = SynthSpec(
        n_lanes=args.lanes, n_vehicles=args.vehicles,
        speed_min=args.speed_min, speed_max=args.speed_max,
        duration=args.duration, lane_width=args.lane_width,
        road_length=args.road_length, brake=brake,
        n_lane_changes=args.lane_changes,
    )
    scenario = generate_synthetic_scenario(spec, _seed_for("scenario", args.seed))
    if args.sign:
        scenario = insert_no_overtaking_sign(scenario, _seed_for("sign", args.seed))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_archive(scenario, out)
    _write_manifest(out.parent, "synth", [], {"seed": args.seed}, cfg_text, [out])
    signs = ", ".join(f"{s.kind}@{s.s:.1f}m" for s in scenario.signs) or "none"
    print(f"wrote {out} ({args.vehicles} vehicles, signs: {signs})")
    return 0


def _cmd_train(args) -> int:
    cfg, cfg_text = _load_config(args)
    if args.steps is not None:
        cfg.training.total_steps = args.steps
    scenarios = [load_archive(p) for p in args.scenarios]
    outdir = _outdir(args)
    checkpoint = outdir / "checkpoint.rhnet"
    metrics = outdir / "metrics.csv"
    result = train_phase(args.phase, scenarios, cfg,
                         _seed_for("train", args.seed),
                         checkpoint_path=checkpoint, metrics_path=metrics)
    _write_manifest(outdir, "train", list(args.scenarios), {"seed": args.seed},
                    cfg_text, [checkpoint, metrics])
    final = result.metrics[-1] if result.metrics else {}
    print(f"trained phase {args.phase}: {len(result.metrics)} update rounds, "
          f"{result.episodes_completed} episodes, final explained variance "
          f"{final.get('explained_variance', float('nan')):.3f}")
    return 0


def _replay_episode(scenario, cfg: Config, params, seed: int):
    """Run the planner over an archive; returns the finished Episode."""
    rng = np.random.default_rng(seed)
    scenario = resample_scenario(scenario, cfg.environment.interval)
    episode = Episode(scenario, cfg, "I6", rng, episode_id=1)
    critic = None
    if params is not None:
        critic = make_critic(params, cfg, scenario, episode.goal_s)
    macro = int(round(cfg.planner.replan_period / 0.1))
    while not episode.done:
        candidate = episode.plan_step(critic)
        episode.execute(candidate, max_steps=macro)
    return episode


def _trajectory_csv(episode) -> str:
    lines = ["frame,t,s,d,x,y,v,heading,lane_id"]
    network = episode.scenario.lane_network
    for frame in sorted(episode.ego_states):
        st = episode.ego_states[frame]
        s, d = network.frenet_unchecked(st.x, st.y)
        lines.append(f"{frame},{frame * episode.scenario.timestep!r},{s!r},{d!r},"
                     f"{st.x!r},{st.y!r},{st.speed!r},{st.heading!r},{st.lane_id}")
    return "\n".join(lines) + "\n"


def _cmd_replay(args) -> int:
    cfg, cfg_text = _load_config(args)
    scenario = load_archive(args.scenario)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else None
    episode = _replay_episode(scenario, cfg, params, _seed_for("replay", args.seed))
    outdir = _outdir(args)
    traj_path = outdir / "ego_trajectory.csv"
    traj_path.write_text(_trajectory_csv(episode), encoding="utf-8")
    frames = range(min(episode.ego_states), max(episode.ego_states) + 1)
    series = {rule: rule_body_series(rule, episode.scenario, episode.ego_states,
                                     frames, cfg.rules)
              for rule in RULE_PRIORITY}
    trace_path = outdir / "robustness_trace.csv"
    trace_path.write_text(export_robustness_csv(series, episode.scenario.timestep),
                          encoding="utf-8")
    inputs = [args.scenario] + ([args.checkpoint] if args.checkpoint else [])
    _write_manifest(outdir, "replay", inputs, {"seed": args.seed}, cfg_text,
                    [traj_path, trace_path])
    print(f"replay finished: {episode.reason} after "
          f"{max(episode.ego_states) * episode.scenario.timestep:.1f} s; "
          f"wrote {traj_path} and {trace_path}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg, cfg_text = _load_config(args)
    scenario = load_archive(args.scenario)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else None
    episode = _replay_episode(scenario, cfg, params, _seed_for("evaluate", args.seed))
    frames = range(min(episode.ego_states), max(episode.ego_states) + 1)
    report_lines = ["rule,min_robustness,violation_count"]
    for rule in RULE_PRIORITY:
        series = rule_body_series(rule, episode.scenario, episode.ego_states,
                                  frames, cfg.rules)
        violations = int(np.sum(series.values < 0.0))
        report_lines.append(f"{rule},{series.verdict!r},{violations}")
    total_reward = float(np.sum(episode.rewards))
    report_lines.append(f"episode_reward,{total_reward!r},")
    outdir = _outdir(args)
    report_path = outdir / "compliance_report.csv"
    report_path.write_text("\n".join(report_lines) + "\n", encoding="utf-8")
    inputs = [args.scenario] + ([args.checkpoint] if args.checkpoint else [])
    _write_manifest(outdir, "evaluate", inputs, {"seed": args.seed}, cfg_text,
                    [report_path])
    print("\n".join(report_lines))
    print(f"wrote {report_path}")
    return 0


def _cmd_heatmap(args) -> int:
    cfg, cfg_text = _load_config(args)
    scenario = resample_scenario(load_archive(args.scenario),
                                 cfg.environment.interval)
    if args.cell_long is not None:
        cfg.eval.cell_long = args.cell_long
    if args.cell_lat is not None:
        cfg.eval.cell_lat = args.cell_lat
    speed = args.speed if args.speed is not None else cfg.eval.ego_speed
    if args.quantity == "value":
        if not args.checkpoint:
            raise ConfigError("value heatmaps need --checkpoint")
        params = load_checkpoint(args.checkpoint)
        grid = value_heatmap(params, scenario, args.time_index, speed, cfg.eval)
        stem = "value"
    else:
        grid = robustness_heatmap(args.rule, scenario, args.time_index, speed,
                                  cfg.eval, cfg.rules)
        stem = f"robustness_{args.rule.lower()}"
    outdir = _outdir(args)
    outputs = []
    for fmt in ("csv", "svg"):
        path = outdir / f"{stem}.{fmt}"
        emit_grid(grid, path, fmt, scenario)
        outputs.append(path)
    inputs = [args.scenario] + ([args.checkpoint] if args.checkpoint else [])
    _write_manifest(outdir, "heatmap", inputs, {}, cfg_text, outputs)
    print(f"wrote {', '.join(str(p) for p in outputs)}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rulehorizon",
                     description="Traffic-rule aware planning and training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=_cmd_version)

    p = sub.add_parser("ingest", help="convert track CSVs into a scenario archive")
    p.add_argument("--meta", required=True, help="meta CSV (frame rate + lanes)")
    p.add_argument("--tracks", required=True, help="tracks CSV")
    p.add_argument("--resample", action="store_true",
                   help="resample onto the simulation interval")
    p.add_argument("--config", help="flat config file")
    p.add_argument("-o", "--output", required=True, help="archive path")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic scenario archive")
    p.add_argument("--lanes", type=int, default=3)
    p.add_argument("--vehicles", type=int, default=0)
    p.add_argument("--speed-min", type=float, default=8.0)
    p.add_argument("--speed-max", type=float, default=20.0)
    p.add_argument("--duration", type=float, default=40.0)
    p.add_argument("--lane-width", type=float, default=3.5)
    p.add_argument("--road-length", type=float, default=420.0)
    p.add_argument("--lane-changes", type=int, default=0)
    p.add_argument("--brake-at", type=float, default=None,
                   help="start time of a braking event (s)")
    p.add_argument("--brake-decel", type=float, default=2.0)
    p.add_argument("--brake-duration", type=float, default=3.0)
    p.add_argument("--sign", action="store_true",
                   help="insert a no-overtaking sign at a seeded position")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat config file")
    p.add_argument("-o", "--output", required=True, help="archive path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the value network for one rule phase")
    p.add_argument("--phase", choices=sorted(PHASES), default="I6")
    p.add_argument("--scenarios", nargs="+", required=True,
                   help="scenario archive paths")
    p.add_argument("--steps", type=int, default=None,
                   help="override training.total_steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat config file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="replay and report rule compliance")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat config file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("heatmap", help="emit value or robustness grids")
    p.add_argument("--scenario", required=True)
    p.add_argument("--quantity", choices=("value", "robustness"), required=True)
    p.add_argument("--rule", choices=RULE_PRIORITY, default="R_I6")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--speed", type=float, default=None)
    p.add_argument("--time-index", type=int, default=0)
    p.add_argument("--cell-long", type=float, default=None)
    p.add_argument("--cell-lat", type=float, default=None)
    p.add_argument("--config", help="flat config file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser("replay", help="run the planner over an archive")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="flat config file")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_replay)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, DataError, ConfigError, GenerationError,
            OutOfDomainError) as exc:
        print(f"rulehorizon: data error: {exc}", file=sys.stderr)
        return _DATA_EXIT
    except (PlannerFailure, TrainingError, StateError, RuleHorizonError) as exc:
        print(f"rulehorizon: runtime failure: {exc}", file=sys.stderr)
        return _RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
