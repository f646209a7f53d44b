"""Command-line surface: environment generation, training, evaluation,
map dumps, cost sweeps, and the invariant self-check.

Every subcommand is deterministic given a config and seed, writes only
under its output directory, and exits 0 on success, 1 on a validation
or invariant failure, and 2 on usage errors.  Report paths write CSV
plus a rendered PNG next to it.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import figures
from .config import Config, apply_overrides, load_config
from .cost_model import CostConfig, sweep_instruction_lengths, sweep_trajectory_lengths
from .errors import GridMMError
from .geometry import WorldPose
from .grid_memory import GridMemoryBank, build_grid_map, map_snapshot_dict, map_statistics
from .model import NavigationModel
from .simulator import (
    EnvironmentGraph,
    EpisodeSpec,
    PolicyAgent,
    RandomAgent,
    Vocabulary,
    World,
    build_episode_set,
    generate_environment,
    read_trace,
    run_episode,
    step_cap_for,
    write_trace,
)
from .training import evaluate_policy, train


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env_seed = os.environ.get("GRIDMM_SEED")
    if env_seed is not None:
        return int(env_seed)
    return 0


def _load_configured(args) -> Config:
    config = load_config(args.config) if args.config else Config()
    apply_overrides(config, args.set or [])
    config.seed = _resolve_seed(args)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _make_world(config: Config) -> World:
    return World(config.simulator, config.model.feature_dim, config.model.view_dim)


def _load_env_split(envs_dir: Path, split: str) -> list[EnvironmentGraph]:
    paths = sorted((envs_dir / split).glob("env_*.json"))
    if not paths:
        raise FileNotFoundError(f"no {split} environments under {envs_dir}")
    return [EnvironmentGraph.load(p) for p in paths]


def cmd_gen_env(args) -> int:
    config = _load_configured(args)
    out = _out_dir(args)
    world = _make_world(config)
    world.vocab.save(out / "vocab.json")
    config.save(out / "config.json")
    for split, count, offset in (
        ("train", args.count, 0),
        ("heldout", args.heldout, args.count),
    ):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        for i in range(count):
            env = generate_environment(config.seed * 100003 + offset + i, config.simulator, world.vocab)
            env.save(split_dir / f"env_{i:03d}.json")
    heldout = _load_env_split(out, "heldout")
    specs = build_episode_set(
        heldout, args.episodes, config.seed, config.training.min_path_hops,
        config.training.max_path_hops, 2.0 * config.simulator.success_radius,
        world.vocab, config.model.max_instruction_length,
    )
    with open(out / "heldout_episodes.jsonl", "w") as fh:
        for spec in specs:
            fh.write(
                json.dumps(
                    {
                        "schema": "gridmm-episode/1",
                        "env": f"heldout/env_{spec.env_index:03d}.json",
                        "env_index": spec.env_index,
                        "start": spec.start,
                        "destination": spec.destination,
                        "tokens": spec.instruction,
                    }
                )
                + "\n"
            )
    print(f"wrote {args.count} train + {args.heldout} heldout environments to {out}")
    return 0


def _ablation_overrides(args, config: Config) -> Config:
    if getattr(args, "no_map", False):
        config.model.use_map = False
    if getattr(args, "absolute_frame", False):
        config.model.egocentric_frame = False
    if getattr(args, "no_trajectory", False):
        config.model.use_trajectory_history = False
    if getattr(args, "average_pooling", False):
        config.model.relevance_aggregation = False
    if getattr(args, "map_scale", None):
        config.model.map_scale = args.map_scale
    return config


def cmd_train(args) -> int:
    config = _ablation_overrides(args, _load_configured(args))
    out = _out_dir(args)
    envs_dir = Path(args.envs)
    train_envs = _load_env_split(envs_dir, "train")
    heldout_envs = _load_env_split(envs_dir, "heldout")
    world = _make_world(config)

    def log(record):
        line = (
            f"epoch {record.epoch:3d} beta {record.beta:.2f} "
            f"sap {record.sap:7.3f} her {record.her:7.3f}"
        )
        if record.sr == record.sr:
            line += f" | SR {record.sr:.3f} SPL {record.spl:.3f} NE {record.ne:.2f}"
        print(line, flush=True)

    model, result = train(config, train_envs, heldout_envs, world, seed=config.seed, log=log)
    model.save(out / "checkpoint.json", meta={"best_epoch": result.best_epoch})
    history = [
        {
            "epoch": r.epoch, "beta": r.beta, "sap": r.sap, "her": r.her,
            "sr": r.sr, "spl": r.spl, "ne": r.ne,
        }
        for r in result.history
    ]
    _write_csv(
        out / "metrics.csv",
        ["epoch", "beta", "sap", "her", "sr", "spl", "ne"],
        [[r["epoch"], r["beta"], r["sap"], r["her"], r["sr"], r["spl"], r["ne"]] for r in history],
    )
    figures.render_training_history(history, out / "training.png")
    print(f"best SPL {result.best_spl:.3f} at epoch {result.best_epoch}")
    return 0


def _load_episode_specs(envs_dir: Path, limit: int | None) -> list[EpisodeSpec]:
    path = envs_dir / "heldout_episodes.jsonl"
    specs = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        specs.append(
            EpisodeSpec(
                env_index=obj["env_index"], start=obj["start"],
                destination=obj["destination"], instruction=obj["tokens"],
            )
        )
    return specs[:limit] if limit else specs


def cmd_eval(args) -> int:
    config = _ablation_overrides(args, _load_configured(args))
    out = _out_dir(args)
    envs_dir = Path(args.envs)
    heldout_envs = _load_env_split(envs_dir, "heldout")
    world = _make_world(config)
    model = NavigationModel(config.model, len(world.vocab), seed=config.seed)
    model.load(args.checkpoint)
    specs = _load_episode_specs(envs_dir, args.episodes)
    if args.random_policy:
        stats = _evaluate_random(heldout_envs, specs, world, config)
    else:
        stats = evaluate_policy(model, heldout_envs, specs, world, config, jobs=args.jobs)
    header = ["episodes", "sr", "spl", "osr", "ne", "tl"]
    row = [len(specs), stats["sr"], stats["spl"], stats["osr"], stats["ne"], stats["tl"]]
    _write_csv(out / "eval_metrics.csv", header, [row])
    print("  ".join(f"{h}={v:.4f}" if isinstance(v, float) else f"{h}={v}" for h, v in zip(header, row)))
    if args.write_traces:
        traces_dir = out / "traces"
        traces_dir.mkdir(exist_ok=True)
        for i, spec in enumerate(specs):
            env = heldout_envs[spec.env_index]
            agent = PolicyAgent(model, mode="greedy")
            cap = step_cap_for(env, spec.start, spec.destination,
                               config.training.step_cap_factor, config.training.step_cap_extra)
            trace = run_episode(agent, env, world, spec.instruction, spec.start,
                                spec.destination, cap, config.simulator.success_radius)
            trace.env_ref = f"heldout/env_{spec.env_index:03d}.json"
            write_trace(trace, traces_dir / f"episode_{i:04d}.jsonl")
        print(f"wrote {len(specs)} traces to {traces_dir}")
    return 0


def _evaluate_random(envs, specs, world, config) -> dict[str, float]:
    metrics = []
    for i, spec in enumerate(specs):
        env = envs[spec.env_index]
        agent = RandomAgent(np.random.default_rng(config.seed * 1009 + i))
        cap = step_cap_for(env, spec.start, spec.destination,
                           config.training.step_cap_factor, config.training.step_cap_extra)
        trace = run_episode(agent, env, world, spec.instruction, spec.start,
                            spec.destination, cap, config.simulator.success_radius)
        metrics.append(trace.metrics)
    return {
        "sr": float(np.mean([m.sr for m in metrics])),
        "spl": float(np.mean([m.spl for m in metrics])),
        "ne": float(np.mean([m.ne for m in metrics])),
        "tl": float(np.mean([m.tl for m in metrics])),
        "osr": float(np.mean([m.osr for m in metrics])),
    }


def cmd_dump_map(args) -> int:
    config = _load_configured(args)
    out = _out_dir(args)
    parsed = read_trace(args.trace)
    header = parsed["header"]
    steps = parsed["steps"]
    if not steps:
        print("trace contains no steps", file=sys.stderr)
        return 1
    if args.step is not None and not (1 <= args.step <= len(steps)):
        print(
            f"step {args.step} out of range; trace has steps 1..{len(steps)}",
            file=sys.stderr,
        )
        return 1
    env_path = Path(args.envs) / header["env"] if args.envs else Path(header["env"])
    env = EnvironmentGraph.load(env_path)
    world = _make_world(config)
    bank = GridMemoryBank(config.model.feature_dim)
    snapshots = []
    start = header["start"]
    anchor = WorldPose(env.positions[start][0], env.positions[start][1], 0.0)
    for record in steps:
        pano = world.observe(env, record["node"], record["heading"])
        pose = WorldPose(record["pose"][0], record["pose"][1], record["heading"])
        line = pano.element_depths * np.cos(pano.element_elevations)
        angles = pose.heading + pano.element_headings
        points = np.stack(
            [pose.x + line * np.cos(angles), pose.y + line * np.sin(angles)], axis=1
        )
        bank.store_observation(pano.element_features, points, record["step"])
        frame = pose if config.model.egocentric_frame else anchor
        cells, _ = build_grid_map(
            bank, frame, config.model.map_scale, config.model.min_side_length,
            step=record["step"],
        )
        snapshots.append(cells)
    stats = map_statistics(snapshots)
    rows = [
        {"step": s.step, "side_length_m": s.side_length, "max_cell_population": s.max_cell_population}
        for s in stats
    ]
    _write_csv(
        out / "map_stats.csv",
        ["step", "side_length_m", "max_cell_population"],
        [[r["step"], r["side_length_m"], r["max_cell_population"]] for r in rows],
    )
    figures.render_map_statistics(rows, out / "map_stats.png")
    dump_step = args.step if args.step is not None else len(steps)
    snapshot = map_snapshot_dict(snapshots[dump_step - 1])
    (out / f"map_step_{dump_step:03d}.json").write_text(json.dumps(snapshot))
    print(f"wrote map_stats.csv and map_step_{dump_step:03d}.json to {out}")
    return 0


def cmd_flops(args) -> int:
    out = _out_dir(args)
    cost = CostConfig(
        hidden=args.hidden,
        relevance_dim=args.hidden,
        feature_dim=args.feature_dim,
        instruction_length=args.instruction_length,
        trajectory_length=args.trajectory_length,
        map_token_count=args.map_tokens,
        observation_tokens=args.obs_tokens,
        candidate_count=args.candidates,
        stage_one_layers=args.stage_one_layers,
        stage_two_layers=args.stage_two_layers,
        grid_features_per_step=args.features_per_step,
    )
    header = ["trajectory_length", "instruction_length", "cached_gflops", "uncached_gflops"]
    traj_rows = sweep_trajectory_lengths(cost, list(range(1, args.trajectory_length + 1)))
    _write_csv(
        out / "flops_trajectory.csv", header,
        [[r.trajectory_length, r.instruction_length, r.cached_gflops, r.uncached_gflops]
         for r in traj_rows],
    )
    figures.render_flops_sweep(
        [r.__dict__ for r in traj_rows], "trajectory_length", out / "flops_trajectory.png"
    )
    instr_lengths = [int(v) for v in args.instruction_lengths.split(",")]
    instr_rows = sweep_instruction_lengths(cost, instr_lengths, steps=args.trajectory_length)
    _write_csv(
        out / "flops_instruction.csv", header,
        [[r.trajectory_length, r.instruction_length, r.cached_gflops, r.uncached_gflops]
         for r in instr_rows],
    )
    figures.render_flops_sweep(
        [r.__dict__ for r in instr_rows], "instruction_length", out / "flops_instruction.png"
    )
    print(f"wrote flops_trajectory.csv and flops_instruction.csv to {out}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    seed = _resolve_seed(args)
    ok, results = run_selfcheck(seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    if not ok:
        failed = ", ".join(r.name for r in results if not r.ok)
        print(f"selfcheck failed: {failed}", file=sys.stderr)
        return 1
    print(f"selfcheck passed ({len(results)} invariants)")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. model.hidden=16")
    parser.add_argument("--seed", type=int, default=None,
                        help="run seed (falls back to GRIDMM_SEED, then 0)")
    parser.add_argument("--out", default="out", help="output directory")


def _add_ablations(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--no-map", action="store_true", help="drop the grid map branch")
    parser.add_argument("--absolute-frame", action="store_true",
                        help="anchor the map at the start instead of the agent")
    parser.add_argument("--no-trajectory", action="store_true",
                        help="drop visited-waypoint history from the trajectory")
    parser.add_argument("--average-pooling", action="store_true",
                        help="replace relevance aggregation with uniform pooling")
    parser.add_argument("--map-scale", type=int, choices=[8, 14, 20], default=None,
                        help="grid map scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridmm",
        description="Grid memory mapping and cross-modal navigation on synthetic graphs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="generate train/heldout environments")
    _add_common(p)
    p.add_argument("--count", type=int, default=20, help="training environments")
    p.add_argument("--heldout", type=int, default=5, help="held-out environments")
    p.add_argument("--episodes", type=int, default=50, help="held-out episode specs")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("train", help="train a policy")
    _add_common(p)
    _add_ablations(p)
    p.add_argument("--envs", required=True, help="directory produced by gen-env")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    _add_ablations(p)
    p.add_argument("--envs", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=None, help="cap the episode count")
    p.add_argument("--jobs", type=int, default=1, help="parallel evaluation threads")
    p.add_argument("--random-policy", action="store_true",
                   help="evaluate the uniform-random baseline instead")
    p.add_argument("--write-traces", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-map", help="rebuild map snapshots from a trace")
    _add_common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--envs", default=None, help="directory containing the trace's env file")
    p.add_argument("--step", type=int, default=None, help="snapshot step (default: last)")
    p.set_defaults(func=cmd_dump_map)

    p = sub.add_parser("flops", help="analytical cost sweeps")
    _add_common(p)
    p.add_argument("--hidden", type=int, default=768)
    p.add_argument("--feature-dim", type=int, default=512)
    p.add_argument("--instruction-length", type=int, default=32)
    p.add_argument("--trajectory-length", type=int, default=15)
    p.add_argument("--map-tokens", type=int, default=196)
    p.add_argument("--obs-tokens", type=int, default=17)
    p.add_argument("--candidates", type=int, default=4)
    p.add_argument("--stage-one-layers", type=int, default=1)
    p.add_argument("--stage-two-layers", type=int, default=4)
    p.add_argument("--features-per-step", type=int, default=192)
    p.add_argument("--instruction-lengths", default="8,16,32,48,64")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("selfcheck", help="run the invariant suite")
    _add_common(p)
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except (GridMMError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
