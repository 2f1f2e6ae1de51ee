"""``cavmarl`` command line: train, eval, replay, metrics."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from . import baselines, dumps
from .config import Config, load_config
from .env import IntersectionEnv
from .numcore import ShapeError
from .qmix import episode_seed

OUT_DIR_ENV = "CAVMARL_OUT_DIR"
DENSITIES = (150, 300)

log = logging.getLogger("cavmarl")


class CliError(Exception):
    """Reported on stderr with a nonzero exit code."""


def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be non-negative integers")
    return seeds


def positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return n


def scenario(args) -> Config:
    """Config from ``--config`` (if any) with ``--density`` applied."""
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            cfg = load_config(path)
        except (ValueError, TypeError) as exc:
            raise CliError(f"invalid config {path}: {exc}") from None
    else:
        cfg = Config()
    if args.density is not None:
        cfg.sim.density = float(args.density)
    return cfg


def output_dir(args, default: str) -> Path:
    return Path(args.out or os.environ.get(OUT_DIR_ENV) or default)


def write_json_atomic(path: Path, data) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True))
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = scenario(args)
    seeds = args.seeds or list(cfg.seeds)
    if args.steps is not None:
        cfg.qmix.total_steps = args.steps
        cfg.ppo.total_steps = args.steps
    cfg.seeds = list(seeds)
    out = output_dir(args, "runs")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    runs = {}
    for seed in seeds:
        seed_dir = out / f"seed_{seed}"
        result = baselines.train_baseline(args.algo, cfg, seed=seed, out_dir=seed_dir,
                                          progress=args.verbose)
        runs[str(seed)] = {"metrics": str(seed_dir / "metrics.csv"),
                           "checkpoints": result.checkpoints, "best": result.best,
                           "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
        final = result.records[-max(1, len(result.records) // 10):]
        print(f"seed {seed}: {len(result.records)} episodes, final-10% reward "
              f"{np.mean([r['reward'] for r in final]):.2f}, collisions "
              f"{np.mean([r['collisions'] for r in final]):.2f}")
    manifest = {
        "algorithm": args.algo,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "seeds": list(seeds),
        "runs": runs,
        "created": started,
        "version": __version__,
        "schemas": dumps.SCHEMA_VERSIONS,
    }
    for run in runs.values():
        for p in [run["metrics"], *run["checkpoints"].values()]:
            if not Path(p).is_file():
                raise CliError(f"expected artifact missing: {p}")
    write_json_atomic(out / "manifest.json", manifest)
    print(f"manifest: {out / 'manifest.json'}")
    return 0


# --------------------------------------------------------------------------
# eval


def run_greedy_episode(env: IntersectionEnv, act, h0, seed: int):
    """Greedy rollout with trajectory recording. ``act(obs, masks, h) -> (actions, h')``."""
    obs, _, masks = env.reset(seed)
    h, steps, total, done = h0, [], 0.0, False
    while not done:
        actions, h = act(obs, masks, h)
        prev_obs = obs
        obs, _, masks, reward, done, info = env.step(actions)
        steps.append({"reward": reward, "done": done, "actions": actions, "obs": prev_obs})
        total += reward
    return steps, total


def cmd_eval(args) -> int:
    cfg = scenario(args)
    env = IntersectionEnv(cfg, record=True)
    try:
        act, h0 = baselines.load_policy(args.algo, cfg, args.checkpoint, env.n_agents, env.obs_dim)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.checkpoint}") from None
    except ShapeError as exc:
        raise CliError(f"checkpoint does not match {args.algo}: {exc}") from None
    out = output_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    step_rows, episode_rows, records = [], [], []
    for k in range(args.episodes):
        seed = episode_seed(args.seed, k, stream=4)
        steps, total = run_greedy_episode(env, act, h0.copy(), seed)
        traj_path = dumps.write_trajectory(out / f"trajectory_{k}.csv", env.trajectory)
        dumps.write_collisions(dumps.collisions_path_for(traj_path), env.collision_log)
        dumps.write_episode(out / f"episode_{k}.csv", steps, env.n_agents)
        rows = dumps.as_rows(env.trajectory)
        rec = dumps.compute_metrics(rows, env.collision_log, cfg.sim.dt, episode=k, reward=total)
        records.append(rec)
        step_rows += [(k, *s) for s in dumps.step_averages(rows)]
        episode_rows.append((k, seed, total, rec.avg_speed, rec.avg_speed_cav, rec.avg_fuel,
                             rec.avg_fuel_cav, rec.fuel_total_ml, rec.collisions))
    dumps.write_csv(out / "eval_steps.csv", dumps.STEP_METRICS_HEADER, step_rows)
    dumps.write_csv(out / "eval_episodes.csv", dumps.EPISODE_METRICS_HEADER, episode_rows)
    print(format_table(records))
    return 0


def format_table(records: Sequence[dumps.MetricsRecord]) -> str:
    def mean(attr):
        vals = [getattr(r, attr) for r in records]
        vals = [v for v in vals if v is not None and not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    lines = [f"{'metric':<28}{'value':>12}",
             f"{'average speed (m/s)':<28}{mean('avg_speed'):>12.3f}",
             f"{'average speed, CAV (m/s)':<28}{mean('avg_speed_cav'):>12.3f}",
             f"{'average fuel (ml/s)':<28}{mean('avg_fuel'):>12.3f}",
             f"{'average fuel, CAV (ml/s)':<28}{mean('avg_fuel_cav'):>12.3f}",
             f"{'fuel per episode (ml)':<28}{mean('fuel_total_ml'):>12.3f}",
             f"{'collisions per episode':<28}{mean('collisions'):>12.3f}",
             f"{'reward per episode':<28}{mean('reward'):>12.3f}"]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# replay and metrics


def load_dump(path) -> List[dumps.TrajectoryRow]:
    try:
        return dumps.read_trajectory(path)
    except FileNotFoundError:
        raise CliError(f"trajectory file not found: {path}") from None
    except dumps.DumpParseError as exc:
        raise CliError(str(exc)) from None


def replay_frames(rows: Sequence[dumps.TrajectoryRow], at: Optional[float] = None, dt: float = 0.1):
    """``(t, rows)`` frames in time order; ``at`` selects the frame at that time."""
    if not rows:
        raise CliError("trajectory is empty")
    groups = dumps.group_by_time(rows)
    times = sorted(groups)
    if at is None:
        return [(t, groups[t]) for t in times]
    if at < times[0] - 1e-9 or at > times[-1] + 1e-9:
        raise CliError(f"time {at} outside the dump range [{times[0]}, {times[-1]}]")
    step = round(at / dt)
    match = [t for t in times if round(t / dt) == step]
    return [(match[0] if match else at, groups[match[0]] if match else [])]


def format_frame(t: float, rows: Sequence[dumps.TrajectoryRow]) -> str:
    lines = [f"t={t:.1f}s  vehicles={len(rows)}"]
    for r in rows:
        lines.append(f"  {r.vehicle_id:>5} {r.kind:<3} {r.route:<14} s={r.s:8.2f} v={r.v:6.2f} "
                     f"a={r.a:6.2f} fuel={r.fuel_rate:6.3f}")
    return "\n".join(lines)


def cmd_replay(args) -> int:
    rows = load_dump(args.trajectory)
    for t, frame in replay_frames(rows, args.at, args.dt):
        print(format_frame(t, frame))
    return 0


def cmd_metrics(args) -> int:
    rows = load_dump(args.trajectory)
    cpath = Path(args.collisions) if args.collisions else dumps.collisions_path_for(args.trajectory)
    collisions = dumps.read_collisions(cpath) if cpath.is_file() else []
    try:
        rec = dumps.compute_metrics(rows, collisions, args.dt)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.json:
        print(json.dumps(rec.as_dict(), sort_keys=True))
    else:
        print(format_table([rec]))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cavmarl", description="Multi-agent intersection coordination.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_flags(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--density", type=int, choices=DENSITIES, help="traffic density (veh/h/lane)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or a local dir)")

    t = sub.add_parser("train", help="train one algorithm over one or more seeds")
    t.add_argument("--algo", choices=baselines.ALGORITHMS, default="qmix")
    t.add_argument("--seeds", type=parse_seeds, help="comma-separated seeds, e.g. 1,2,3")
    t.add_argument("--steps", type=positive_int, help="environment-step budget per seed")
    t.add_argument("-v", "--verbose", action="store_true")
    scenario_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--algo", choices=baselines.ALGORITHMS, default="qmix")
    e.add_argument("--episodes", type=positive_int, default=10)
    e.add_argument("--seed", type=int, default=0)
    scenario_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("replay", help="step through a trajectory dump")
    r.add_argument("trajectory")
    r.add_argument("--at", type=float, help="show only the frame at this time (s)")
    r.add_argument("--dt", type=float, default=0.1)
    r.set_defaults(func=cmd_replay)

    m = sub.add_parser("metrics", help="speed/fuel/collision metrics of a trajectory dump")
    m.add_argument("trajectory")
    m.add_argument("--collisions", help="collision log (default: the companion file)")
    m.add_argument("--dt", type=float, default=0.1)
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cavmarl: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
