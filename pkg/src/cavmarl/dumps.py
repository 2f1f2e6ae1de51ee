"""CSV dumps (trajectories, collisions, episodes) and the evaluation metrics
computed from them."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .env import OBS_LAYOUT

TRAJECTORY_HEADER = ("t", "vehicle_id", "kind", "route", "s", "v", "a", "fuel_rate")
COLLISION_HEADER = ("t", "vehicle_a", "vehicle_b")
STEP_METRICS_HEADER = ("episode", "t", "vehicles", "avg_speed", "avg_speed_cav", "avg_fuel",
                       "avg_fuel_cav")
EPISODE_METRICS_HEADER = ("episode", "seed", "reward", "avg_speed", "avg_speed_cav", "avg_fuel",
                          "avg_fuel_cav", "fuel_total_ml", "collisions")
SCHEMA_VERSIONS = {"trajectory": 1, "collisions": 1, "episode": 1, "observations": 1,
                   "step_metrics": 1, "episode_metrics": 1, "metrics": 1}


def episode_header(n_agents: int) -> Tuple[str, ...]:
    return ("t", "reward", "done") + tuple(f"a_{i}" for i in range(n_agents))


def observation_header() -> Tuple[str, ...]:
    return ("t", "agent") + OBS_LAYOUT


class DumpParseError(ValueError):
    """A dump file is malformed; the message names the offending line."""


@dataclass(frozen=True)
class TrajectoryRow:
    t: float
    vehicle_id: int
    kind: str
    route: str
    s: float
    v: float
    a: float
    fuel_rate: float


# --------------------------------------------------------------------------
# writing


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


def write_trajectory(path, rows: Iterable[tuple]) -> Path:
    return write_csv(path, TRAJECTORY_HEADER, rows)


def write_collisions(path, log: Iterable[tuple]) -> Path:
    return write_csv(path, COLLISION_HEADER, log)


def write_episode(path, steps: Sequence[dict], n_agents: int) -> Tuple[Path, Path]:
    """Per-step actions/rewards plus a companion ``.obs.csv`` with one row per
    (step, agent) holding the observation the agent acted on."""
    path = Path(path)
    write_csv(path, episode_header(n_agents),
              ([k, s["reward"], int(s["done"]), *map(int, s["actions"])] for k, s in enumerate(steps)))
    obs_path = path.with_suffix(".obs.csv")
    write_csv(obs_path, observation_header(),
              ([k, i, *map(float, o)] for k, s in enumerate(steps) for i, o in enumerate(s["obs"])))
    return path, obs_path


# --------------------------------------------------------------------------
# reading


def _read(path, header: Sequence[str]) -> List[Tuple[int, List[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DumpParseError(f"{path}: line 1: empty file") from None
        if tuple(first) != tuple(header):
            raise DumpParseError(f"{path}: line 1: expected header {','.join(header)}")
        return [(reader.line_num, row) for row in reader]


def read_trajectory(path) -> List[TrajectoryRow]:
    out = []
    for line, row in _read(path, TRAJECTORY_HEADER):
        if len(row) != len(TRAJECTORY_HEADER):
            raise DumpParseError(f"{path}: line {line}: expected {len(TRAJECTORY_HEADER)} fields, got {len(row)}")
        try:
            rec = TrajectoryRow(float(row[0]), int(row[1]), row[2], row[3], float(row[4]),
                                float(row[5]), float(row[6]), float(row[7]))
        except ValueError as exc:
            raise DumpParseError(f"{path}: line {line}: {exc}") from None
        if not all(map(math.isfinite, (rec.t, rec.s, rec.v, rec.a, rec.fuel_rate))):
            raise DumpParseError(f"{path}: line {line}: non-finite value")
        out.append(rec)
    return out


def read_collisions(path) -> List[Tuple[float, int, int]]:
    out = []
    for line, row in _read(path, COLLISION_HEADER):
        try:
            out.append((float(row[0]), int(row[1]), int(row[2])))
        except (ValueError, IndexError) as exc:
            raise DumpParseError(f"{path}: line {line}: {exc}") from None
    return out


def collisions_path_for(trajectory_path) -> Path:
    p = Path(trajectory_path)
    return p.with_name(p.stem + ".collisions.csv")


# --------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    """Averages skip instants with no vehicle on the road; the ``_cav``
    columns restrict the average to agent-controlled vehicles."""

    episode: int
    avg_speed: float
    avg_speed_cav: float
    avg_fuel: float
    avg_fuel_cav: float
    fuel_total_ml: float
    collisions: int
    reward: Optional[float] = None

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)


def group_by_time(rows: Sequence[TrajectoryRow]) -> Dict[float, List[TrajectoryRow]]:
    groups: Dict[float, List[TrajectoryRow]] = {}
    for r in rows:
        groups.setdefault(r.t, []).append(r)
    return groups


def step_averages(rows: Sequence[TrajectoryRow]):
    """Per-instant ``(t, vehicles, speed, speed_cav, fuel, fuel_cav)``; CAV
    columns are NaN when no CAV is on the road."""
    out = []
    for t, grp in sorted(group_by_time(rows).items()):
        cav = [r for r in grp if r.kind == "CAV"]
        out.append((t, len(grp), float(np.mean([r.v for r in grp])),
                    float(np.mean([r.v for r in cav])) if cav else math.nan,
                    float(np.mean([r.fuel_rate for r in grp])),
                    float(np.mean([r.fuel_rate for r in cav])) if cav else math.nan))
    return out


def compute_metrics(rows: Sequence[TrajectoryRow], collisions: Sequence[tuple] = (),
                    dt: float = 0.1, episode: int = 0, reward: Optional[float] = None) -> MetricsRecord:
    """Average speed/fuel over instants with at least one vehicle on the road."""
    if not rows:
        raise ValueError("empty trajectory: metrics are undefined")
    steps = step_averages(rows)
    cav_speed = [s[3] for s in steps if not math.isnan(s[3])]
    cav_fuel = [s[5] for s in steps if not math.isnan(s[5])]
    return MetricsRecord(
        episode=episode,
        avg_speed=float(np.mean([s[2] for s in steps])),
        avg_speed_cav=float(np.mean(cav_speed)) if cav_speed else math.nan,
        avg_fuel=float(np.mean([s[4] for s in steps])),
        avg_fuel_cav=float(np.mean(cav_fuel)) if cav_fuel else math.nan,
        fuel_total_ml=float(sum(r.fuel_rate for r in rows) * dt),
        collisions=len(collisions),
        reward=reward,
    )


def as_rows(raw: Iterable[tuple]) -> List[TrajectoryRow]:
    """Convert in-memory trajectory tuples to rows with the same float
    rounding as a CSV round-trip (``repr`` is exact, so values are unchanged)."""
    return [TrajectoryRow(float(t), int(i), str(k), str(r), float(s), float(v), float(a), float(f))
            for t, i, k, r, s, v, a, f in raw]
