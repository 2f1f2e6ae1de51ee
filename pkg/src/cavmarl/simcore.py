"""Longitudinal micro-simulator of a four-approach, two-lane unsignalised junction.

Geometry (right-hand traffic, origin at the junction centre): each approach
carries two incoming lanes, the inner one turning left and the outer one going
straight. The junction box is the square ``|x|, |y| <= 2 * lane_width``. Routes
are built for the south approach (travelling north) and rotated by multiples
of 90 degrees for the others. A route is the 100 m approach followed by its
junction path; a vehicle leaves the simulation when it reaches the route end.

Human-driven vehicles follow IDM behind the next vehicle on their lane. The
frontmost vehicle of each lane is the automated vehicle bound to that lane's
agent slot and receives its acceleration from outside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import APPROACHES, FuelParams, IdmParams, SimConfig
from .numcore import ContractViolation

CAV = "CAV"
HDV = "HDV"


# --------------------------------------------------------------------------
# road network


@dataclass(frozen=True)
class Route:
    index: int
    road: str
    lane: str            # "inner" (left turn) or "outer" (through)
    approach_length: float
    junction_length: float
    origin: Tuple[float, float]     # local-frame lane x offset, box half-width
    radius: float                   # 0 for straight paths
    rotation: float

    @property
    def name(self) -> str:
        return f"{self.road}_{'left' if self.lane == 'inner' else 'through'}"

    @property
    def movement(self) -> str:
        return "left" if self.lane == "inner" else "through"

    @property
    def length(self) -> float:
        return self.approach_length + self.junction_length

    def _local(self, s: float) -> Tuple[float, float]:
        x0, half = self.origin
        L = self.approach_length
        if s <= L or self.radius == 0.0:
            return x0, -(half + L) + s
        if s >= self.length:
            # past a left turn: continue west along the exit lane
            return -half - (s - self.length), x0
        phi = (s - L) / self.radius
        return -half + self.radius * math.cos(phi), -half + self.radius * math.sin(phi)

    def point(self, s: float) -> Tuple[float, float]:
        x, y = self._local(s)
        c, sn = math.cos(self.rotation), math.sin(self.rotation)
        return c * x - sn * y, sn * x + c * y


@dataclass(frozen=True)
class RoadNetwork:
    routes: Tuple[Route, ...]
    half_width: float
    lane_length: float

    @property
    def extent(self) -> float:
        """Distance from the centre to the far end of an approach lane."""
        return self.half_width + self.lane_length

    def in_box(self, x: float, y: float, margin: float = 0.0) -> bool:
        h = self.half_width + margin
        return -h <= x <= h and -h <= y <= h


def build_intersection(cfg: Optional[SimConfig] = None) -> RoadNetwork:
    cfg = cfg or SimConfig()
    w = cfg.lane_width
    half = 2.0 * w
    routes = []
    for road in cfg.roads:
        rot = APPROACHES.index(road) * math.pi / 2.0
        for lane, x0 in (("inner", 0.5 * w), ("outer", 1.5 * w)):
            if lane == "inner":
                radius = half + x0
                jlen = 0.5 * math.pi * radius
            else:
                radius = 0.0
                jlen = 2.0 * half
            routes.append(Route(len(routes), road, lane, cfg.lane_length, jlen,
                                (x0, half), radius, rot))
    return RoadNetwork(tuple(routes), half, cfg.lane_length)


# --------------------------------------------------------------------------
# vehicle dynamics


def idm_accel(v: float, dv: float, s: float, p: IdmParams) -> float:
    """Raw IDM acceleration. ``dv`` is own speed minus leader speed; a free
    road is ``s = inf``. No clamping is applied here."""
    if not s > 0.0:
        raise ValueError(f"degenerate gap {s!r}: resolve the collision first")
    s_star = p.min_gap + max(0.0, v * p.time_gap + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
    interaction = 0.0 if math.isinf(s) else (s_star / s) ** 2
    return p.max_accel * (1.0 - (v / p.desired_speed) ** p.delta - interaction)


def step_kinematics(s: float, v: float, a: float, dt: float,
                    v_max: float = math.inf) -> Tuple[float, float]:
    """Constant-acceleration update; a speed limit reached inside the step
    truncates the profile (stop at 0, cruise at ``v_max``)."""
    v_raw = v + a * dt
    if v_raw < 0.0:
        return s + v * v / (2.0 * -a), 0.0
    if v_raw > v_max:
        t_hit = (v_max - v) / a
        return s + v * t_hit + 0.5 * a * t_hit * t_hit + v_max * (dt - t_hit), v_max
    return s + v * dt + 0.5 * a * dt * dt, v_raw


def fuel_rate(v: float, a: float, p: Optional[FuelParams] = None) -> float:
    """Polynomial fuel-rate surrogate in ml/s, floored at the idle rate."""
    p = p or FuelParams()
    cruise = p.c0 + p.c1 * v + p.c2 * v * v + p.c3 * v ** 3
    return max(p.f_idle, cruise + max(0.0, a) * v * (p.d0 + p.d1 * v))


# --------------------------------------------------------------------------
# state


@dataclass
class VehicleState:
    id: int
    kind: str
    route: int
    s: float
    v: float
    a: float = 0.0
    fuel_rate: float = 0.0


@dataclass
class SimState:
    t: float
    step: int
    vehicles: List[VehicleState]
    bindings: List[Optional[int]]
    collisions: List[Tuple[float, int, int]]
    fuel_total: Dict[int, float]
    next_spawn: List[float]
    next_id: int
    rng: np.random.Generator
    dt: float = 0.1
    departed: List[VehicleState] = field(default_factory=list)
    crashed: List[VehicleState] = field(default_factory=list)
    new_collisions: List[Tuple[int, int]] = field(default_factory=list)

    def vehicle(self, vid: int) -> Optional[VehicleState]:
        for veh in self.vehicles:
            if veh.id == vid:
                return veh
        return None

    def bound_vehicle(self, slot: int) -> Optional[VehicleState]:
        vid = self.bindings[slot]
        return None if vid is None else self.vehicle(vid)

    def lane_vehicles(self, route: int) -> List[VehicleState]:
        """Vehicles on ``route`` ordered front to back."""
        return sorted((v for v in self.vehicles if v.route == route), key=lambda v: -v.s)


def _headway(cfg: SimConfig, rng: np.random.Generator) -> float:
    nominal = 3600.0 / cfg.density
    return nominal * (1.0 + cfg.headway_jitter * rng.uniform(-1.0, 1.0))


def initial_state(network: RoadNetwork, cfg: SimConfig, seed) -> SimState:
    """One automated vehicle at the entrance of every lane, bound to its slot."""
    rng = np.random.default_rng(seed)
    lo, hi = cfg.init_speed_range
    vehicles, bindings, next_spawn = [], [], []
    for route in network.routes:
        v = float(rng.uniform(lo, hi))
        vehicles.append(VehicleState(route.index, CAV, route.index, 0.0, v, 0.0,
                                     fuel_rate(v, 0.0, cfg.fuel)))
        bindings.append(route.index)
        next_spawn.append(_headway(cfg, rng))
    return SimState(t=0.0, step=0, vehicles=vehicles, bindings=bindings, collisions=[],
                    fuel_total={v.id: 0.0 for v in vehicles}, next_spawn=next_spawn,
                    next_id=len(vehicles), rng=rng, dt=cfg.dt)


def spawn(state: SimState, route: int, cfg: SimConfig) -> Optional[VehicleState]:
    """Create a human-driven vehicle at the lane entrance if it is due and the
    entrance is clear; otherwise ``None`` (the spawn stays pending)."""
    if state.t + 1e-9 < state.next_spawn[route]:
        return None
    lane = state.lane_vehicles(route)
    v_cap = cfg.v_max
    if lane:
        last = lane[-1]
        gap = last.s - cfg.vehicle_length
        if gap < cfg.idm.min_gap:
            return None
        v_cap = min(v_cap, math.sqrt(last.v ** 2 + 2.0 * cfg.accel_limit * (gap - cfg.idm.min_gap)))
    lo, hi = cfg.init_speed_range
    v = min(float(state.rng.uniform(lo, hi)), v_cap)
    veh = VehicleState(state.next_id, HDV, route, 0.0, v, 0.0, fuel_rate(v, 0.0, cfg.fuel))
    state.next_id += 1
    state.next_spawn[route] += _headway(cfg, state.rng)
    return veh


# --------------------------------------------------------------------------
# collisions


def _seg_point_dist(p, a, b) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    denom = dx * dx + dy * dy
    t = 0.0 if denom == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / denom))
    return math.hypot(p[0] - ax - t * dx, p[1] - ay - t * dy)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def segment_distance(p1, p2, q1, q2) -> float:
    """Minimum Euclidean distance between segments ``p1p2`` and ``q1q2``."""
    d1, d2 = _cross(q1, q2, p1), _cross(q1, q2, p2)
    d3, d4 = _cross(p1, p2, q1), _cross(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return 0.0
    return min(_seg_point_dist(p1, q1, q2), _seg_point_dist(p2, q1, q2),
               _seg_point_dist(q1, p1, p2), _seg_point_dist(q2, p1, p2))


def footprint(veh: VehicleState, network: RoadNetwork, length: float, n: int = 5):
    """Centre line of the vehicle body as ``n`` points from head to tail."""
    route = network.routes[veh.route]
    return [route.point(veh.s - length * k / (n - 1)) for k in range(n)]


def footprint_distance(fa, fb) -> float:
    best = math.inf
    for i in range(len(fa) - 1):
        for j in range(len(fb) - 1):
            best = min(best, segment_distance(fa[i], fa[i + 1], fb[j], fb[j + 1]))
    return best


def detect_collisions(state: SimState, network: RoadNetwork,
                      cfg: Optional[SimConfig] = None) -> List[Tuple[int, int]]:
    """Unordered pairs ``(low_id, high_id)`` currently in contact.

    Same-lane pairs collide when the head-to-tail gap drops below the
    threshold; vehicles on different routes collide when their body centre
    lines come closer than the threshold inside the junction box.
    """
    cfg = cfg or SimConfig()
    thr, length = cfg.collision_distance, cfg.vehicle_length
    pairs = set()
    by_route: Dict[int, List[VehicleState]] = {}
    for veh in state.vehicles:
        by_route.setdefault(veh.route, []).append(veh)
    for lane in by_route.values():
        lane.sort(key=lambda v: -v.s)
        for lead, follow in zip(lane, lane[1:]):
            if lead.s - length - follow.s < thr:
                pairs.add((min(lead.id, follow.id), max(lead.id, follow.id)))
    near = []
    for veh in state.vehicles:
        route = network.routes[veh.route]
        if veh.s < route.approach_length - thr or veh.s - length > route.length + thr:
            continue
        fp = footprint(veh, network, length)
        if any(network.in_box(x, y, thr) for x, y in fp):
            near.append((veh, fp))
    for i in range(len(near)):
        va, fa = near[i]
        for j in range(i + 1, len(near)):
            vb, fb = near[j]
            if va.route == vb.route:
                continue
            if footprint_distance(fa, fb) < thr:
                pairs.add((min(va.id, vb.id), max(va.id, vb.id)))
    return sorted(pairs)


# --------------------------------------------------------------------------
# stepping


def _leader(veh: VehicleState, lane: Sequence[VehicleState]) -> Optional[VehicleState]:
    ahead = [o for o in lane if o.s > veh.s and o.id != veh.id]
    return min(ahead, key=lambda o: o.s) if ahead else None


def hdv_accel(veh: VehicleState, leader: Optional[VehicleState], cfg: SimConfig) -> float:
    if leader is None:
        raw = idm_accel(veh.v, 0.0, math.inf, cfg.idm)
    else:
        gap = leader.s - cfg.vehicle_length - veh.s
        raw = -cfg.accel_limit if gap <= 0 else idm_accel(veh.v, veh.v - leader.v, gap, cfg.idm)
    return max(-cfg.accel_limit, min(cfg.accel_limit, raw))


def sim_step(state: SimState, cav_accels: Dict[int, float], network: RoadNetwork,
             cfg: SimConfig) -> SimState:
    """Advance one step and return the new state (``state`` is left intact).

    ``cav_accels`` maps agent slot to commanded acceleration; every slot with
    a bound vehicle needs a command.
    """
    commanded = {}
    for slot, vid in enumerate(state.bindings):
        if vid is None:
            continue
        if slot not in cav_accels:
            raise ContractViolation(f"no acceleration command for bound agent slot {slot}")
        commanded[vid] = max(-cfg.accel_limit, min(cfg.accel_limit, float(cav_accels[slot])))

    lanes: Dict[int, List[VehicleState]] = {}
    for veh in state.vehicles:
        lanes.setdefault(veh.route, []).append(veh)

    moved, fuel_total = [], dict(state.fuel_total)
    for veh in state.vehicles:
        if veh.id in commanded:
            a = commanded[veh.id]
        else:
            a = hdv_accel(veh, _leader(veh, lanes[veh.route]), cfg)
        s_new, v_new = step_kinematics(veh.s, veh.v, a, cfg.dt, cfg.v_max)
        rate = fuel_rate(veh.v, a, cfg.fuel)
        fuel_total[veh.id] = fuel_total.get(veh.id, 0.0) + rate * cfg.dt
        moved.append(replace(veh, s=s_new, v=v_new, a=a, fuel_rate=rate))

    step = state.step + 1
    new = SimState(t=step * cfg.dt, step=step, vehicles=moved, bindings=list(state.bindings),
                   collisions=list(state.collisions), fuel_total=fuel_total,
                   next_spawn=list(state.next_spawn), next_id=state.next_id, rng=state.rng,
                   dt=cfg.dt)

    contacts = detect_collisions(new, network, cfg)
    crashed_ids = set()
    for a_id, b_id in contacts:
        new.collisions.append((new.t, a_id, b_id))
        crashed_ids.update((a_id, b_id))
    new.new_collisions = contacts

    keep = []
    for veh in new.vehicles:
        if veh.id in crashed_ids:
            new.crashed.append(veh)
        elif veh.s >= network.routes[veh.route].length:
            new.departed.append(veh)
        else:
            keep.append(veh)
    new.vehicles = keep
    alive = {v.id for v in keep}
    new.bindings = [vid if vid in alive else None for vid in new.bindings]

    for route in network.routes:
        veh = spawn(new, route.index, cfg)
        if veh is not None:
            new.vehicles.append(veh)
            new.fuel_total[veh.id] = 0.0
    rebind(new, network)
    return new


def rebind(state: SimState, network: RoadNetwork) -> None:
    """Give every empty agent slot the frontmost vehicle on its lane."""
    for slot, vid in enumerate(state.bindings):
        if vid is not None:
            continue
        lane = state.lane_vehicles(network.routes[slot].index)
        if lane:
            lane[0].kind = CAV
            state.bindings[slot] = lane[0].id


def trajectory_rows(state: SimState, network: RoadNetwork):
    """Rows ``(t, vehicle_id, kind, route, s, v, a, fuel_rate)`` for the
    vehicles currently on the road."""
    return [(state.t, v.id, v.kind, network.routes[v.route].name, v.s, v.v, v.a, v.fuel_rate)
            for v in sorted(state.vehicles, key=lambda v: v.id)]
