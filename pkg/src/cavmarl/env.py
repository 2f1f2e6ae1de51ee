"""Multi-agent environment over the junction simulator.

Agent ``i`` controls the frontmost vehicle of lane ``i``. Each agent observes
its own normalised position and speed plus a one-hot of its previous action;
the global state is the concatenation of all observations in lane order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .config import Config, RewardParams, SimConfig
from .numcore import ContractViolation
from .simcore import (RoadNetwork, SimState, build_intersection, initial_state, sim_step,
                      trajectory_rows)

N_ACTIONS = 7
HOLD = 3
DECEL_ACTIONS = (4, 5, 6)
OBS_LAYOUT = ("x", "y", "v") + tuple(f"prev_action_{k}" for k in range(N_ACTIONS))
OBS_DIM = len(OBS_LAYOUT)


def observe(sim: SimState, network: RoadNetwork, slot: int, prev_action: int,
            sim_cfg: SimConfig) -> np.ndarray:
    """Observation of one agent; an unbound slot observes all zeros."""
    obs = np.zeros(OBS_DIM)
    veh = sim.bound_vehicle(slot)
    if veh is None:
        return obs
    x, y = network.routes[veh.route].point(veh.s)
    obs[0] = x / network.extent
    obs[1] = y / network.extent
    obs[2] = veh.v / sim_cfg.v_max
    if prev_action >= 0:
        obs[3 + prev_action] = 1.0
    return obs


def legal_actions(sim: SimState, network: RoadNetwork, slot: int, cfg: Config) -> np.ndarray:
    """Boolean mask over the seven actions for one agent slot."""
    mask = np.zeros(N_ACTIONS, dtype=bool)
    veh = sim.bound_vehicle(slot)
    if veh is None:
        mask[HOLD] = True
        return mask
    ahead = [o.s for o in sim.vehicles if o.route == veh.route and o.s > veh.s]
    if ahead and min(ahead) - cfg.sim.vehicle_length - veh.s < cfg.env.mask_gap:
        mask[list(DECEL_ACTIONS)] = True
        return mask
    dt, v_max = cfg.sim.dt, cfg.sim.v_max
    for k, a in enumerate(cfg.env.accelerations):
        mask[k] = veh.v + a * dt <= v_max + 1e-9
    if not mask.any():
        mask[HOLD] = True
    return mask


def team_reward(before: SimState, after: SimState, params: RewardParams,
                v_max: float = 15.0) -> Tuple[float, float]:
    """Shared reward for the step ``before -> after``: ``(clipped, raw)``.

    Agents are the vehicles bound before the step. A vehicle that completed its
    route during the step contributes nothing; one removed after a collision
    still contributes its speed terms and takes the collision penalty once.
    """
    after_by_id = {v.id: v for v in after.vehicles}
    after_by_id.update({v.id: v for v in after.crashed})
    collided = {vid for pair in after.new_collisions for vid in pair}
    r_eff = r_ca = 0.0
    for vid in before.bindings:
        if vid is None or vid not in after_by_id:
            continue
        v = after_by_id[vid].v / v_max
        r_eff += -params.low_speed_penalty * (v < params.v_min) + params.speed_weight * v
        if vid in collided:
            r_ca -= params.collision_penalty
    raw = r_eff + r_ca
    return min(params.clip_high, max(params.clip_low, raw)), raw


@dataclass
class StepInfo:
    raw_reward: float
    collisions: int
    agent_collisions: int
    vehicles: int


class IntersectionEnv:
    """Fixed-horizon episodes (200 steps by default) over one ``SimState``."""

    def __init__(self, cfg: Optional[Config] = None, record: bool = False):
        self.cfg = cfg or Config()
        self.network = build_intersection(self.cfg.sim)
        self.n_agents = len(self.network.routes)
        self.obs_dim = OBS_DIM
        self.state_dim = OBS_DIM * self.n_agents
        self.n_actions = N_ACTIONS
        self.record = record
        self.sim: Optional[SimState] = None
        self.prev_actions = np.full(self.n_agents, -1)
        self.steps = 0
        self.trajectory: List[tuple] = []
        self.collision_log: List[Tuple[float, int, int]] = []

    @property
    def episode_limit(self) -> int:
        return self.cfg.env.episode_limit

    # -- views ---------------------------------------------------------------

    def observations(self) -> np.ndarray:
        return np.stack([observe(self.sim, self.network, i, int(self.prev_actions[i]), self.cfg.sim)
                         for i in range(self.n_agents)])

    def masks(self) -> np.ndarray:
        return np.stack([legal_actions(self.sim, self.network, i, self.cfg)
                         for i in range(self.n_agents)])

    def _views(self):
        obs = self.observations()
        self._masks = self.masks()
        return obs, obs.reshape(-1), self._masks.copy()

    # -- dynamics ------------------------------------------------------------

    def reset(self, seed) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        self.sim = initial_state(self.network, self.cfg.sim, seed)
        self.prev_actions = np.full(self.n_agents, -1)
        self.steps = 0
        self.trajectory = trajectory_rows(self.sim, self.network) if self.record else []
        self.collision_log = []
        return self._views()

    def step(self, actions) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float, bool, StepInfo]:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.shape != (self.n_agents,):
            raise ContractViolation(f"expected {self.n_agents} actions, got shape {actions.shape}")
        if self.steps >= self.episode_limit:
            raise ContractViolation("episode already finished; call reset()")
        masks = self._masks
        for i, a in enumerate(actions):
            if not (0 <= a < N_ACTIONS) or not masks[i, a]:
                raise ContractViolation(f"illegal action {a} for agent {i}")
        accels = self.cfg.env.accelerations
        commands = {i: accels[a] for i, a in enumerate(actions) if self.sim.bindings[i] is not None}
        before = self.sim
        self.sim = sim_step(before, commands, self.network, self.cfg.sim)
        reward, raw = team_reward(before, self.sim, self.cfg.env.reward, self.cfg.sim.v_max)
        self.steps += 1
        # a slot keeps its action history only while it stays bound to the same vehicle
        self.prev_actions = np.where(
            [b is not None and b == a for a, b in zip(before.bindings, self.sim.bindings)],
            actions, np.where([b is None for b in self.sim.bindings], -1, HOLD))
        if self.record:
            self.trajectory.extend(trajectory_rows(self.sim, self.network))
        self.collision_log.extend(self.sim.collisions[len(before.collisions):])
        involved = {vid for pair in self.sim.new_collisions for vid in pair}
        info = StepInfo(raw_reward=raw, collisions=len(self.sim.new_collisions),
                        agent_collisions=sum(1 for b in before.bindings if b in involved),
                        vehicles=len(self.sim.vehicles))
        done = self.steps >= self.episode_limit or (
            self.cfg.env.terminate_on_departure and self._all_departed())
        return (*self._views(), reward, bool(done), info)

    def _all_departed(self) -> bool:
        horizon = self.episode_limit * self.cfg.sim.dt
        return (not self.sim.vehicles and all(b is None for b in self.sim.bindings)
                and all(t > horizon for t in self.sim.next_spawn))


def random_legal_actions(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.choice(np.flatnonzero(m)) for m in masks])
