from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavmarl.config import Config, RewardParams, SimConfig
from cavmarl.env import (DECEL_ACTIONS, HOLD, N_ACTIONS, OBS_DIM, IntersectionEnv, legal_actions,
                         observe, random_legal_actions, team_reward)
from cavmarl.numcore import ContractViolation
from cavmarl.simcore import CAV, HDV, RoadNetwork, Route, SimState, VehicleState, build_intersection

PARAMS = RewardParams()


def make_state(vehicles, bindings, n=8, collisions=(), crashed=()):
    st_ = SimState(t=0.0, step=0, vehicles=list(vehicles), bindings=list(bindings), collisions=[],
                   fuel_total={v.id: 0.0 for v in vehicles}, next_spawn=[math.inf] * n, next_id=100,
                   rng=np.random.default_rng(0))
    st_.new_collisions = list(collisions)
    st_.crashed = list(crashed)
    return st_


def cavs(speeds, s=20.0):
    return [VehicleState(i, CAV, i, s, v) for i, v in enumerate(speeds)]


# -- reward -------------------------------------------------------------------


def test_reward_all_at_top_speed():
    before = make_state(cavs([15.0] * 8), range(8))
    after = make_state(cavs([15.0] * 8, s=21.5), range(8))
    assert team_reward(before, after, PARAMS) == (8.0, 8.0)


def test_reward_all_stopped():
    st_ = make_state(cavs([0.0] * 8), range(8))
    assert team_reward(st_, st_, PARAMS) == (-4.0, -4.0)


def test_reward_collision_clipped():
    before = make_state(cavs([0.0] * 8), range(8))
    crashed = [v for v in before.vehicles if v.id in (2, 3)]
    after = make_state([v for v in before.vehicles if v.id not in (2, 3)], [0, 1, None, None, 4, 5, 6, 7],
                       collisions=[(2, 3)], crashed=crashed)
    clipped, raw = team_reward(before, after, PARAMS)
    assert raw == pytest.approx(-14.0)
    assert clipped == -5.0


def test_departed_agent_contributes_nothing():
    before = make_state(cavs([15.0] * 2), [0, 1], n=2)
    after = make_state(cavs([15.0]), [0, None], n=2)
    assert team_reward(before, after, PARAMS)[1] == pytest.approx(1.0)


# -- observation and masks ----------------------------------------------------


def test_observation_at_junction_centre_is_origin():
    half, L = 6.4, 100.0
    route = Route(0, "south", "outer", L, 2 * half, (0.0, half), 0.0, 0.0)
    net = RoadNetwork((route,), half, L)
    st_ = make_state([VehicleState(0, CAV, 0, L + half, 15.0)], [0], n=1)
    obs = observe(st_, net, 0, -1, SimConfig())
    assert obs[0] == 0.0 and obs[1] == 0.0
    assert obs[2] == 1.0
    assert not obs[3:].any()


def test_unbound_slot_observes_zeros_and_can_only_hold():
    cfg = Config()
    net = build_intersection(cfg.sim)
    st_ = make_state(cavs([10.0] * 7), list(range(7)) + [None])
    assert not observe(st_, net, 7, 2, cfg.sim).any()
    mask = legal_actions(st_, net, 7, cfg)
    assert mask.tolist() == [i == HOLD for i in range(N_ACTIONS)]


def test_free_road_all_legal():
    cfg = Config()
    net = build_intersection(cfg.sim)
    st_ = make_state(cavs([10.0] * 8), range(8))
    assert legal_actions(st_, net, 0, cfg).all()


def test_small_gap_forces_deceleration():
    cfg = Config()
    net = build_intersection(cfg.sim)
    follower = VehicleState(0, CAV, 0, 20.0, 10.0)
    leader = VehicleState(50, HDV, 0, 20.0 + 5.0 + 3.0, 10.0)  # head-to-tail gap 3 m
    st_ = make_state([follower, leader], [0] + [None] * 7)
    mask = legal_actions(st_, net, 0, cfg)
    assert np.flatnonzero(mask).tolist() == list(DECEL_ACTIONS)
    assert [cfg.env.accelerations[i] for i in DECEL_ACTIONS] == [-1.5, -2.5, -3.5]


def test_top_speed_forbids_acceleration():
    cfg = Config()
    net = build_intersection(cfg.sim)
    st_ = make_state(cavs([15.0] * 8), range(8))
    assert legal_actions(st_, net, 0, cfg).tolist() == [False, False, False, True, True, True, True]


# -- episodes -----------------------------------------------------------------


def test_reset_deterministic_and_state_is_concatenation():
    env = IntersectionEnv()
    o1, s1, m1 = env.reset(3)
    o2, s2, m2 = env.reset(3)
    assert np.array_equal(o1, o2) and np.array_equal(m1, m2)
    assert o1.shape == (8, OBS_DIM) and s1.shape == (80,)
    assert np.array_equal(s1, np.concatenate(list(o1)))
    assert np.all((o1[:, 2] >= 0) & (o1[:, 2] <= 1))
    assert not o1[:, 3:].any()


def test_episode_is_exactly_200_steps():
    env = IntersectionEnv()
    rng = np.random.default_rng(0)
    _, _, masks = env.reset(0)
    for k in range(1, 201):
        _, _, masks, _, done, _ = env.step(random_legal_actions(masks, rng))
        assert done == (k == 200)
    with pytest.raises(ContractViolation):
        env.step(np.full(8, HOLD))


def test_action_one_hot_after_first_step():
    env = IntersectionEnv()
    _, _, masks = env.reset(1)
    obs, *_ = env.step(random_legal_actions(masks, np.random.default_rng(1)))
    bound = [i for i, b in enumerate(env.sim.bindings) if b is not None]
    assert np.all(obs[bound, 3:].sum(axis=1) == 1.0)


def test_illegal_action_rejected():
    env = IntersectionEnv()
    _, _, masks = env.reset(0)
    env.sim.vehicles = [replace(v, v=15.0) for v in env.sim.vehicles]
    env._views()
    with pytest.raises(ContractViolation):
        env.step(np.zeros(8, dtype=int))
    with pytest.raises(ContractViolation):
        env.step(np.full(7, HOLD))


def test_hold_when_all_stopped_gives_minus_four_and_static_state():
    env = IntersectionEnv()
    env.reset(0)
    env.sim.vehicles = [replace(v, v=0.0, s=10.0) for v in env.sim.vehicles]
    env.sim.next_spawn = [math.inf] * 8
    env._views()
    before = [(v.id, v.s, v.v) for v in env.sim.vehicles]
    _, _, _, reward, _, info = env.step(np.full(8, HOLD))
    assert reward == -4.0 and info.raw_reward == -4.0
    assert [(v.id, v.s, v.v) for v in env.sim.vehicles] == before


def test_observations_ignore_hdvs():
    env = IntersectionEnv(Config(sim=SimConfig(density=300)))
    obs, _, masks = env.reset(2)
    rng = np.random.default_rng(2)
    for _ in range(150):
        obs, _, masks, *_ = env.step(random_legal_actions(masks, rng))
    hdvs = [v for v in env.sim.vehicles if v.kind == HDV]
    assert hdvs, "scenario should contain human-driven vehicles"
    env.sim.vehicles = [replace(v, s=v.s * 0.5, v=0.5 * v.v) if v.kind == HDV else v
                        for v in env.sim.vehicles]
    assert np.array_equal(env.observations(), obs)


@settings(max_examples=4, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rollout_invariants(seed):
    env = IntersectionEnv(Config(sim=SimConfig(density=300)))
    rng = np.random.default_rng(seed)
    _, _, masks = env.reset(seed)
    done = False
    while not done:
        assert masks.any(axis=1).all()
        _, state, masks, reward, done, _ = env.step(random_legal_actions(masks, rng))
        assert -5.0 <= reward <= 10.0
        assert state.shape == (80,)


def test_episode_determinism():
    def run(seed):
        env = IntersectionEnv()
        rng = np.random.default_rng(99)
        out = []
        _, _, masks = env.reset(seed)
        done = False
        while not done:
            a = random_legal_actions(masks, rng)
            obs, _, masks, r, done, _ = env.step(a)
            out.append((obs.tobytes(), masks.tobytes(), r))
        return out

    assert run(4) == run(4)


def test_record_mode_collects_trajectory():
    env = IntersectionEnv(record=True)
    _, _, masks = env.reset(0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        _, _, masks, *_ = env.step(random_legal_actions(masks, rng))
    times = sorted({row[0] for row in env.trajectory})
    assert times[0] == 0.0 and len(times) == 6
