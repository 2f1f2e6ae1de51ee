"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line that the terminal summary prints
under "acceptance criteria". The desk-scale learning checks train for real
(three 200k-step runs on the reduced two-road scenario) and take most of the
suite's wall time.
"""
from __future__ import annotations

import csv
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from cavmarl import baselines as bl
from cavmarl import cli, dumps
from cavmarl import numcore as nc
from cavmarl import qmix as q
from cavmarl.config import IdmParams, desk_scale_config, dump_config
from cavmarl.env import IntersectionEnv, random_legal_actions, team_reward
from cavmarl.simcore import idm_accel, step_kinematics

from conftest import ACCEPTANCE_LINES
from gradcheck import check_gradients, sample_coords
from test_env import PARAMS, cavs, make_state
from test_qmix import n_step_oracle, random_batch, random_mixer

DESK_STEPS = 200_000
DESK_SEED = 0


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- 1 ------------------------------------------------------------------------


def test_criterion_1_monotonicity():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(1000):
        params = random_mixer(rng, 8, 80)
        s, qt = rng.normal(size=80), rng.normal(size=8) * 3
        base = q.mix(params, qt, s)
        for i in range(8):
            up = qt.copy()
            up[i] += 0.5
            violations += int(q.mix(params, up, s) < base)
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 10
    report(1, ok, f"{violations} violations in 8000 bumps, {elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------


def test_criterion_2_igm():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    violations = 0
    for k in range(200):
        n = 2 if k % 2 == 0 else 3
        params = random_mixer(rng, n, 6, embed=4)
        s = rng.normal(size=6)
        qs = rng.normal(size=(n, 3))
        joint = list(itertools.product(range(3), repeat=n))
        values = np.array([q.mix(params, np.array([qs[i, a] for i, a in enumerate(j)]), s) for j in joint])
        greedy = tuple(int(x) for x in qs.argmax(axis=1))
        violations += int(values[joint.index(greedy)] < values.max())
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 30
    report(2, ok, f"{violations} violations in 200 instances, {elapsed:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------


def gradient_errors(cfg, n_batches, coords_per_param, seed):
    worst, checked, skipped = 0.0, 0, 0
    for b in range(n_batches):
        learner = q.ValueLearner(cfg.qmix, 4, 10, seed=seed + b)
        batch = random_batch(learner, cfg, n_eps=2, T=5, seed=seed + b)
        targets = learner.targets(batch)
        tape, _ = learner.loss_tape(batch, targets)
        grads = nc.backward(tape)
        ext = targets.astype(np.longdouble)
        coords = None if coords_per_param is None else sample_coords(
            grads, coords_per_param, np.random.default_rng(seed + b))
        w, c, s = check_gradients(lambda P: learner.loss_tape(batch, ext, P)[1], learner.params, grads, coords)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    return worst, checked, skipped


def test_criterion_3_gradient_oracle():
    start = time.perf_counter()
    # every coordinate of a narrow network, then sampled coordinates at full width
    narrow = desk_scale_config(hidden_dim=8, mixing_embed_dim=4)
    w1, c1, s1 = gradient_errors(narrow, 5, None, seed=100)
    w2, c2, s2 = gradient_errors(desk_scale_config(), 5, 6, seed=200)
    elapsed = time.perf_counter() - start
    worst = max(w1, w2)
    ok = worst < 1e-4 and elapsed < 120
    report(3, ok, f"max rel err {worst:.2e} over {c1 + c2} coords "
                  f"({s1 + s2} skipped at ReLU/abs kinks), {elapsed:.1f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_peng_lambda():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst, exact0, exact1 = 0.0, True, True
    for _ in range(100):
        T = int(rng.integers(1, 11))
        gamma, lam = float(rng.uniform(0.5, 0.999)), float(rng.uniform(0, 1))
        r, boot = rng.normal(size=T) * 3, rng.normal(size=T) * 10
        term = np.zeros(T, bool)
        term[-1] = True
        got = q.lambda_returns(r[None], boot[None], term[None], gamma, lam)[0]
        worst = max(worst, float(np.abs(got - n_step_oracle(r, boot, gamma, lam)).max()))
        one_step = r + gamma * boot * (1 - term)
        exact0 &= bool(np.array_equal(q.lambda_returns(r[None], boot[None], term[None], gamma, 0.0)[0], one_step))
        ret = np.zeros(T)
        acc = 0.0
        for t in range(T - 1, -1, -1):
            acc = r[t] + gamma * acc
            ret[t] = acc
        exact1 &= bool(np.array_equal(q.lambda_returns(r[None], boot[None], term[None], gamma, 1.0)[0], ret))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and exact0 and exact1 and elapsed < 10
    report(4, ok, f"max |recursion - n-step sum| {worst:.1e}; lambda=0 exact {exact0}; "
                  f"lambda=1 exact {exact1}; {elapsed:.2f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_idm_kinematics():
    start = time.perf_counter()
    idm = IdmParams()
    free = idm_accel(15.0, 0.0, float("inf"), idm)
    standing = idm_accel(0.0, 0.0, 100.0, idm)
    kin = step_kinematics(0.0, 10.0, 1.0, 0.1)
    elapsed = time.perf_counter() - start
    ok = abs(free) < 1e-9 and abs(standing - 1.49625) < 1e-9 and kin == (1.005, 10.1) and elapsed < 1
    report(5, ok, f"free road {free}, standing start {standing!r}, kinematics {kin}")
    assert ok


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_reward_contract():
    start = time.perf_counter()
    env = IntersectionEnv()
    rng = np.random.default_rng(6)
    rewards, episode = [], 0
    while len(rewards) < 10_000:
        _, _, masks = env.reset(episode)
        done = False
        while not done:
            _, _, masks, r, done, _ = env.step(random_legal_actions(masks, rng))
            rewards.append(r)
        episode += 1
    in_range = all(-5.0 <= r <= 10.0 for r in rewards)

    top = team_reward(make_state(cavs([15.0] * 8), range(8)), make_state(cavs([15.0] * 8, s=21.5), range(8)),
                      PARAMS)[0]
    stopped = make_state(cavs([0.0] * 8), range(8))
    halt = team_reward(stopped, stopped, PARAMS)[0]
    crashed = [v for v in stopped.vehicles if v.id in (2, 3)]
    after = make_state([v for v in stopped.vehicles if v.id not in (2, 3)], [0, 1, None, None, 4, 5, 6, 7],
                       collisions=[(2, 3)], crashed=crashed)
    crash = team_reward(stopped, after, PARAMS)[0]
    elapsed = time.perf_counter() - start
    ok = in_range and (top, halt, crash) == (8.0, -4.0, -5.0) and elapsed < 60
    report(6, ok, f"{len(rewards)} random steps in [{min(rewards):.2f}, {max(rewards):.2f}]; "
                  f"scenarios {top}, {halt}, {crash}; {elapsed:.1f}s")
    assert ok


# -- 7, 8, 9: desk-scale training -------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg_path = root / "desk.yaml"
    dump_config(desk_scale_config(), cfg_path)
    runs = {}
    for name, algo in (("modified", "qmix"), ("repeat", "qmix"), ("original", "qmix-original")):
        out = root / name
        started = time.perf_counter()
        code = cli.main(["train", "--algo", algo, "--config", str(cfg_path), "--steps", str(DESK_STEPS),
                         "--seeds", str(DESK_SEED), "--out", str(out)])
        assert code == 0
        runs[name] = (out / f"seed_{DESK_SEED}", time.perf_counter() - started)
    return root, cfg_path, runs


def final_tenth(records):
    k = max(1, len(records) // 10)
    return records[-k:]


def test_criterion_7_determinism(desk):
    _, _, runs = desk
    a = (runs["modified"][0] / "metrics.csv").read_bytes()
    b = (runs["repeat"][0] / "metrics.csv").read_bytes()
    ok = a == b
    report(7, ok, f"metrics CSVs {'bit-identical' if ok else 'differ'} ({len(a)} bytes)")
    assert ok


def test_criterion_8_desk_learning(desk):
    _, _, runs = desk
    mod = final_tenth(q.read_metrics_csv(runs["modified"][0] / "metrics.csv"))
    orig = final_tenth(q.read_metrics_csv(runs["original"][0] / "metrics.csv"))
    mod_reward = float(np.mean([r["reward"] for r in mod]))
    mod_coll = float(np.mean([r["collisions"] for r in mod]))
    orig_reward = float(np.mean([r["reward"] for r in orig]))

    # uniform-random legal actions on the same episode seeds
    env = IntersectionEnv(desk_scale_config())
    rng = np.random.default_rng(12345)
    zero = lambda obs, h: (np.zeros((len(obs), env.n_actions)), h)
    random_rewards = [q.run_episode(env, zero, q.episode_seed(DESK_SEED, r["episode"]), eps=1.0, rng=rng).total_reward
                      for r in mod]
    random_reward = float(np.mean(random_rewards))

    beats_random = mod_reward >= random_reward + 3.0
    beats_original = mod_reward > orig_reward
    safe = mod_coll <= 0.5
    ok = beats_random and beats_original and safe
    minutes = runs["modified"][1] / 60
    report(8, ok, f"final-10% reward {mod_reward:.2f} vs random {random_reward:.2f} "
                  f"({'ok' if beats_random else 'short'}) vs original {orig_reward:.2f} "
                  f"({'ok' if beats_original else 'short'}); collisions {mod_coll:.2f} "
                  f"({'ok' if safe else 'above 0.5'}); {minutes:.1f} min per run")
    assert ok


def eval_summary(out_dir: Path):
    with (out_dir / "eval_episodes.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    return (float(np.mean([float(r["avg_speed"]) for r in rows])),
            float(np.mean([int(r["collisions"]) for r in rows])))


def test_criterion_9_metric_direction(desk):
    root, cfg_path, runs = desk
    results = {}
    for name, algo in (("modified", "qmix"), ("original", "qmix-original")):
        ckpt = runs[name][0] / "checkpoints" / "best_safety.ckpt"
        out = root / f"eval_{name}"
        code = cli.main(["eval", str(ckpt), "--algo", algo, "--config", str(cfg_path),
                         "--episodes", "20", "--seed", "99", "--out", str(out)])
        assert code == 0
        results[name] = eval_summary(out)
    (ms, mc), (os_, oc) = results["modified"], results["original"]
    ok = ms >= os_ and mc <= oc
    report(9, ok, f"average speed {ms:.2f} vs {os_:.2f} m/s; collisions/episode {mc:.2f} vs {oc:.2f}")
    assert ok


# -- 10 -----------------------------------------------------------------------


def test_criterion_10_round_trips(tmp_path):
    start = time.perf_counter()
    checks = []
    learner = q.ValueLearner(desk_scale_config().qmix, 4, 10, seed=3)
    p1 = learner.save(tmp_path / "a.ckpt")
    other = q.ValueLearner(desk_scale_config().qmix, 4, 10, seed=4)
    other.load(p1)
    checks.append(other.save(tmp_path / "b.ckpt").read_bytes() == p1.read_bytes())

    ppo = bl.PpoAgent(desk_scale_config().ppo, 4, 10, seed=1)
    c1 = nc.save_checkpoint(tmp_path / "p.ckpt", ppo.params)
    back = nc.load_checkpoint(c1, ppo.shapes)
    checks.append(nc.save_checkpoint(tmp_path / "p2.ckpt", back).read_bytes() == c1.read_bytes())

    records = [{"episode": k, "env_steps": 200 * (k + 1), "reward": 280.5 + k / 3, "collisions": k % 2,
                "epsilon": 1.0 - k * 0.01, "lr": 1e-4 * 0.991 ** k, "loss": None if k == 0 else 1.0 / k}
               for k in range(5)]
    m1 = tmp_path / "m1.csv"
    q.write_metrics_csv(m1, records)
    q.write_metrics_csv(tmp_path / "m2.csv", q.read_metrics_csv(m1))
    checks.append(m1.read_bytes() == (tmp_path / "m2.csv").read_bytes())

    env = IntersectionEnv(desk_scale_config(), record=True)
    _, _, masks = env.reset(0)
    rng = np.random.default_rng(0)
    for _ in range(30):
        _, _, masks, *_ = env.step(random_legal_actions(masks, rng))
    t1 = dumps.write_trajectory(tmp_path / "t1.csv", env.trajectory)
    t2 = dumps.write_trajectory(tmp_path / "t2.csv",
                                [tuple(vars(r).values()) for r in dumps.read_trajectory(t1)])
    checks.append(t1.read_bytes() == t2.read_bytes())

    golden = Path(__file__).parent / "golden"
    expected = {"trajectory": dumps.TRAJECTORY_HEADER, "collisions": dumps.COLLISION_HEADER,
                "eval_steps": dumps.STEP_METRICS_HEADER, "eval_episodes": dumps.EPISODE_METRICS_HEADER,
                "episode_4": dumps.episode_header(4), "observations": dumps.observation_header(),
                "metrics": q.METRICS_HEADER}
    checks.append(all((golden / f"{k}.header").read_text().strip() == ",".join(v) for k, v in expected.items()))
    elapsed = time.perf_counter() - start
    ok = all(checks) and elapsed < 5
    report(10, ok, f"checkpoint/metrics/trajectory round trips and golden headers {checks}, {elapsed:.2f}s")
    assert ok
