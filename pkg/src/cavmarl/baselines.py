"""Comparison learners: IQL and VDN (thin wrappers over the value learner)
and a shared-parameter PPO policy acting on local observations."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import numcore as nc
from . import qmix
from .config import Config, PpoConfig
from .env import IntersectionEnv, N_ACTIONS
from .qmix import vdn_mix  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

ALGORITHMS = ("qmix", "qmix-original", "vdn", "iql", "ppo")


def iql_loss(learner: qmix.ValueLearner, batch, targets: np.ndarray) -> float:
    """Independent per-agent TD loss summed over agents (``learner.mixer`` must be ``none``)."""
    if learner.mixer != "none":
        raise ValueError("iql_loss needs a learner built with mixer='none'")
    return float(learner.loss_tape(batch, targets)[1])


# --------------------------------------------------------------------------
# generalised advantage estimation


def gae_advantages(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """``A_t = delta_t + gamma * lam * A_{t+1}``, ``delta_t = r_t + gamma V_{t+1} - V_t``.

    ``values`` carries one extra trailing entry: the bootstrap value of the
    state after the last reward (0 when that state is terminal). Extra leading
    axes are not supported; time is axis 0, further axes are batched.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape[0] != r.shape[0] + 1 or v.shape[1:] != r.shape[1:]:
        raise nc.ContractViolation(f"values {v.shape} must have one more step than rewards {r.shape}")
    adv = np.zeros_like(r)
    acc = np.zeros(r.shape[1:])
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv


# --------------------------------------------------------------------------
# policy / value network


def ppo_shapes(input_dim: int, hidden: int = 128, n_actions: int = N_ACTIONS) -> Dict[str, tuple]:
    shapes = {}
    for head, out in (("pi", n_actions), ("vf", 1)):
        shapes[f"{head}.fc1.weight"] = (hidden, input_dim)
        shapes[f"{head}.fc1.bias"] = (hidden,)
        shapes[f"{head}.fc2.weight"] = (hidden, hidden)
        shapes[f"{head}.fc2.bias"] = (hidden,)
        shapes[f"{head}.out.weight"] = (out, hidden)
        shapes[f"{head}.out.bias"] = (out,)
    return shapes


def init_ppo(shapes: Dict[str, tuple], rng: np.random.Generator) -> nc.Params:
    """Orthogonal weights (gain sqrt(2) hidden, 0.01 policy head, 1 value head), zero biases."""
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        gain = 0.01 if name == "pi.out.weight" else 1.0 if name == "vf.out.weight" else math.sqrt(2)
        params[name] = nc.orthogonal_init(shape[0], shape[1], rng, gain=gain)
    return params


def _mlp(tape, P, head: str, x):
    h = nc.tanh(nc.linear_forward(P[f"{head}.fc1.weight"], P[f"{head}.fc1.bias"], x, tape), tape)
    h = nc.tanh(nc.linear_forward(P[f"{head}.fc2.weight"], P[f"{head}.fc2.bias"], h, tape), tape)
    return nc.linear_forward(P[f"{head}.out.weight"], P[f"{head}.out.bias"], h, tape)


def policy_value(params: nc.Params, inputs: np.ndarray, masks: np.ndarray):
    """Masked action probabilities ``(M, 7)`` and values ``(M,)`` for agent inputs."""
    tape = nc.Tape(grad=False)
    P = {k: tape.const(v) for k, v in params.items()}
    x = tape.const(inputs)
    logp = nc.masked_log_softmax(_mlp(tape, P, "pi", x), masks, tape).value
    probs = np.where(masks, np.exp(logp), 0.0)
    return probs / probs.sum(axis=-1, keepdims=True), _mlp(tape, P, "vf", x).value[:, 0]


def clipped_surrogate(ratio, adv, clip_range: float):
    """Per-sample PPO objective ``min(r A, clip(r, 1 - c, 1 + c) A)``."""
    ratio, adv = np.asarray(ratio, dtype=float), np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip_range, 1 + clip_range) * adv)


@dataclass
class Rollout:
    inputs: np.ndarray     # (N, in)
    masks: np.ndarray      # (N, 7)
    actions: np.ndarray    # (N,)
    logp: np.ndarray       # (N,)
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    def subset(self, idx) -> "Rollout":
        return Rollout(*(getattr(self, f)[idx] for f in
                         ("inputs", "masks", "actions", "logp", "advantages", "returns")))


def ppo_loss_tape(params: nc.Params, batch: Rollout, cfg: PpoConfig, normalize: bool = True):
    """Record the PPO loss; returns ``(tape, stats)``. The objective is the
    negated clipped surrogate plus the weighted value error minus the
    weighted policy entropy."""
    tape = nc.Tape()
    P = {k: tape.param(k, v) for k, v in params.items()}
    x = tape.const(batch.inputs)
    logp_all = nc.masked_log_softmax(_mlp(tape, P, "pi", x), batch.masks, tape)
    logp = nc.gather(logp_all, batch.actions, tape)
    ratio = nc.exp(nc.sub(logp, tape.const(batch.logp), tape), tape)
    adv = batch.advantages
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    adv_c = tape.const(adv)
    surr = nc.minimum(nc.mul(ratio, adv_c, tape),
                      nc.mul(nc.clip(ratio, 1 - cfg.clip_range, 1 + cfg.clip_range, tape), adv_c, tape),
                      tape)
    pg = nc.scale(nc.mean(surr, tape), -1.0, tape)
    probs = nc.mul(nc.exp(logp_all, tape), tape.const(batch.masks.astype(float)), tape)
    entropy = nc.scale(nc.sum_(nc.mul(probs, logp_all, tape), tape), -1.0 / len(batch), tape)
    v = nc.reshape(_mlp(tape, P, "vf", x), (len(batch),), tape)
    vloss = nc.mean(nc.square(nc.sub(v, tape.const(batch.returns), tape), tape), tape)
    total = nc.add(nc.add(pg, nc.scale(vloss, cfg.vf_coef, tape), tape),
                   nc.scale(entropy, -cfg.ent_coef, tape), tape)
    stats = {"loss": float(total.value), "policy": float(pg.value), "value": float(vloss.value),
             "entropy": float(entropy.value)}
    return tape, stats


def ppo_update(rollout: Rollout, params: nc.Params, opt: nc.AdamState, cfg: PpoConfig,
               rng: np.random.Generator):
    """Run ``epochs`` passes over ``n_minibatches`` shuffled minibatches."""
    n = len(rollout)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for idx in np.array_split(order, cfg.n_minibatches):
            if len(idx) == 0:
                continue
            tape, stats = ppo_loss_tape(params, rollout.subset(idx), cfg)
            grads = nc.backward(tape)
            nc.clip_grad_norm(grads, cfg.max_grad_norm)
            params, opt = nc.adam_step(opt, params, grads)
            losses.append(stats["loss"])
    return params, opt, float(np.mean(losses))


class PpoAgent:
    def __init__(self, cfg: PpoConfig, n_agents: int, obs_dim: int, seed: int = 0):
        self.cfg = cfg
        self.n_agents = n_agents
        self.shapes = ppo_shapes(obs_dim + n_agents, cfg.hidden)
        self.params = init_ppo(self.shapes, np.random.default_rng(seed))
        self.opt = nc.AdamState.fresh(self.params, cfg.lr, eps=1e-5)

    def act(self, obs, masks, rng: Optional[np.random.Generator] = None):
        """Sample (or, without ``rng``, take the most likely) legal actions."""
        probs, values = policy_value(self.params, qmix.agent_inputs(obs), masks)
        if rng is None:
            actions = np.where(masks, probs, -1.0).argmax(axis=-1)
        else:
            actions = np.array([rng.choice(N_ACTIONS, p=p) for p in probs])
        logp = np.log(probs[np.arange(len(actions)), actions])
        return actions, logp, values

    def collect(self, env: IntersectionEnv, seed: int, rng: np.random.Generator):
        """One on-policy episode; every agent-step becomes one sample."""
        obs, _, masks = env.reset(seed)
        T, n = env.episode_limit, env.n_agents
        buf = {k: [] for k in ("inputs", "masks", "actions", "logp", "values", "rewards")}
        total, collisions, done = 0.0, 0, False
        while not done:
            actions, logp, values = self.act(obs, masks, rng)
            buf["inputs"].append(qmix.agent_inputs(obs))
            buf["masks"].append(masks)
            buf["actions"].append(actions)
            buf["logp"].append(logp)
            buf["values"].append(values)
            obs, _, masks, reward, done, info = env.step(actions)
            buf["rewards"].append(np.full(n, reward))
            total += reward
            collisions += info.collisions
        values = np.stack(buf["values"] + [np.zeros(n)])
        rewards = np.stack(buf["rewards"])
        adv = gae_advantages(rewards, values, self.cfg.gamma, self.cfg.gae_lambda)
        flat = lambda a: np.asarray(a).reshape(len(rewards) * n, *np.asarray(a).shape[2:])
        rollout = Rollout(flat(buf["inputs"]), flat(buf["masks"]), flat(buf["actions"]),
                          flat(buf["logp"]), adv.reshape(-1), (adv + values[:-1]).reshape(-1))
        return rollout, total, collisions, len(rewards)

    def greedy_episode(self, env: IntersectionEnv, seed: int):
        obs, _, masks = env.reset(seed)
        total, collisions, done = 0.0, 0, False
        while not done:
            actions, _, _ = self.act(obs, masks)
            obs, _, masks, reward, done, info = env.step(actions)
            total += reward
            collisions += info.collisions
        return total, collisions


def train_ppo(cfg: Config, seed: int = 0, out_dir=None, progress: bool = False) -> qmix.TrainResult:
    pc = cfg.ppo
    env = IntersectionEnv(cfg)
    agent = PpoAgent(pc, env.n_agents, env.obs_dim, seed=seed)
    act_rng = np.random.default_rng(qmix.episode_seed(seed, 0, stream=1))
    shuffle_rng = np.random.default_rng(qmix.episode_seed(seed, 0, stream=2))
    test_seeds = [qmix.episode_seed(seed, k, stream=3) for k in range(pc.test_episodes)]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    keeper = qmix.CheckpointKeeper(out)

    records, t_env, episode, last_test = [], 0, 0, -math.inf
    started = time.time()
    while t_env < pc.total_steps:
        agent.opt.lr = pc.lr * max(0.0, 1.0 - t_env / pc.total_steps)
        rollout, total, collisions, steps = agent.collect(env, qmix.episode_seed(seed, episode), act_rng)
        lr_used = agent.opt.lr
        agent.params, agent.opt, loss = ppo_update(rollout, agent.params, agent.opt, pc, shuffle_rng)
        t_env += steps
        records.append({"episode": episode, "env_steps": t_env, "reward": total,
                        "collisions": collisions, "epsilon": 0.0, "lr": lr_used, "loss": loss})
        if episode == 0 or t_env >= pc.total_steps or t_env - last_test >= pc.test_interval:
            scores = [agent.greedy_episode(env, s) for s in test_seeds]
            keeper.offer({"reward": float(np.mean([s[0] for s in scores])),
                          "collisions": float(np.mean([s[1] for s in scores]))},
                         agent.params, episode)
            last_test = t_env
        if progress and episode % 50 == 0:
            log.info("ppo ep %d t_env %d reward %.1f coll %d loss %.4f (%.0fs)", episode, t_env,
                     total, collisions, loss, time.time() - started)
        episode += 1

    result = qmix.TrainResult(records, out, best=keeper.summary())
    if out is not None:
        qmix.write_metrics_csv(out / "metrics.csv", records)
        keeper.paths["last"] = str(nc.save_checkpoint(out / "checkpoints" / "last.ckpt", agent.params))
        result.checkpoints = dict(keeper.paths)
        (out / "best.json").write_text(json.dumps(result.best, indent=2, sort_keys=True))
    return result


def algo_config(cfg: Config, algo: str) -> Config:
    """Copy of ``cfg`` adjusted for ``algo`` (the original-QMIX settings swap
    the learner section, keeping the step budget and evaluation cadence)."""
    import copy

    if algo not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")
    out = copy.deepcopy(cfg)
    if algo == "qmix-original":
        q = out.qmix
        out.qmix = type(q).original(total_steps=q.total_steps, test_interval=q.test_interval,
                                    test_episodes=q.test_episodes, batch_size=q.batch_size,
                                    buffer_capacity=q.buffer_capacity,
                                    eps_anneal_steps=q.eps_anneal_steps)
    return out


def train_baseline(which: str, cfg: Config, seed: int = 0, out_dir=None,
                   progress: bool = False) -> qmix.TrainResult:
    """Train any of the supported algorithms with the shared logging contract."""
    cfg = algo_config(cfg, which)
    if which == "ppo":
        return train_ppo(cfg, seed, out_dir, progress)
    mixer = {"qmix": "qmix", "qmix-original": "qmix", "vdn": "vdn", "iql": "none"}[which]
    return qmix.train(cfg, seed, out_dir, mixer=mixer, progress=progress)


def load_policy(which: str, cfg: Config, checkpoint, n_agents: int, obs_dim: int):
    """Greedy per-step policy ``(obs, masks, h) -> (actions, h')`` from a checkpoint."""
    if which == "ppo":
        agent = PpoAgent(cfg.ppo, n_agents, obs_dim)
        agent.params = nc.load_checkpoint(checkpoint, agent.shapes)

        def act(obs, masks, h):
            return agent.act(obs, masks)[0], h

        return act, np.zeros((n_agents, 1))
    cfg = algo_config(cfg, which)
    mixer = {"qmix": "qmix", "qmix-original": "qmix", "vdn": "vdn", "iql": "none"}[which]
    learner = qmix.ValueLearner(cfg.qmix, n_agents, obs_dim, mixer=mixer)
    learner.load(checkpoint)

    def act(obs, masks, h):
        q, h2 = learner.act_values(obs, h)
        return qmix.masked_argmax(q, masks), h2

    return act, learner.init_hidden()
