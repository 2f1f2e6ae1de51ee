"""Value-decomposition learner: recurrent agent network shared by all agents,
monotonic hypernetwork mixer, episode replay, Peng's Q(lambda) targets.

The same learner covers the VDN (``mixer="vdn"``) and IQL (``mixer="none"``)
variants; only the mixing step and the loss reduction change.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import numcore as nc
from .config import Config, QmixConfig
from .env import IntersectionEnv, N_ACTIONS

log = logging.getLogger(__name__)

METRICS_HEADER = ("episode", "env_steps", "reward", "collisions", "epsilon", "lr", "loss")
METRICS_SCHEMA_VERSION = 1
MIXERS = ("qmix", "vdn", "none")


# --------------------------------------------------------------------------
# parameters


def agent_shapes(input_dim: int, hidden: int = 64, n_actions: int = N_ACTIONS) -> Dict[str, tuple]:
    return {
        "agent.fc1.weight": (hidden, input_dim),
        "agent.fc1.bias": (hidden,),
        "agent.gru.w_ih": (3 * hidden, hidden),
        "agent.gru.w_hh": (3 * hidden, hidden),
        "agent.gru.b_ih": (3 * hidden,),
        "agent.gru.b_hh": (3 * hidden,),
        "agent.fc2.weight": (n_actions, hidden),
        "agent.fc2.bias": (n_actions,),
    }


def mixer_shapes(n_agents: int, state_dim: int, embed: int = 32) -> Dict[str, tuple]:
    return {
        "mixer.hyper_w1.weight": (n_agents * embed, state_dim),
        "mixer.hyper_w1.bias": (n_agents * embed,),
        "mixer.hyper_b1.weight": (embed, state_dim),
        "mixer.hyper_b1.bias": (embed,),
        "mixer.hyper_w2.weight": (embed, state_dim),
        "mixer.hyper_w2.bias": (embed,),
        "mixer.v1.weight": (embed, state_dim),
        "mixer.v1.bias": (embed,),
        "mixer.v2.weight": (1, embed),
        "mixer.v2.bias": (1,),
    }


def init_params(shapes: Dict[str, tuple], rng: np.random.Generator, scheme: str = "xavier") -> nc.Params:
    """``xavier``: Xavier-normal weights, zero biases, orthogonal recurrent
    gate blocks. ``uniform``: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) everywhere."""
    params = {}
    for name, shape in shapes.items():
        if scheme == "uniform":
            fan_in = shape[1] if len(shape) == 2 else _fan_in_for_bias(name, shapes)
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name.endswith("gru.w_hh"):
            H = shape[1]
            params[name] = np.concatenate([nc.orthogonal_init(H, H, rng) for _ in range(3)])
        else:
            params[name] = nc.xavier_normal_init(shape[0], shape[1], rng)
    return params


def _fan_in_for_bias(name: str, shapes) -> int:
    if "gru" in name:
        return shapes[name.replace("b_ih", "w_hh").replace("b_hh", "w_hh")][1]
    return shapes[name.replace(".bias", ".weight")][1]


def agent_inputs(obs: np.ndarray) -> np.ndarray:
    """Append the agent-identity one-hot: ``(..., n, obs_dim) -> (..., n, obs_dim + n)``."""
    n = obs.shape[-2]
    eye = np.broadcast_to(np.eye(n), obs.shape[:-1] + (n,))
    return np.concatenate([obs, eye], axis=-1)


# --------------------------------------------------------------------------
# networks on the tape


def _nodes(tape: nc.Tape, params: nc.Params, prefix: str) -> Dict[str, nc.Node]:
    return {k: tape.param(k, v) for k, v in params.items() if k.startswith(prefix)}


def agent_step(tape: nc.Tape, P: Dict[str, nc.Node], x: nc.Node, h: nc.Node):
    """One agent-network step: FC -> ReLU -> GRU -> FC. Returns ``(q, h')``."""
    e = nc.relu(nc.linear_forward(P["agent.fc1.weight"], P["agent.fc1.bias"], x, tape), tape)
    h2 = nc.gru_step(P["agent.gru.w_ih"], P["agent.gru.w_hh"], P["agent.gru.b_ih"],
                     P["agent.gru.b_hh"], e, h, tape)
    q = nc.linear_forward(P["agent.fc2.weight"], P["agent.fc2.bias"], h2, tape)
    return q, h2


def mix_on_tape(tape: nc.Tape, P: Dict[str, nc.Node], q: nc.Node, state: nc.Node) -> nc.Node:
    """``Q_tot = |W2| . relu(q |W1| + b1) + V(s)`` for ``q`` of shape ``(B, n)``."""
    B, n = q.shape
    w1 = nc.absolute(nc.linear_forward(P["mixer.hyper_w1.weight"], P["mixer.hyper_w1.bias"], state, tape), tape)
    w1 = nc.reshape(w1, (B, n, -1), tape)
    b1 = nc.linear_forward(P["mixer.hyper_b1.weight"], P["mixer.hyper_b1.bias"], state, tape)
    hidden = nc.relu(nc.add(nc.vecmat(q, w1, tape), b1, tape), tape)
    w2 = nc.absolute(nc.linear_forward(P["mixer.hyper_w2.weight"], P["mixer.hyper_w2.bias"], state, tape), tape)
    v = nc.relu(nc.linear_forward(P["mixer.v1.weight"], P["mixer.v1.bias"], state, tape), tape)
    v = nc.linear_forward(P["mixer.v2.weight"], P["mixer.v2.bias"], v, tape)
    out = nc.sum_(nc.mul(hidden, w2, tape), tape, axis=1)
    return nc.add(out, nc.reshape(v, (B,), tape), tape)


def agent_q(params: nc.Params, obs: np.ndarray, agent_id: int, h: np.ndarray, n_agents: int):
    """Q-values of one agent for one observation: returns ``(q[7], h')``."""
    tape = nc.Tape(grad=False)
    P = _nodes(tape, params, "agent.")
    onehot = np.zeros(n_agents)
    onehot[agent_id] = 1.0
    x = tape.const(np.concatenate([np.asarray(obs, dtype=float), onehot]))
    q, h2 = agent_step(tape, P, x, tape.const(h))
    return q.value, h2.value


def mix(params: nc.Params, q_taken: np.ndarray, state: np.ndarray) -> np.ndarray:
    """Mixed value for agent utilities ``q_taken`` (``(n,)`` or ``(B, n)``)."""
    q_taken = np.asarray(q_taken, dtype=float)
    state = np.asarray(state, dtype=float)
    single = q_taken.ndim == 1
    q2, s2 = np.atleast_2d(q_taken), np.atleast_2d(state)
    n = q2.shape[1]
    w1_shape = params["mixer.hyper_w1.weight"].shape
    if w1_shape[0] % n or s2.shape[1] != w1_shape[1] or q2.shape[0] != s2.shape[0]:
        raise nc.ShapeError(f"mix: q{q_taken.shape} state{state.shape} hyper_w1{w1_shape}")
    tape = nc.Tape(grad=False)
    out = mix_on_tape(tape, _nodes(tape, params, "mixer."), tape.const(q2), tape.const(s2)).value
    return out[0] if single else out


def vdn_mix(q_taken) -> float:
    return float(np.sum(q_taken))


def unroll_agents(tape: nc.Tape, P, inputs: np.ndarray, hidden: int) -> List[nc.Node]:
    """Run the agent network over ``inputs`` of shape ``(T, M, in)`` from a zero
    hidden state; returns one ``(M, n_actions)`` node per step."""
    T, M, _ = inputs.shape
    h = tape.const(np.zeros((M, hidden)))
    out = []
    for t in range(T):
        q, h = agent_step(tape, P, tape.const(inputs[t]), h)
        out.append(q)
    return out


# --------------------------------------------------------------------------
# exploration


@dataclass
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    anneal_steps: int = 100_000

    def __call__(self, t: int) -> float:
        if t >= self.anneal_steps:
            return self.end
        return self.start - (self.start - self.end) * t / self.anneal_steps


def masked_argmax(q: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return np.where(masks, q, -np.inf).argmax(axis=-1)


def select_actions(q: np.ndarray, masks: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Per-agent epsilon-greedy over legal actions."""
    masks = np.asarray(masks, dtype=bool)
    if not masks.any(axis=-1).all():
        raise nc.ContractViolation("an agent has no legal action")
    greedy = masked_argmax(q, masks)
    explore = rng.random(len(masks)) < eps
    out = greedy.copy()
    for i in np.flatnonzero(explore):
        out[i] = rng.choice(np.flatnonzero(masks[i]))
    return out


# --------------------------------------------------------------------------
# episodes and replay


@dataclass
class EpisodeBatch:
    """One episode padded to ``limit`` steps. ``obs``/``masks`` hold ``limit + 1``
    entries (the last is the observation after the final transition)."""

    obs: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    raw_rewards: np.ndarray
    terminated: np.ndarray
    length: int
    collisions: int = 0

    @classmethod
    def empty(cls, limit: int, n_agents: int, obs_dim: int) -> "EpisodeBatch":
        return cls(obs=np.zeros((limit + 1, n_agents, obs_dim)),
                   masks=np.zeros((limit + 1, n_agents, N_ACTIONS), dtype=bool),
                   actions=np.zeros((limit, n_agents), dtype=np.int64),
                   rewards=np.zeros(limit), raw_rewards=np.zeros(limit),
                   terminated=np.zeros(limit, dtype=bool), length=0)

    @property
    def filled(self) -> np.ndarray:
        f = np.zeros(len(self.rewards), dtype=bool)
        f[:self.length] = True
        return f

    @property
    def total_reward(self) -> float:
        return float(self.rewards[:self.length].sum())


def stack_episodes(episodes: Sequence[EpisodeBatch]) -> Dict[str, np.ndarray]:
    """Stack episodes into batch-major arrays trimmed to the longest one."""
    T = max(ep.length for ep in episodes)
    return {
        "obs": np.stack([ep.obs[:T + 1] for ep in episodes]),
        "masks": np.stack([ep.masks[:T + 1] for ep in episodes]),
        "actions": np.stack([ep.actions[:T] for ep in episodes]),
        "rewards": np.stack([ep.rewards[:T] for ep in episodes]),
        "raw_rewards": np.stack([ep.raw_rewards[:T] for ep in episodes]),
        "terminated": np.stack([ep.terminated[:T] for ep in episodes]),
        "filled": np.stack([ep.filled[:T] for ep in episodes]),
    }


class ReplayBuffer:
    """Ring buffer of whole episodes with uniform sampling without replacement."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.episodes: List[EpisodeBatch] = []
        self._next = 0

    def __len__(self):
        return len(self.episodes)

    def add(self, ep: EpisodeBatch) -> None:
        if len(self.episodes) < self.capacity:
            self.episodes.append(ep)
        else:
            self.episodes[self._next] = ep
        self._next = (self._next + 1) % self.capacity

    def can_sample(self, n: int) -> bool:
        return len(self.episodes) >= n

    def sample(self, n: int, rng: np.random.Generator) -> List[EpisodeBatch]:
        if not self.episodes:
            raise nc.ContractViolation("cannot sample from an empty replay buffer")
        if n > len(self.episodes):
            raise nc.ContractViolation(f"requested {n} episodes, buffer holds {len(self.episodes)}")
        idx = rng.choice(len(self.episodes), size=n, replace=False)
        return [self.episodes[i] for i in sorted(idx)]


# --------------------------------------------------------------------------
# targets


def lambda_returns(rewards: np.ndarray, next_values: np.ndarray, terminated: np.ndarray,
                   gamma: float, lam: float) -> np.ndarray:
    """Backward recursion ``G_t = r_t + gamma (1 - d_t) [(1 - lam) Q_{t+1} + lam G_{t+1}]``.

    Time is the second axis (``(B, T)`` or ``(B, T, n)``); ``next_values[:, t]``
    is the bootstrap value of the state reached after step ``t``.
    """
    G = np.zeros_like(next_values, dtype=float)
    nxt = np.zeros_like(next_values[:, 0], dtype=float)
    T = rewards.shape[1]
    for t in range(T - 1, -1, -1):
        cont = 1.0 - terminated[:, t].astype(float)
        if G.ndim == 3:
            cont = cont[:, None]
        G[:, t] = rewards[:, t] + gamma * cont * ((1.0 - lam) * next_values[:, t] + lam * nxt)
        nxt = G[:, t]
    return G


def _check_terminal(batch) -> None:
    lengths = batch["filled"].sum(axis=1)
    for b, n in enumerate(lengths):
        if n == 0 or not batch["terminated"][b, n - 1]:
            raise nc.ContractViolation("episode does not end with a terminal step")


# --------------------------------------------------------------------------
# learner


class ValueLearner:
    def __init__(self, cfg: QmixConfig, n_agents: int, obs_dim: int, mixer: str = "qmix",
                 seed: int = 0):
        if mixer not in MIXERS:
            raise ValueError(f"mixer must be one of {MIXERS}")
        self.cfg = cfg
        self.n_agents = n_agents
        self.mixer = mixer
        self.state_dim = n_agents * obs_dim
        self.shapes = agent_shapes(obs_dim + n_agents, cfg.hidden_dim)
        if mixer == "qmix":
            self.shapes.update(mixer_shapes(n_agents, self.state_dim, cfg.mixing_embed_dim))
        rng = np.random.default_rng(seed)
        self.params = init_params(self.shapes, rng, cfg.init)
        self.target = {k: v.copy() for k, v in self.params.items()}
        if cfg.optimizer == "adam":
            b1, b2 = cfg.adam_betas
            self.opt = nc.AdamState.fresh(self.params, cfg.lr, beta1=b1, beta2=b2, eps=cfg.adam_eps)
        else:
            self.opt = nc.RmsPropState.fresh(self.params, cfg.lr, alpha=cfg.rms_alpha, eps=cfg.rms_eps)
        self.grad_steps = 0

    @property
    def lr(self) -> float:
        return self.opt.lr

    # -- acting ----------------------------------------------------------------

    def init_hidden(self) -> np.ndarray:
        return np.zeros((self.n_agents, self.cfg.hidden_dim))

    def act_values(self, obs: np.ndarray, h: np.ndarray):
        """Q-values of all agents for one step: ``(n, 7)`` and the next hidden state."""
        tape = nc.Tape(grad=False)
        P = _nodes(tape, self.params, "agent.")
        q, h2 = agent_step(tape, P, tape.const(agent_inputs(obs)), tape.const(h))
        return q.value, h2.value

    # -- targets ---------------------------------------------------------------

    def _all_q(self, params, obs: np.ndarray) -> np.ndarray:
        """Agent Q-values for every step: ``obs (B, T, n, d) -> (B, T, n, 7)``."""
        B, T, n, _ = obs.shape
        inputs = agent_inputs(obs).transpose(1, 0, 2, 3).reshape(T, B * n, -1)
        tape = nc.Tape(grad=False)
        qs = unroll_agents(tape, _nodes(tape, params, "agent."), inputs, self.cfg.hidden_dim)
        return np.stack([q.value for q in qs]).reshape(T, B, n, -1).transpose(1, 0, 2, 3)

    def bootstrap_values(self, batch, params=None) -> np.ndarray:
        """Target max value after each step: ``(B, T)`` (or ``(B, T, n)`` for IQL)."""
        params = self.target if params is None else params
        q = self._all_q(params, batch["obs"])                      # (B, T+1, n, A)
        q_max = np.where(batch["masks"], q, -np.inf).max(axis=-1)  # (B, T+1, n)
        nxt = q_max[:, 1:]
        if self.mixer == "none":
            return nxt
        if self.mixer == "vdn":
            return nxt.sum(axis=-1)
        B, T1, n = nxt.shape
        states = batch["obs"][:, 1:].reshape(B * T1, -1)
        return mix(params, nxt.reshape(B * T1, n), states).reshape(B, T1)

    def targets(self, batch) -> np.ndarray:
        _check_terminal(batch)
        rewards = batch["rewards"] if self.cfg.clip_rewards else batch["raw_rewards"]
        nxt = self.bootstrap_values(batch)
        if self.mixer == "none":
            rewards = np.repeat(rewards[:, :, None], self.n_agents, axis=2)
        return lambda_returns(rewards, nxt, batch["terminated"], self.cfg.gamma, self.cfg.td_lambda)

    # -- loss ------------------------------------------------------------------

    def loss_tape(self, batch, targets: np.ndarray, params: Optional[nc.Params] = None):
        """Record the TD loss on a fresh tape; returns ``(tape, loss)`` with the
        loss as a 0-d array in the parameters' precision."""
        params = self.params if params is None else params
        obs, actions, filled = batch["obs"], batch["actions"], batch["filled"]
        B, T, n = actions.shape
        tape = nc.Tape()
        P = {k: tape.param(k, v) for k, v in params.items()}
        inputs = agent_inputs(obs[:, :T]).transpose(1, 0, 2, 3).reshape(T, B * n, -1)
        qs = unroll_agents(tape, P, inputs, self.cfg.hidden_dim)
        act_t = actions.transpose(1, 0, 2).reshape(T, B * n)
        taken = nc.stack([nc.gather(q, act_t[t], tape) for t, q in enumerate(qs)], tape)  # (T, B*n)
        mask = filled.T.astype(float)                                                    # (T, B)
        if self.mixer == "none":
            pred = nc.reshape(taken, (T, B, n), tape)
            tgt = targets.transpose(1, 0, 2)
            w = np.repeat(mask[:, :, None], n, axis=2)
        else:
            q_tb = nc.reshape(taken, (T * B, n), tape)
            if self.mixer == "vdn":
                pred = nc.sum_(q_tb, tape, axis=1)
            else:
                states = tape.const(obs[:, :T].transpose(1, 0, 2, 3).reshape(T * B, -1))
                pred = mix_on_tape(tape, P, q_tb, states)
            pred = nc.reshape(pred, (T, B), tape)
            tgt = targets.T
            w = mask
        err = nc.sub(pred, tape.const(tgt), tape)
        sq = nc.mul(nc.square(err, tape), tape.const(w), tape)
        loss = nc.scale(nc.sum_(sq, tape), 1.0 / max(1.0, mask.sum()), tape)
        return tape, loss.value

    def train_step(self, batch) -> float:
        tape, loss = self.loss_tape(batch, self.targets(batch))
        loss = float(loss)
        grads = nc.backward(tape)
        nc.clip_grad_norm(grads, self.cfg.grad_clip)
        if isinstance(self.opt, nc.AdamState):
            self.params, self.opt = nc.adam_step(self.opt, self.params, grads)
        else:
            self.params, self.opt = nc.rmsprop_step(self.opt, self.params, grads)
        self.grad_steps += 1
        if self.grad_steps % self.cfg.target_update_interval == 0:
            self.update_target()
            nc.decay_lr(self.opt, self.cfg.lr_decay)
        return loss

    def update_target(self) -> None:
        self.target = {k: v.copy() for k, v in self.params.items()}

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> Path:
        return nc.save_checkpoint(path, self.params)

    def load(self, path) -> None:
        self.params = nc.load_checkpoint(path, self.shapes)
        self.update_target()


# --------------------------------------------------------------------------
# rollouts and training


def episode_seed(seed: int, episode: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, episode]).generate_state(1)[0])


def run_episode(env: IntersectionEnv, policy, seed: int, eps: float = 0.0,
                rng: Optional[np.random.Generator] = None, eps_fn=None, t_env: int = 0) -> EpisodeBatch:
    """Roll one episode. ``policy(obs, h) -> (q, h')`` supplies agent values;
    ``eps_fn(t)`` (if given) overrides ``eps`` per environment step."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    ep = EpisodeBatch.empty(env.episode_limit, env.n_agents, env.obs_dim)
    obs, _, masks = env.reset(seed)
    h = np.zeros((env.n_agents, 64)) if not hasattr(policy, "hidden_dim") else np.zeros(
        (env.n_agents, policy.hidden_dim))
    for t in range(env.episode_limit):
        ep.obs[t], ep.masks[t] = obs, masks
        q, h = policy(obs, h)
        e = eps_fn(t_env + t) if eps_fn is not None else eps
        actions = select_actions(q, masks, e, rng)
        obs, _, masks, reward, done, info = env.step(actions)
        ep.actions[t] = actions
        ep.rewards[t], ep.raw_rewards[t] = reward, info.raw_reward
        ep.collisions += info.collisions
        ep.length = t + 1
        if done:
            ep.terminated[t] = True
            break
    ep.obs[ep.length], ep.masks[ep.length] = obs, masks
    return ep


class GreedyPolicy:
    def __init__(self, learner: ValueLearner):
        self.learner = learner
        self.hidden_dim = learner.cfg.hidden_dim

    def __call__(self, obs, h):
        return self.learner.act_values(obs, h)


@dataclass
class TrainResult:
    records: List[dict]
    out_dir: Optional[Path]
    checkpoints: Dict[str, str] = field(default_factory=dict)
    best: Dict[str, dict] = field(default_factory=dict)


def evaluate_greedy(env: IntersectionEnv, policy, seeds: Sequence[int]) -> dict:
    rewards, collisions = [], []
    for s in seeds:
        ep = run_episode(env, policy, s, eps=0.0)
        rewards.append(ep.total_reward)
        collisions.append(ep.collisions)
    return {"reward": float(np.mean(rewards)), "collisions": float(np.mean(collisions))}


def write_metrics_csv(path, records: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r["episode"], r["env_steps"], repr(r["reward"]), r["collisions"],
                        repr(r["epsilon"]), repr(r["lr"]),
                        "" if r["loss"] is None else repr(r["loss"])])


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"episode": int(r["episode"]), "env_steps": int(r["env_steps"]),
                    "reward": float(r["reward"]), "collisions": int(r["collisions"]),
                    "epsilon": float(r["epsilon"]), "lr": float(r["lr"]),
                    "loss": None if r["loss"] == "" else float(r["loss"])})
    return out


class CheckpointKeeper:
    """Tracks the best greedy-evaluation results and writes checkpoints.

    ``best_reward`` maximises mean reward (fewer collisions break ties);
    ``best_safety`` minimises mean collisions (higher reward breaks ties).
    """

    def __init__(self, out_dir: Optional[Path]):
        self.out_dir = out_dir
        self.best: Dict[str, dict] = {}
        self.paths: Dict[str, str] = {}

    def offer(self, score: dict, arrays: nc.Params, episode: int) -> None:
        keys = {"best_reward": (score["reward"], -score["collisions"]),
                "best_safety": (-score["collisions"], score["reward"])}
        for name, key in keys.items():
            cur = self.best.get(name)
            if cur is None or key > cur["key"]:
                self.best[name] = {"key": key, "episode": episode, **score}
                self._write(name, arrays)

    def _write(self, name: str, arrays: nc.Params) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "checkpoints" / f"{name}.ckpt"
        nc.save_checkpoint(path, arrays)
        self.paths[name] = str(path)

    def summary(self) -> Dict[str, dict]:
        return {k: {kk: vv for kk, vv in v.items() if kk != "key"} for k, v in self.best.items()}


def train(cfg: Config, seed: int = 0, out_dir=None, mixer: str = "qmix",
          progress: bool = False) -> TrainResult:
    """Train a value-decomposition learner and log one record per episode.

    One gradient step follows every episode once the buffer holds a batch.
    Every ``test_interval`` environment steps (and after the first and last
    episodes) the greedy policy is evaluated on fixed seeds; the best
    evaluations are checkpointed.
    """
    qc = cfg.qmix
    env = IntersectionEnv(cfg)
    learner = ValueLearner(qc, env.n_agents, env.obs_dim, mixer=mixer, seed=seed)
    buffer = ReplayBuffer(qc.buffer_capacity)
    schedule = EpsilonSchedule(qc.eps_start, qc.eps_end, qc.eps_anneal_steps)
    act_rng = np.random.default_rng(episode_seed(seed, 0, stream=1))
    sample_rng = np.random.default_rng(episode_seed(seed, 0, stream=2))
    test_seeds = [episode_seed(seed, k, stream=3) for k in range(qc.test_episodes)]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    keeper = CheckpointKeeper(out)
    policy = GreedyPolicy(learner)

    records, t_env, episode, last_test = [], 0, 0, -math.inf
    started = time.time()
    while t_env < qc.total_steps:
        eps_now = schedule(t_env)
        ep = run_episode(env, policy, episode_seed(seed, episode), rng=act_rng,
                         eps_fn=schedule, t_env=t_env)
        buffer.add(ep)
        t_env += ep.length
        loss = None
        if buffer.can_sample(qc.batch_size):
            batch = stack_episodes(buffer.sample(qc.batch_size, sample_rng))
            loss = learner.train_step(batch)
        records.append({"episode": episode, "env_steps": t_env, "reward": ep.total_reward,
                        "collisions": ep.collisions, "epsilon": eps_now, "lr": learner.lr,
                        "loss": loss})
        last = t_env >= qc.total_steps
        if episode == 0 or last or t_env - last_test >= qc.test_interval:
            keeper.offer(evaluate_greedy(env, policy, test_seeds), learner.params, episode)
            last_test = t_env
        if progress and episode % 50 == 0:
            log.info("ep %d t_env %d reward %.1f coll %d eps %.3f loss %s (%.0fs)", episode,
                     t_env, ep.total_reward, ep.collisions, eps_now, loss, time.time() - started)
        episode += 1

    result = TrainResult(records, out, best=keeper.summary())
    if out is not None:
        write_metrics_csv(out / "metrics.csv", records)
        last_path = learner.save(out / "checkpoints" / "last.ckpt")
        keeper.paths["last"] = str(last_path)
        result.checkpoints = dict(keeper.paths)
        (out / "best.json").write_text(json.dumps(result.best, indent=2, sort_keys=True))
    return result
