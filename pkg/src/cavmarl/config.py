"""Scenario and training configuration.

All tunables live in nested dataclasses that mirror the YAML config file
sections (``sim``, ``env``, ``qmix``, ``ppo``). Unknown keys are rejected so a
typo in a config file fails loudly instead of being silently ignored.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import yaml

APPROACHES = ("south", "east", "north", "west")


@dataclass
class IdmParams:
    desired_speed: float = 15.0
    time_gap: float = 1.0
    min_gap: float = 5.0
    delta: int = 4
    max_accel: float = 1.5
    comfort_decel: float = 2.0


@dataclass
class FuelParams:
    """Coefficients of the polynomial fuel-rate surrogate (ml/s)."""

    f_idle: float = 0.333
    c0: float = 0.3
    c1: float = 0.02
    c2: float = 0.0
    c3: float = 0.00025
    d0: float = 0.05
    d1: float = 0.002


@dataclass
class SimConfig:
    roads: List[str] = field(default_factory=lambda: list(APPROACHES))
    lane_length: float = 100.0
    lane_width: float = 3.2
    vehicle_length: float = 5.0
    v_max: float = 15.0
    dt: float = 0.1
    accel_limit: float = 3.5
    collision_distance: float = 0.2
    density: float = 150.0
    headway_jitter: float = 0.2
    init_speed_range: Tuple[float, float] = (5.0, 15.0)
    idm: IdmParams = field(default_factory=IdmParams)
    fuel: FuelParams = field(default_factory=FuelParams)

    def validate(self) -> None:
        bad = [r for r in self.roads if r not in APPROACHES]
        if bad or not self.roads or len(set(self.roads)) != len(self.roads):
            raise ValueError(f"roads must be distinct names from {APPROACHES}, got {self.roads}")
        if self.density <= 0:
            raise ValueError("density must be positive")
        lo, hi = self.init_speed_range
        if not 0.0 <= lo <= hi <= self.v_max:
            raise ValueError(f"init_speed_range {self.init_speed_range} outside [0, {self.v_max}]")
        idm = self.idm
        if min(idm.desired_speed, idm.time_gap, idm.min_gap, idm.max_accel, idm.comfort_decel) <= 0:
            raise ValueError("IDM parameters must be strictly positive")
        if int(idm.delta) != idm.delta or idm.delta < 1:
            raise ValueError("IDM delta must be an integer >= 1")


@dataclass
class RewardParams:
    low_speed_penalty: float = 0.5
    speed_weight: float = 1.0
    collision_penalty: float = 5.0
    v_min: float = 2.0 / 15.0
    clip_low: float = -5.0
    clip_high: float = 10.0


@dataclass
class EnvConfig:
    episode_limit: int = 200
    accelerations: Tuple[float, ...] = (1.5, 2.5, 3.5, 0.0, -1.5, -2.5, -3.5)
    mask_gap: float = 5.0
    terminate_on_departure: bool = False
    reward: RewardParams = field(default_factory=RewardParams)


@dataclass
class QmixConfig:
    """Value-based learner settings (modified QMIX and the VDN/IQL variants)."""

    total_steps: int = 1_500_000
    gamma: float = 0.99
    td_lambda: float = 0.4
    batch_size: int = 64
    buffer_capacity: int = 5000
    target_update_interval: int = 100
    lr: float = 1e-4
    lr_decay: float = 0.991
    optimizer: str = "adam"
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5
    init: str = "xavier"
    clip_rewards: bool = True
    grad_clip: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal_steps: int = 100_000
    hidden_dim: int = 64
    mixing_embed_dim: int = 32
    test_interval: int = 4000
    test_episodes: int = 4

    def validate(self) -> None:
        if not 0.0 <= self.td_lambda <= 1.0:
            raise ValueError("td_lambda must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in ("xavier", "uniform"):
            raise ValueError(f"unknown init {self.init!r}")

    @classmethod
    def original(cls, **overrides) -> "QmixConfig":
        """Settings of the unmodified learner: 1-step targets, no reward
        clipping, RMSProp at a constant rate, uniform initialisation."""
        base = dict(td_lambda=0.0, clip_rewards=False, optimizer="rmsprop", lr=5e-4,
                    lr_decay=1.0, init="uniform")
        base.update(overrides)
        return cls(**base)


@dataclass
class PpoConfig:
    total_steps: int = 1_500_000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    n_minibatches: int = 8
    epochs: int = 4
    lr: float = 3e-4
    hidden: int = 128
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    test_interval: int = 4000
    test_episodes: int = 4

    def validate(self) -> None:
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError("clip_range must lie in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    qmix: QmixConfig = field(default_factory=QmixConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    seeds: List[int] = field(default_factory=lambda: [0])

    def validate(self) -> "Config":
        if not self.seeds or any(int(s) != s or s < 0 for s in self.seeds):
            raise ValueError(f"seeds must be a non-empty list of non-negative integers, got {self.seeds}")
        self.sim.validate()
        self.qmix.validate()
        self.ppo.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, data: Dict[str, Any]):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"section for {cls.__name__} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> Config:
    return _build(Config, data or {}).validate()


def load_config(path) -> Config:
    path = Path(path)
    with path.open() as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def dump_config(cfg: Config, path) -> None:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    Path(path).write_text(yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False))


def desk_scale_config(**qmix_overrides) -> Config:
    """Reduced scenario used for quick experiments: two perpendicular roads
    (four controlled lanes) at 150 veh/h/lane."""
    cfg = Config()
    cfg.sim.roads = ["south", "east"]
    cfg.sim.density = 150.0
    for k, v in qmix_overrides.items():
        setattr(cfg.qmix, k, v)
    return cfg.validate()
