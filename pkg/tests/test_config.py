from __future__ import annotations

import pytest

from cavmarl.config import (Config, QmixConfig, config_from_dict, desk_scale_config, dump_config,
                            load_config)


def test_yaml_round_trip(tmp_path):
    cfg = desk_scale_config(td_lambda=0.7, hidden_dim=32)
    cfg.seeds = [1, 2, 3]
    cfg.env.accelerations = (1.0, 0.0, -1.0)
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "p.yaml"
    path.write_text("sim:\n  density: 300\nqmix:\n  lr: 0.001\n")
    cfg = load_config(path)
    assert cfg.sim.density == 300 and cfg.qmix.lr == 0.001
    assert cfg.qmix.td_lambda == 0.4 and cfg.sim.roads == ["south", "east", "north", "west"]


def test_empty_file_is_default(tmp_path):
    path = tmp_path / "e.yaml"
    path.write_text("")
    assert load_config(path) == Config()


@pytest.mark.parametrize("data", [
    {"qmix": {"learning_rate": 1e-3}},
    {"simulation": {}},
    {"sim": {"idm": {"a": 1.0}}},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict(data)


@pytest.mark.parametrize("data", [
    {"sim": {"roads": ["south", "south"]}},
    {"sim": {"roads": ["up"]}},
    {"sim": {"density": 0}},
    {"sim": {"init_speed_range": [5, 20]}},
    {"sim": {"idm": {"delta": 0}}},
    {"qmix": {"td_lambda": 1.5}},
    {"qmix": {"gamma": 1.0}},
    {"qmix": {"optimizer": "sgd"}},
    {"ppo": {"clip_range": 0.0}},
    {"seeds": []},
    {"seeds": [-1]},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ValueError):
        config_from_dict(data)


def test_digest_tracks_content():
    a, b = Config(), Config()
    assert a.digest() == b.digest()
    b.sim.density = 300.0
    assert a.digest() != b.digest()


def test_learner_defaults():
    cfg = QmixConfig()
    assert (cfg.gamma, cfg.td_lambda, cfg.batch_size, cfg.target_update_interval) == (0.99, 0.4, 64, 100)
    assert (cfg.lr, cfg.lr_decay, cfg.eps_start, cfg.eps_end, cfg.eps_anneal_steps) == (1e-4, 0.991, 1.0, 0.05, 100_000)
