import json

import pytest

from graphstad.config import ConfigError, PipelineConfig, env_overrides, load_config, merge


def test_toy_preset_defaults():
    cfg = PipelineConfig.preset("toy")
    assert cfg.geometry.shape == (16, 24, 3)
    assert cfg.arch.cnn_features == (8, 16, 32, 64)
    assert cfg.injection.resolved_factor() == 0.4


def test_full_preset_matches_detector():
    cfg = PipelineConfig.preset("full")
    assert cfg.geometry.shape == (64, 72, 7)
    assert cfg.arch.latent == 32 and cfg.arch.window == 5


def test_unknown_preset():
    with pytest.raises(ConfigError):
        PipelineConfig.preset("half")


def test_unknown_section_and_key_rejected():
    cfg = PipelineConfig()
    with pytest.raises(ConfigError, match="section 'trian'"):
        merge(cfg, {"trian": {"epochs": 1}})
    with pytest.raises(ConfigError, match="train.epoch"):
        merge(cfg, {"train": {"epoch": 1}})


def test_file_then_env_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs: 3\narch:\n  lstm_sizes: [16, 8]\n  latent: 8\n")
    cfg = load_config(p, environ={"GRAPHSTAD__TRAIN__EPOCHS": "7", "GRAPHSTAD__SEED": "4"})
    assert cfg.train.epochs == 7
    assert cfg.arch.lstm_sizes == (16, 8)
    assert cfg.seed == 4


def test_json_and_preset_key(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "full", "evaluation": {"alpha": 3.0}}))
    cfg = load_config(p, environ={})
    assert cfg.geometry.shape == (64, 72, 7)
    assert cfg.evaluation.alpha == 3.0


def test_bad_inputs(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml", environ={})
    with pytest.raises(ConfigError, match="malformed"):
        env_overrides({"GRAPHSTAD__A__B__C": "1"})
    with pytest.raises(ConfigError):
        merge(PipelineConfig(), {"evaluation": {"score_mode": "both"}})
    assert env_overrides({"OTHER": "1"}) == {}


def test_with_seed_propagates():
    cfg = PipelineConfig().with_seed(9)
    assert (cfg.seed, cfg.world.seed, cfg.train.seed, cfg.injection.seed) == (9, 9, 9, 9)


def test_dict_round_trip():
    cfg = PipelineConfig().with_seed(2)
    doc = json.loads(json.dumps(cfg.to_dict()))
    assert merge(PipelineConfig(), doc) == cfg
