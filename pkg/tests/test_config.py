import json

import pytest

from detco.config import ConfigError, ExperimentConfig, desk_config, dumps, from_dict, parse_config, write_config


def test_toml_round_trip(tmp_path):
    cfg = desk_config(**{"trainer.seed": 4, "contrast.tau_gl": 0.45, "eval.stages": [3, 5]})
    path = write_config(cfg, tmp_path / "c.toml")
    back = parse_config(path)
    assert back == cfg
    assert dumps(back) == dumps(cfg)


def test_json_round_trip(tmp_path):
    cfg = desk_config(**{"model.embed_dim": 32})
    back = parse_config(write_config(cfg, tmp_path / "c.json"))
    assert back == cfg


def test_null_learning_rate_survives_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.trainer.learning_rate is None
    text = dumps(cfg)
    assert "# trainer.learning_rate = null" in text
    assert parse_config(write_config(cfg, tmp_path / "c.toml")).trainer.learning_rate is None


def test_negative_temperature_names_key(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("contrast.tau_gg = -1.0\n")
    with pytest.raises(ConfigError, match="contrast.tau_gg"):
        parse_config(p)


def test_unknown_key_suggests(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("contrast.tua_gg = 0.2\n")
    with pytest.raises(ConfigError, match="did you mean 'contrast.tau_gg'"):
        parse_config(p)


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg.contrast.weights == (0.1, 0.4, 0.7, 1.0)
    assert (cfg.contrast.tau_gg, cfg.contrast.tau_ll, cfg.contrast.tau_gl) == (0.2, 0.15, 0.5)
    assert "contrast.weights = [0.1, 0.4, 0.7, 1.0]" in dumps(cfg)


def test_base_preset_is_respected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("trainer.total_steps = 7\n")
    cfg = parse_config(p, base=desk_config())
    assert cfg.trainer.total_steps == 7
    assert cfg.augment.global_side == desk_config().augment.global_side


def test_type_errors():
    with pytest.raises(ConfigError, match="trainer.batch_size"):
        from_dict({"trainer": {"batch_size": "many"}})
    with pytest.raises(ConfigError, match="trainer.batch_size"):
        from_dict({"trainer": {"batch_size": 1}})
    with pytest.raises(ConfigError, match="augment.global_side"):
        from_dict({"augment": {"global_side": 100}})
    with pytest.raises(ConfigError, match="contrast.weights"):
        from_dict({"contrast": {"weights": [1, 2]}})


def test_malformed_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("trainer.seed = = 3\n")
    with pytest.raises(ConfigError):
        parse_config(p)


def test_nested_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"trainer": {"seed": 11}}))
    assert parse_config(p).trainer.seed == 11
