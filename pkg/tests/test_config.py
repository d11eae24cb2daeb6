import json
from pathlib import Path

import pytest

from almlab.config import RunConfig, apply_overrides, from_dict, load_config, read_resolved, write_resolved
from almlab.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults():
    cfg = from_dict({})
    assert cfg == RunConfig()
    assert cfg.train.lr_max == 2e-4 and cfg.lora.rank == 8 and cfg.generation.temperature == 0.1


@pytest.mark.parametrize(
    "d",
    [
        {"bogus": 1},
        {"train": {"lr": 1}},
        {"preset": "whisper-huge"},
        {"train": []},
        {"stages": 3},
        {"seed": "0"},
        {"seed": True},
        {"train": {"batch_size": 0}},
        {"connector": {"k": 0}},
    ],
)
def test_rejects(d):
    with pytest.raises(ConfigError):
        from_dict(d)


def test_mismatched_widths_rejected():
    with pytest.raises(ConfigError):
        from_dict({"lm": {"d_lm": 32, "n_heads": 4}})


def test_preset_merges_with_explicit_encoder_keys():
    cfg = from_dict({"preset": "toy-deep", "encoder": {"max_frames": 800}})
    assert cfg.encoder.n_layers == 24 and cfg.encoder.max_frames == 800


def test_overrides():
    d = apply_overrides({"train": {"lr_max": 1.0}}, ["train.lr_max=0.5", "train.batch_size=3", "data.system=hello there", "freeze.train_lm=false"])
    cfg = from_dict(d)
    assert cfg.train.lr_max == 0.5 and cfg.train.batch_size == 3
    assert cfg.data.system == "hello there" and cfg.freeze.train_lm is False


def test_override_errors():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_resolved_roundtrip(tmp_path):
    cfg = load_config(CONFIGS / "toy.json", ["seed=5"])
    write_resolved(cfg, tmp_path / "c.json", {"command": "train"})
    assert json.loads((tmp_path / "c.json").read_text())["_run"] == {"command": "train"}
    assert read_resolved(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("name", ["overfit.json", "toy.json"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.encoder.d_model == 32 and cfg.lm.d_lm == 64


def test_overfit_config_matches_oracle_shape():
    cfg = load_config(CONFIGS / "overfit.json")
    assert cfg.train.max_steps == 300 and cfg.data.synth["n_clips"] == 32
    assert (cfg.encoder.n_layers, cfg.encoder.d_model, cfg.lm.n_layers, cfg.lm.d_lm) == (2, 32, 2, 64)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)
