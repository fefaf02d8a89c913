#
# test_config.py
#

from pathlib import Path

import pytest

from thermo_ensemble.config import ExperimentConfig, load_config, parse_config
from thermo_ensemble.errors import ConfigError

def test_default():
    config = ExperimentConfig.default()
    assert config.experiment.n_rooms == 25
    assert config.experiment.n_train == 20
    assert config.base_models.methods == ["mlr", "dict"]
    assert config.training.blend == 0.001
    assert config.training.gamma == 0.0
    assert config.baselines.top_n == 3
    assert config.mpc.setpoint == 20.0
    assert config.mpc.band == 2.0
    assert load_config() == config

def test_invalid_keys_are_listed():
    with pytest.raises(ConfigError) as info:
        parse_config({"training": {"blend": 2.0, "bogus": 1}, "mpc": {"candidates": [500.0]}})
    assert info.value.keys == ["mpc", "training.blend", "training.bogus"]
    assert "training.bogus" in str(info.value)

def test_fractions_must_sum_to_one():
    with pytest.raises(ConfigError) as info:
        parse_config({"experiment": {"train_fraction": 0.7, "test_fraction": 0.2}})
    assert info.value.keys == ["experiment"]

def test_unknown_section():
    with pytest.raises(ConfigError) as info:
        parse_config({"plots": {}})
    assert info.value.keys == ["plots"]

@pytest.mark.parametrize("n_rooms, n_train", [(2, 1), (5, 4), (25, 20), (65, 52)])
def test_room_split(n_rooms, n_train):
    assert parse_config({"experiment": {"n_rooms": n_rooms}}).experiment.n_train == n_train

def test_load_toml(tmp_path):
    path = tmp_path / "experiment.toml"
    path.write_text(
        "[experiment]\nseed = 3\nn_rooms = 4\n\n"
        "[simulation]\ndays = 2\nsampling_minutes = 60\n\n"
        "[simulation.exogenous]\nambient_mean = 4.0\n\n"
        "[base_models]\nmethods = [\"mlr\"]\n\n"
        "[training]\nhidden = 16\nrepresentation = \"dense\"\n"
    )
    config = load_config(path)
    assert config.experiment.seed == 3
    assert config.simulation.sampling_minutes == 60
    assert config.simulation.exogenous.ambient_mean == 4.0
    assert config.base_models.methods == ["mlr"]
    assert config.training.representation == "dense"
    assert config.mpc == ExperimentConfig().mpc

def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    path = tmp_path / "broken.toml"
    path.write_text("[experiment\nseed = 1\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[simulation]\nsampling_minutes = 30\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.keys == ["simulation.sampling_minutes"]

def test_overrides():
    config = ExperimentConfig.default()
    assert config.with_overrides() is config
    changed = config.with_overrides(seed=9, output_dir="elsewhere")
    assert changed.experiment.seed == 9
    assert changed.output_dir == Path("elsewhere")
    assert config.experiment.seed == 0
    assert changed.training == config.training
