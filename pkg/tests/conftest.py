import pytest
from pathlib import Path

import numpy as np
import structlog

from maxminwsl import synthdata
from maxminwsl.build_config import build_config
from maxminwsl.data_types import GenConfig, LossConfig, ModelConfig, PoolConfig, TrainConfig
from maxminwsl.nets import init_params

BASE_DATA = Path(__file__).parent.resolve().joinpath("data")
CONFIG_YAML = BASE_DATA.joinpath("config.yaml")
CONFIG_FLAT_JSON = BASE_DATA.joinpath("config_flat.json")
PRESETS = Path(__file__).parent.parent.resolve().joinpath("config")
ABLATION_YAML = PRESETS.joinpath("ablation.yaml")


@pytest.fixture(autouse=True)
def reset_logging():
    """Commands configure structlog for the process; undo it between tests."""
    yield
    structlog.reset_defaults()


@pytest.fixture(scope="session")
def test_config():
    return CONFIG_YAML


@pytest.fixture(scope="session")
def test_config_flat():
    return CONFIG_FLAT_JSON


@pytest.fixture(scope="session")
def presets_dir():
    return PRESETS


@pytest.fixture(scope="session")
def ablation_config():
    return ABLATION_YAML


@pytest.fixture(scope="session")
def tiny_gen_config():
    return GenConfig(n_train=4, n_val=2, n_test=2, n_background_only=2, height=16, width=16, seed=3)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(
        epochs=2,
        batch_size=2,
        seed=3,
        lr_decay=[],
        model=ModelConfig(in_channels=3, num_classes=2, widths=[4, 4, 4]),
        pool=PoolConfig(kmax=0.3, kmin=0.0, modalities=2),
        loss=LossConfig(),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_gen_config):
    return synthdata.generate(tiny_gen_config, workers=1)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tiny_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_dataset")
    synthdata.save(tiny_dataset, root)
    return root


@pytest.fixture(scope="session")
def tiny_params(tiny_train_config):
    return init_params(tiny_train_config.model, tiny_train_config.pool, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_run_config(tmp_path, test_config):
    """The tiny test config pointed at a fresh data and output directory."""
    return build_config(test_config, {
        "paths.data_dir": str(tmp_path / "data"),
        "paths.out_dir": str(tmp_path / "run"),
    })


@pytest.fixture
def config_missing_root(tmp_path):
    yaml_path = tmp_path / "missing_root.yaml"
    yaml_path.write_text(
        """
gen:
  n_train: 4
train:
  epochs: 1
"""
    )
    return yaml_path


@pytest.fixture
def config_unknown_key(tmp_path):
    yaml_path = tmp_path / "unknown_key.yaml"
    yaml_path.write_text(
        """
runConfig:
  train:
    loss:
      lambda: 1.0e-7
      gamma: 2.0
"""
    )
    return yaml_path


@pytest.fixture
def config_bad_value(tmp_path):
    yaml_path = tmp_path / "bad_value.yaml"
    yaml_path.write_text(
        """
runConfig:
  train:
    loss:
      t_init: 20.0
      t_max: 10.0
"""
    )
    return yaml_path


@pytest.fixture
def config_bad_mode(tmp_path):
    yaml_path = tmp_path / "bad_mode.yaml"
    yaml_path.write_text(
        """
runConfig:
  train.loss.mode: maxent
"""
    )
    return yaml_path


@pytest.fixture
def config_not_yaml(tmp_path):
    yaml_path = tmp_path / "not_yaml.yaml"
    yaml_path.write_text("runConfig: [unclosed\n  - : :\n")
    return yaml_path
