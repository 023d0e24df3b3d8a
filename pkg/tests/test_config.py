import json

import pytest

from dara.config import RUN_SCHEMA, RunConfig
from dara.errors import ConfigError
from dara.model import ModelConfig
from dara.train import TaskConfig, TrainPlan


def test_defaults_use_desk_model():
    run = RunConfig()
    assert run.model == ModelConfig.desk()
    assert run.pretrain.phase == "pretrain" and run.adapt.phase == "adapt"


def test_json_round_trip(tmp_path):
    run = RunConfig(name="x", model=ModelConfig.tiny(), task=TaskConfig(n_train=10),
                    adapt=TrainPlan.scaled(4, lr_model=3e-4), regime="ra_only", seeds=(3, 4))
    path = tmp_path / "run.json"
    run.save(path)
    back = RunConfig.load(path)
    assert back == run
    assert back.to_json() == run.to_json()
    assert json.loads(path.read_text())["schema"] == RUN_SCHEMA


def test_partial_sections_fill_from_defaults():
    run = RunConfig.from_dict({"model": {"fusion_layers": 3}, "adapt": {"epochs": 9},
                               "seeds": 5})
    assert run.model == ModelConfig.desk().replace(fusion_layers=3)
    assert run.adapt.decay_epoch == 6 and run.adapt.phase == "adapt"
    assert run.adapt.adapter_lr_mult == RunConfig().adapt.adapter_lr_mult
    assert run.seeds == (5,)
    pre = RunConfig.from_dict({"pretrain": {"epochs": 3}}).pretrain
    assert pre.phase == "pretrain" and pre.lr_backbone == RunConfig().pretrain.lr_backbone


def test_with_seed_threads_plan_seeds():
    run = RunConfig(seeds=(0, 1, 2)).with_seed(7)
    assert run.seeds == (7,) and run.pretrain.seed == 7 and run.adapt.seed == 7


@pytest.mark.parametrize("bad", [
    {"schema": "other/9"},
    {"colour": 1},
    {"model": {"colour": 1}},
    {"adapt": {"epochs": 0}},
    {"regime": "half"},
    {"seeds": []},
    {"task": 3},
    {"model": {"share_dim": 10_000}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_invalid_json():
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_json("[1, 2]")
