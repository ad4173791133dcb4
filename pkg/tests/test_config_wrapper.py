#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Unit tests for config_wrapper.py

import logging
import os

import pytest

from rmoe.config_wrapper import Configs
from rmoe.constants import ConfigConst, UnitTestConst
from rmoe.errors import ConfigError


def config_folder():
    return os.path.join(os.path.dirname(__file__), UnitTestConst.CONFIG_FOLDER.value)


def test_init():
    config = Configs(config_folder(), UnitTestConst.CONFIG_FILE.value)

    assert config.model_dim == ConfigConst.MODEL_DIM.value
    assert config.learning_rate == ConfigConst.LEARNING_RATE.value
    assert config.modalities == ConfigConst.MODALITIES.value
    assert config.config_path == os.path.join(config_folder(), UnitTestConst.CONFIG_FILE.value)


def test_read_config():
    config = Configs(config_folder(), UnitTestConst.CONFIG_FILE.value)
    config.read_config()

    assert config.model_dim == 16
    assert config.num_specialized == 3
    assert config.num_collaborative == 5
    assert config.alpha == 0.0
    assert config.learning_rate == 0.001
    assert config.modalities == ["opt", "sar_l2"]
    assert config.normalize is False
    assert config.log_file == "test.log"
    assert config.log_level == logging.DEBUG
    # Unset keys keep their defaults
    assert config.expansion_factor == ConfigConst.EXPANSION_FACTOR.value
    assert config.weight_decay == ConfigConst.WEIGHT_DECAY.value
    config.validate()


def test_read_json_config():
    config = Configs(config_folder(), UnitTestConst.CONFIG_JSON.value)
    document = config.read_config()

    assert document["model_dim"] == 32
    assert config.model_dim == 32
    assert config.steps == 40
    assert isinstance(config.steps, int)
    assert config.mask_ratio == 0.75
    assert config.log_file == ""
    assert config.log_level == logging.WARNING
    config.validate()
    assert config.modalities == ["ms", "sar_l1"]


def test_missing_config_keeps_defaults():
    config = Configs(config_folder(), "missing.json")
    assert config.read_config() is None
    assert config.model_dim == ConfigConst.MODEL_DIM.value


def test_validate_defaults():
    Configs(config_path=None).validate()


@pytest.mark.parametrize("field, value", [("learning_rate", 0.0), ("alpha", -0.1), ("mask_ratio", 1.2),
                                          ("top_k", 5), ("num_heads", 3), ("patch_size", 5), ("modalities", []),
                                          ("modalities", ["lidar"])])
def test_validate_rejects(field, value):
    config = Configs(config_path=None)
    setattr(config, field, value)
    with pytest.raises(ConfigError):
        config.validate()


def test_dict_round_trip():
    config = Configs(config_folder(), UnitTestConst.CONFIG_FILE.value)
    config.read_config()
    copy = Configs.from_dict(config.to_dict())
    assert copy.to_dict() == config.to_dict()


def test_encoder_config():
    config = Configs(config_path=None).apply_dict({"model_dim": 16, "expansion_factor": 2, "modalities": ["sar_l1"]})
    cfg = config.encoder_config()
    assert cfg.model_dim == 16
    assert cfg.hidden_dim == 32
    assert cfg.num_patches == (config.image_size // config.patch_size) ** 2


@pytest.mark.parametrize("value, expected", [("false", False), ("False", False), ("no", False), ("0", False),
                                             ("off", False), ("true", True), ("yes", True), ("on", True),
                                             (False, False), (True, True), (0, False), (1, True)])
def test_apply_dict_boolean_spelling(value, expected):
    assert Configs(config_path=None).apply_dict({"normalize": value}).normalize is expected


@pytest.mark.parametrize("field, value", [("normalize", "maybe"), ("normalize", 2), ("steps", "many"),
                                          ("alpha", None)])
def test_apply_dict_rejects_bad_values(field, value):
    with pytest.raises(ConfigError):
        Configs(config_path=None).apply_dict({field: value})
