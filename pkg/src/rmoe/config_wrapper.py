#!/usr/bin/python3
# -*- coding:utf-8 -*-

import configparser
import json
import logging
import os

from rmoe.constants import ConfigConst, Modality
from rmoe.errors import ConfigError
from rmoe.file_operations import FileOperations
from rmoe.rmoe_core import EncoderConfig


class Configs:
    """
    A class used to wrap training config from a config file for rmoe.

    Attributes
    ----------
    Model, training, data and logging settings, each defaulting to its ConfigConst value.

    Methods
    -------
    read_config()
        Retrieves config from 'config_path' and applies it to the variables in this class. '.json' files are read as a
        JSON document with keys mirroring the attribute names (and an optional "logging" object); anything else is read
        as an INI file with [Model], [Training], [Data] and [Logging] sections. Missing files leave the defaults.
        Returns the parsed document.

    validate()
        Raises ConfigError when settings are inconsistent.

    to_dict() / from_dict(values)
        Self-describing form stored in checkpoints.

    encoder_config()
        Returns the EncoderConfig the model is built from.
    """

    MODEL_FIELDS = ["model_dim", "num_blocks", "num_heads", "expansion_factor", "num_specialized", "num_collaborative",
                    "top_k", "init_std"]
    TRAINING_FIELDS = ["alpha", "learning_rate", "weight_decay", "beta1", "beta2", "adam_eps", "clip_norm", "steps",
                       "batch_size", "seed", "log_every"]
    DATA_FIELDS = ["modalities", "image_size", "patch_size", "mask_ratio", "corpus_size", "stats_samples", "normalize"]

    def __init__(self, path=os.getcwd(), config_path=ConfigConst.CONFIG_PATH.value):
        # Paths
        self.file = FileOperations(path)
        self.config_path = self.file.get_full_path(config_path) if config_path else None

        # Set Defaults
        # Model Settings
        self.model_dim = ConfigConst.MODEL_DIM.value
        self.num_blocks = ConfigConst.NUM_BLOCKS.value
        self.num_heads = ConfigConst.NUM_HEADS.value
        self.expansion_factor = ConfigConst.EXPANSION_FACTOR.value
        self.num_specialized = ConfigConst.NUM_SPECIALIZED.value
        self.num_collaborative = ConfigConst.NUM_COLLABORATIVE.value
        self.top_k = ConfigConst.TOP_K.value
        self.init_std = ConfigConst.INIT_STD.value

        # Training Settings
        self.alpha = ConfigConst.ALPHA.value
        self.learning_rate = ConfigConst.LEARNING_RATE.value
        self.weight_decay = ConfigConst.WEIGHT_DECAY.value
        self.beta1 = ConfigConst.BETA1.value
        self.beta2 = ConfigConst.BETA2.value
        self.adam_eps = ConfigConst.ADAM_EPS.value
        self.clip_norm = ConfigConst.CLIP_NORM.value
        self.steps = ConfigConst.STEPS.value
        self.batch_size = ConfigConst.BATCH_SIZE.value
        self.seed = ConfigConst.SEED.value
        self.log_every = ConfigConst.LOG_EVERY.value

        # Data Settings
        self.modalities = list(ConfigConst.MODALITIES.value)
        self.image_size = ConfigConst.IMAGE_SIZE.value
        self.patch_size = ConfigConst.PATCH_SIZE.value
        self.mask_ratio = ConfigConst.MASK_RATIO.value
        self.corpus_size = ConfigConst.CORPUS_SIZE.value
        self.stats_samples = ConfigConst.STATS_SAMPLES.value
        self.normalize = ConfigConst.NORMALIZE.value

        # Logging Settings
        self.log_file = ConfigConst.LOGGING_FILE.value
        self.log_level = ConfigConst.LOGGING_LEVEL.value

        return

    def read_config(self):
        if self.config_path is None or not os.path.exists(self.config_path):
            logging.warning(f"Config file '{self.config_path}' not found, using defaults")
            return None

        if self.config_path.endswith(".json"):
            try:
                document = FileOperations.read_json(self.config_path)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Unable to parse '{self.config_path}': {e}")
            self.apply_dict(document)
            return document

        # Method to read config file settings
        config = configparser.ConfigParser()
        config.read(self.config_path)

        # Model Settings
        self.model_dim = config.getint("Model", "model_dim", fallback=ConfigConst.MODEL_DIM.value)
        self.num_blocks = config.getint("Model", "num_blocks", fallback=ConfigConst.NUM_BLOCKS.value)
        self.num_heads = config.getint("Model", "num_heads", fallback=ConfigConst.NUM_HEADS.value)
        self.expansion_factor = config.getint("Model", "expansion_factor",
                                              fallback=ConfigConst.EXPANSION_FACTOR.value)
        self.num_specialized = config.getint("Model", "num_specialized", fallback=ConfigConst.NUM_SPECIALIZED.value)
        self.num_collaborative = config.getint("Model", "num_collaborative",
                                               fallback=ConfigConst.NUM_COLLABORATIVE.value)
        self.top_k = config.getint("Model", "top_k", fallback=ConfigConst.TOP_K.value)
        self.init_std = config.getfloat("Model", "init_std", fallback=ConfigConst.INIT_STD.value)

        # Training Settings
        self.alpha = config.getfloat("Training", "alpha", fallback=ConfigConst.ALPHA.value)
        self.learning_rate = config.getfloat("Training", "learning_rate", fallback=ConfigConst.LEARNING_RATE.value)
        self.weight_decay = config.getfloat("Training", "weight_decay", fallback=ConfigConst.WEIGHT_DECAY.value)
        self.beta1 = config.getfloat("Training", "beta1", fallback=ConfigConst.BETA1.value)
        self.beta2 = config.getfloat("Training", "beta2", fallback=ConfigConst.BETA2.value)
        self.adam_eps = config.getfloat("Training", "adam_eps", fallback=ConfigConst.ADAM_EPS.value)
        self.clip_norm = config.getfloat("Training", "clip_norm", fallback=ConfigConst.CLIP_NORM.value)
        self.steps = config.getint("Training", "steps", fallback=ConfigConst.STEPS.value)
        self.batch_size = config.getint("Training", "batch_size", fallback=ConfigConst.BATCH_SIZE.value)
        self.seed = config.getint("Training", "seed", fallback=ConfigConst.SEED.value)
        self.log_every = config.getint("Training", "log_every", fallback=ConfigConst.LOG_EVERY.value)

        # Data Settings
        self.modalities = []
        for text in config.get("Data", "modalities", fallback=",".join(ConfigConst.MODALITIES.value)).split(","):
            if text.strip() != "":
                self.modalities.append(text.strip())
        self.image_size = config.getint("Data", "image_size", fallback=ConfigConst.IMAGE_SIZE.value)
        self.patch_size = config.getint("Data", "patch_size", fallback=ConfigConst.PATCH_SIZE.value)
        self.mask_ratio = config.getfloat("Data", "mask_ratio", fallback=ConfigConst.MASK_RATIO.value)
        self.corpus_size = config.getint("Data", "corpus_size", fallback=ConfigConst.CORPUS_SIZE.value)
        self.stats_samples = config.getint("Data", "stats_samples", fallback=ConfigConst.STATS_SAMPLES.value)
        self.normalize = config.getboolean("Data", "normalize", fallback=ConfigConst.NORMALIZE.value)

        # Logging Settings
        self.log_file = config.get("Logging", "log_file", fallback=ConfigConst.LOGGING_FILE.value)
        self.log_level = config.getint("Logging", "log_level", fallback=ConfigConst.LOGGING_LEVEL.value)

        return config

    @staticmethod
    def coerce(field, default, value):
        # Coerce 'value' to the type of 'default'; booleans follow configparser's spelling
        try:
            if isinstance(default, bool):
                if isinstance(value, str):
                    return configparser.ConfigParser.BOOLEAN_STATES[value.strip().lower()]
                if isinstance(value, bool) or value in (0, 1):
                    return bool(value)
                raise ValueError(value)
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
            if isinstance(default, list):
                return [value] if isinstance(value, str) else list(value)
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"Invalid value {value!r} for {field}, expected {type(default).__name__}")
        return value

    def apply_dict(self, values):
        for field in Configs.MODEL_FIELDS + Configs.TRAINING_FIELDS + Configs.DATA_FIELDS:
            if field in values:
                setattr(self, field, Configs.coerce(field, getattr(self, field), values[field]))
        logging_values = values.get("logging", {})
        self.log_file = logging_values.get("log_file", self.log_file)
        self.log_level = int(logging_values.get("log_level", self.log_level))
        return self

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if not 1 <= self.top_k <= min(self.num_specialized, self.num_collaborative):
            raise ConfigError(f"top_k {self.top_k} must lie in [1, min(num_specialized, num_collaborative)]")
        if self.num_heads <= 0 or self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.steps < 0 or self.batch_size <= 0 or self.corpus_size <= 0:
            raise ConfigError("steps, batch_size and corpus_size must be positive")
        try:
            self.modalities = [Modality.parse(m).value for m in self.modalities]
        except ValueError as e:
            raise ConfigError(f"Unknown modality in {self.modalities}: {e}")
        if len(self.modalities) == 0:
            raise ConfigError("At least one modality must be enabled")
        return self

    def to_dict(self):
        values = {field: getattr(self, field)
                  for field in Configs.MODEL_FIELDS + Configs.TRAINING_FIELDS + Configs.DATA_FIELDS}
        values["logging"] = {"log_file": self.log_file, "log_level": self.log_level}
        return values

    @staticmethod
    def from_dict(values):
        return Configs(config_path=None).apply_dict(values)

    def encoder_config(self):
        return EncoderConfig(model_dim=self.model_dim, num_blocks=self.num_blocks, num_heads=self.num_heads,
                             expansion_factor=self.expansion_factor, patch_size=self.patch_size,
                             image_size=self.image_size, num_specialized=self.num_specialized,
                             num_collaborative=self.num_collaborative, top_k=self.top_k,
                             modalities=self.modalities, init_std=self.init_std)
