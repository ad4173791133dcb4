#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Enums for constants to be used throughout rmoe

import logging
from enum import Enum


class Modality(Enum):
    OPT = "opt"
    MS = "ms"
    SAR_L1 = "sar_l1"
    SAR_L2 = "sar_l2"

    @property
    def channels(self):
        return ModalityConst.CHANNELS.value[self.value]

    @property
    def code(self):
        # Modality byte used by the RAW image header
        return ModalityConst.CODES.value[self.value]

    @property
    def target_channels(self):
        # SAR_L1 reconstructs one real power value per pixel
        if self is Modality.SAR_L1:
            return 1
        return self.channels

    @staticmethod
    def from_code(code):
        for modality in Modality:
            if modality.code == code:
                return modality
        raise ValueError(f"Unknown modality code {code}")

    @staticmethod
    def parse(text):
        if isinstance(text, Modality):
            return text
        return Modality(str(text).lower())


class ModalityConst(Enum):
    CHANNELS = {
        "opt": 3,
        "ms": 4,
        "sar_l1": 8,
        "sar_l2": 1
    }
    CODES = {
        "opt": 0,
        "ms": 1,
        "sar_l1": 2,
        "sar_l2": 3
    }
    ORDER = ["opt", "ms", "sar_l1", "sar_l2"]

    # SAR_L1 channel layout, interleaved (re, im) per polarization
    POLARIZATIONS = ["hh", "hv", "vh", "vv"]


class ConfigConst(Enum):
    # Default settings that are loaded from config
    CONFIG_PATH = "rmoe.json"

    # Model Settings
    MODEL_DIM = 64
    NUM_BLOCKS = 2
    NUM_HEADS = 4
    EXPANSION_FACTOR = 4
    NUM_SPECIALIZED = 4
    NUM_COLLABORATIVE = 4
    TOP_K = 2
    INIT_STD = 0.02

    # Training Settings
    ALPHA = 0.01
    LEARNING_RATE = 2e-4
    WEIGHT_DECAY = 0.05
    BETA1 = 0.9
    BETA2 = 0.999
    ADAM_EPS = 1e-8
    CLIP_NORM = 1.0
    STEPS = 500
    BATCH_SIZE = 8
    SEED = 7
    LOG_EVERY = 50

    # Data Settings
    MODALITIES = ["opt", "ms", "sar_l1", "sar_l2"]
    IMAGE_SIZE = 32
    PATCH_SIZE = 8
    MASK_RATIO = 0.6
    CORPUS_SIZE = 64
    STATS_SAMPLES = 32
    NORMALIZE = True

    # Logging Settings
    LOGGING_FILE = "rmoe.log"
    LOGGING_LEVEL = logging.INFO

    # Environment
    THREADS_ENV = "RMOE_THREADS"
    DEFAULT_THREADS = 1


class NumConst(Enum):
    LAYER_NORM_EPS = 1e-5
    SVD_SWEEPS_PER_DIM = 100
    SVD_TOLERANCE = 1e-10
    # Bound on the temporary m x k x n product materialized by matmul
    MATMUL_CHUNK_ELEMENTS = 1 << 20
    GELU_COEFF = 0.044715


class GradConst(Enum):
    EPS = 1e-5
    TOL = 1e-4
    ATOL = 1e-9
    # Absolute floor of the float64 model check, relative to the largest gradient entry
    ATOL_SCALE = 1e-8
    REL_FLOOR = 1e-8
    COORDS_PER_PARAM = 6
    SEEDS = 5
    F32_TOL = 1e-4
    F32_ATOL = 1e-6
    # Absolute floor of the float32 check, relative to the largest gradient entry
    F32_ATOL_SCALE = 1e-4
    # Weight scale-up of the model-level checks
    MODEL_SCALE = 10.0


class SurgeryConst(Enum):
    PERCENTILE = 75
    STRATEGY_EP = "ep"
    STRATEGY_KS = "ks"
    STRATEGY_KA = "ka"
    STRATEGY_KC = "kc"
    STRATEGIES = ["ep", "ks", "ka", "kc"]
    PROVENANCE = {
        "ks": "sum",
        "ka": "average",
        "kc": "compress"
    }


class FormatConst(Enum):
    # RAW image format
    RAW_MAGIC = b"RMRW"
    RAW_VERSION = 1
    RAW_EXTENSION = "raw"

    # Checkpoint format
    CKPT_MAGIC = b"RMOE"
    CKPT_VERSION = 2

    MANIFEST_FILE = "manifest.json"
    PREVIEW_EXTENSION = "png"
    CSV_HEADER = ["patch", "row", "col", "masked", "mse"]


class UnitTestConst(Enum):
    TEST_FOLDER = "tests/"
    TEMP_FOLDER = "test_temp"
    CONFIG_FOLDER = "test_config_wrapper_content"
    CONFIG_FILE = ".testconfig"
    CONFIG_JSON = "testconfig.json"
    FILE_OPERATIONS_FOLDER = "test_file_operations_content"
    MANIFEST_FILE = "manifest.json"
    RUNNER_FOLDER = "test_runner_content"
    RUNNER_CONFIG = "tiny.json"
