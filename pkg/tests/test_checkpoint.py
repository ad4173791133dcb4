#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Unit tests for checkpoint.py

import json
import os
import struct
import zlib

import numpy
import pytest

from rmoe.checkpoint import PREFIX, Checkpoint, load_checkpoint, read_metadata, save_checkpoint
from rmoe.config_wrapper import Configs
from rmoe.constants import FormatConst, Modality, UnitTestConst
from rmoe.errors import CheckpointError, ChecksumError, VersionError
from rmoe.expert_surgery import ActivationStats, profile_activations
from rmoe.file_operations import FileOperations
from rmoe.harness import pretrain, tiny_batch
from rmoe.rmoe_core import RMoEModel


def temp_path(name):
    folder = os.path.join(os.path.dirname(__file__), UnitTestConst.TEMP_FOLDER.value)
    FileOperations.ensure_folder(folder)
    path = os.path.join(folder, name)
    if os.path.exists(path):
        os.remove(path)
    return path


def trained_state():
    config = Configs(config_path=None).apply_dict({
        "model_dim": 8, "num_blocks": 1, "num_heads": 2, "expansion_factor": 2, "num_specialized": 2,
        "num_collaborative": 2, "top_k": 1, "image_size": 8, "patch_size": 4, "modalities": ["opt", "sar_l1"],
        "corpus_size": 4, "batch_size": 2, "stats_samples": 4, "steps": 2, "seed": 3, "log_every": 0})
    return pretrain(config)


def rewrite(path, data):
    with open(path, "wb") as file:
        file.write(data)


def read(path):
    with open(path, "rb") as file:
        return file.read()


def test_round_trip_is_bit_exact():
    path = temp_path("round_trip.ckpt")
    state = trained_state()
    batch = tiny_batch(state.model.cfg, 0, mask_ratio=0.0)
    stats = profile_activations(state.model, [batch])
    save_checkpoint(Checkpoint.from_state(state, stats), path)
    loaded = load_checkpoint(path)

    for (name, a), (other, b) in zip(state.model.named_parameters(), loaded.model.named_parameters()):
        assert name == other
        assert a.tobytes() == b.tobytes(), name
    before = state.model.forward(batch).predictions
    after = loaded.model.forward(batch).predictions
    for modality in before:
        assert before[modality].value.tobytes() == after[modality].value.tobytes()

    assert loaded.step == state.step
    assert loaded.config.to_dict() == state.config.to_dict()
    for group in ("m", "v"):
        for name, array in state.moments[group].items():
            assert array.tobytes() == loaded.moments[group][name].tobytes()
    assert loaded.norm_stats.power_scale == state.stats.power_scale
    assert numpy.array_equal(loaded.activation_stats.frequencies(0, Modality.OPT), stats.frequencies(0, Modality.OPT))
    os.remove(path)


def test_checkpoint_without_optional_parts():
    path = temp_path("bare.ckpt")
    model = RMoEModel.initialize(trained_state().model.cfg, 5)
    save_checkpoint(Checkpoint(model, None), path)
    loaded = load_checkpoint(path)
    assert loaded.config is None
    assert loaded.moments is None
    assert loaded.activation_stats is None
    assert loaded.model.count_parameters() == model.count_parameters()
    os.remove(path)


def test_single_byte_corruption_is_detected():
    path = temp_path("corrupt.ckpt")
    save_checkpoint(Checkpoint.from_state(trained_state()), path)
    data = bytearray(read(path))
    data[-3] ^= 0x01
    rewrite(path, bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    os.remove(path)


def test_unknown_version():
    path = temp_path("version.ckpt")
    save_checkpoint(Checkpoint.from_state(trained_state()), path)
    data = bytearray(read(path))
    struct.pack_into("<H", data, 4, FormatConst.CKPT_VERSION.value + 1)
    rewrite(path, bytes(data))
    with pytest.raises(VersionError):
        load_checkpoint(path)
    os.remove(path)


def test_bad_magic():
    with pytest.raises(CheckpointError):
        read_metadata(PREFIX.pack(b"NOPE", FormatConst.CKPT_VERSION.value, 0, 0), "bad")


def test_truncated_header():
    with pytest.raises(CheckpointError):
        read_metadata(b"RMO", "short")


def test_truncated_payload():
    path = temp_path("truncated.ckpt")
    save_checkpoint(Checkpoint.from_state(trained_state()), path)
    rewrite(path, read(path)[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    os.remove(path)


def test_trailing_bytes():
    path = temp_path("trailing.ckpt")
    save_checkpoint(Checkpoint.from_state(trained_state()), path)
    rewrite(path, read(path) + b"\x00\x00\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    os.remove(path)


def test_metadata_is_self_describing():
    path = temp_path("metadata.ckpt")
    state = trained_state()
    save_checkpoint(Checkpoint.from_state(state, ActivationStats()), path)
    metadata, start = read_metadata(read(path), path)
    assert start > PREFIX.size
    assert metadata["architecture"]["encoder"]["modalities"] == ["opt", "sar_l1"]
    groups = {entry["group"] for entry in metadata["tensors"]}
    assert groups == {"params", "m", "v"}
    os.remove(path)


def test_metadata_corruption_is_detected():
    path = temp_path("metadata_flip.ckpt")
    save_checkpoint(Checkpoint.from_state(trained_state()), path)
    data = bytearray(read(path))
    position = data.find(b'"alpha": 0.01')
    assert PREFIX.size <= position
    data[position + len(b'"alpha": 0.0')] = ord("9")
    rewrite(path, bytes(data))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    os.remove(path)


def resealed(path, edit):
    # Rewrites the metadata through 'edit' with a matching digest
    data = read(path)
    metadata, start = read_metadata(data, path)
    edit(metadata)
    encoded = json.dumps(metadata).encode("utf-8")
    rewrite(path, PREFIX.pack(FormatConst.CKPT_MAGIC.value, FormatConst.CKPT_VERSION.value, len(encoded),
                              zlib.crc32(encoded) & 0xFFFFFFFF) + encoded + data[start:])


@pytest.mark.parametrize("edit", [
    lambda metadata: metadata["tensors"][0].update(group="pbrams"),
    lambda metadata: metadata["tensors"][0].update(shape="wide"),
    lambda metadata: metadata.pop("architecture"),
    lambda metadata: metadata["architecture"]["encoder"].update(modalities=["lidar"]),
    lambda metadata: metadata.update(step="late"),
])
def test_malformed_metadata_raises_checkpoint_error(edit):
    path = temp_path("malformed.ckpt")
    save_checkpoint(Checkpoint.from_state(trained_state()), path)
    resealed(path, edit)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    os.remove(path)


def test_resealed_metadata_still_loads():
    path = temp_path("resealed.ckpt")
    save_checkpoint(Checkpoint.from_state(trained_state()), path)
    resealed(path, lambda metadata: metadata.update(step=7))
    assert load_checkpoint(path).step == 7
    os.remove(path)
