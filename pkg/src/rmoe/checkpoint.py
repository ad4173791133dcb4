#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Self-describing checkpoint files
#
# Layout: magic "RMOE" | version u16 LE | metadata length u32 LE | metadata crc32 u32 LE | metadata JSON (utf-8) |
# payload
# The payload is the concatenation of float32 LE row-major tensor blobs in metadata directory order. Each directory
# entry carries the blob's offset into the payload, its shape and a zlib crc32 of its bytes.

import json
import logging
import struct
import zlib

import numpy

from rmoe.config_wrapper import Configs
from rmoe.constants import FormatConst
from rmoe.errors import CheckpointError, ChecksumError, RmoeError, VersionError
from rmoe.expert_surgery import ActivationStats
from rmoe.modal_data import NormStats
from rmoe.rmoe_core import RMoEModel

PREFIX = struct.Struct("<4sHII")
BLOB_DTYPE = numpy.dtype("<f4")
GROUP_PARAMS = "params"
GROUP_FIRST_MOMENT = "m"
GROUP_SECOND_MOMENT = "v"


class Checkpoint:
    """
    Attributes
    ----------
    model:RMoEModel
    config:Configs
    step:int
    moments:dict or None
        {"m": {name: array}, "v": {name: array}} optimizer moments
    activation_stats:ActivationStats or None
    norm_stats:NormStats or None
    """

    def __init__(self, model, config, step=0, moments=None, activation_stats=None, norm_stats=None):
        self.model = model
        self.config = config
        self.step = step
        self.moments = moments
        self.activation_stats = activation_stats
        self.norm_stats = norm_stats
        return

    @staticmethod
    def from_state(state, activation_stats=None):
        return Checkpoint(state.model, state.config, state.step, state.moments, activation_stats, state.stats)


def _tensor_groups(checkpoint):
    yield GROUP_PARAMS, list(checkpoint.model.named_parameters())
    if checkpoint.moments is not None:
        yield GROUP_FIRST_MOMENT, list(checkpoint.moments["m"].items())
        yield GROUP_SECOND_MOMENT, list(checkpoint.moments["v"].items())


def save_checkpoint(checkpoint, path):
    directory = []
    blobs = []
    offset = 0
    for group, tensors in _tensor_groups(checkpoint):
        for name, array in tensors:
            blob = numpy.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
            directory.append({"group": group, "name": name, "offset": offset, "shape": list(array.shape),
                              "crc32": zlib.crc32(blob) & 0xFFFFFFFF})
            blobs.append(blob)
            offset += len(blob)

    config = checkpoint.config.to_dict() if checkpoint.config is not None else None
    metadata = {
        "config": config,
        "step": int(checkpoint.step),
        "architecture": checkpoint.model.architecture(),
        "tensors": directory,
        "payload_bytes": offset,
        "activation_stats": checkpoint.activation_stats.to_dict() if checkpoint.activation_stats else None,
        "normalization": checkpoint.norm_stats.to_dict() if checkpoint.norm_stats else None,
    }
    encoded = json.dumps(metadata).encode("utf-8")
    with open(path, "wb") as file:
        file.write(PREFIX.pack(FormatConst.CKPT_MAGIC.value, FormatConst.CKPT_VERSION.value, len(encoded),
                               zlib.crc32(encoded) & 0xFFFFFFFF))
        file.write(encoded)
        for blob in blobs:
            file.write(blob)
    logging.info(f"Saved checkpoint at step {checkpoint.step} with {len(directory)} tensors to {path}")
    return path


def read_metadata(data, path=""):
    if len(data) < PREFIX.size:
        raise CheckpointError(f"'{path}' is truncated before the checkpoint header")
    magic, version, length, digest = PREFIX.unpack_from(data, 0)
    if magic != FormatConst.CKPT_MAGIC.value:
        raise CheckpointError(f"'{path}' is not a checkpoint (magic {magic!r})")
    if version != FormatConst.CKPT_VERSION.value:
        raise VersionError(f"'{path}' has checkpoint version {version}, this build reads "
                           f"{FormatConst.CKPT_VERSION.value}")
    if len(data) < PREFIX.size + length:
        raise CheckpointError(f"'{path}' is truncated inside its metadata")
    encoded = bytes(data[PREFIX.size:PREFIX.size + length])
    if zlib.crc32(encoded) & 0xFFFFFFFF != digest:
        raise ChecksumError(f"'{path}' metadata fails its checksum")
    try:
        metadata = json.loads(encoded.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"'{path}' has unreadable metadata: {e}")
    if not isinstance(metadata, dict):
        raise CheckpointError(f"'{path}' metadata is not a JSON object")
    return metadata, PREFIX.size + length


def _read_tensors(metadata, payload, expected, path):
    groups = {GROUP_PARAMS: {}, GROUP_FIRST_MOMENT: {}, GROUP_SECOND_MOMENT: {}}
    cursor = 0
    for entry in metadata["tensors"]:
        shape = tuple(int(extent) for extent in entry["shape"])
        size = int(numpy.prod(shape, dtype=numpy.int64)) * BLOB_DTYPE.itemsize
        if entry["group"] not in groups:
            raise CheckpointError(f"'{path}' directory entry '{entry['name']}' has unknown group '{entry['group']}'")
        if entry["offset"] != cursor or cursor + size > expected:
            raise CheckpointError(f"'{path}' directory entry '{entry['name']}' does not match the payload layout")
        blob = payload[cursor:cursor + size]
        if zlib.crc32(blob) & 0xFFFFFFFF != entry["crc32"]:
            raise ChecksumError(f"'{path}' tensor '{entry['name']}' fails its checksum")
        groups[entry["group"]][entry["name"]] = numpy.frombuffer(blob, dtype=BLOB_DTYPE).reshape(shape).astype(
            numpy.float32)
        cursor += size
    if cursor != expected:
        raise CheckpointError(f"'{path}' directory covers {cursor} of {expected} payload bytes")
    return groups


def load_checkpoint(path):
    with open(path, "rb") as file:
        data = file.read()
    metadata, start = read_metadata(data, path)

    payload = memoryview(data)[start:]
    try:
        expected = int(metadata.get("payload_bytes", -1))
        if len(payload) < expected:
            raise CheckpointError(f"'{path}' payload is truncated ({len(payload)} of {expected} bytes)")
        if len(payload) > expected:
            raise CheckpointError(f"'{path}' has {len(payload) - expected} bytes not covered by its tensor directory")
        groups = _read_tensors(metadata, payload, expected, path)

        model = RMoEModel.from_architecture(metadata["architecture"], groups[GROUP_PARAMS])
        config = Configs.from_dict(metadata["config"]) if metadata.get("config") else None
        moments = None
        if groups[GROUP_FIRST_MOMENT]:
            moments = {"m": groups[GROUP_FIRST_MOMENT], "v": groups[GROUP_SECOND_MOMENT]}
        stats = ActivationStats.from_dict(metadata["activation_stats"]) if metadata.get("activation_stats") else None
        norm = NormStats.from_dict(metadata["normalization"]) if metadata.get("normalization") else None
        step = int(metadata["step"])
    except RmoeError:
        raise
    except (AttributeError, IndexError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"'{path}' has malformed metadata: {type(e).__name__}: {e}") from e
    logging.info(f"Loaded checkpoint '{path}' at step {step}")
    return Checkpoint(model, config, step, moments, stats, norm)
