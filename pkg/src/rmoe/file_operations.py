#!/usr/bin/python3
# -*- coding:utf-8 -*-

import csv
import json
import logging
import os

import numpy

from rmoe.constants import FormatConst, Modality
from rmoe.errors import MagicMismatchError, ModalityMismatchError, RawFormatError, TruncatedPayloadError

# magic | version u16 | modality u8 | reserved u8 | height u32 | width u32 | channels u32, little endian
RAW_HEADER = numpy.dtype([("magic", "S4"), ("version", "<u2"), ("modality", "u1"), ("reserved", "u1"),
                          ("height", "<u4"), ("width", "<u4"), ("channels", "<u4")])
RAW_PAYLOAD = numpy.dtype("<f4")


class FileOperations:
    """
    A class used to provide file operations for rmoe.

    Attributes
    ----------
    path:string
        path for file operations

    Methods
    -------
    get_full_path(path)
        Returns 'path' joined onto the operation folder.

    read_raw(path)
        Reads a RAW image, returns (Modality, pixels [H x W x C] float32). Raises a RawFormatError subclass on any
        header or payload inconsistency; never returns a partial image.

    write_raw(path, modality, pixels)
        Writes pixels [H x W x C] as a RAW image.

    read_manifest(path) / write_manifest(path, entries)
        JSON document listing image files and their declared modalities. Relative paths are relative to the
        manifest's folder.

    read_json(path) / write_json(path, document)

    write_csv(path, header, rows)
    """

    def __init__(self, path=os.getcwd()):
        self.path = path
        return

    def get_full_path(self, path):
        full_path = os.path.join(self.path, path)
        return full_path

    # RAW images

    @staticmethod
    def read_raw(path):
        with open(path, "rb") as file:
            data = file.read()

        if len(data) < RAW_HEADER.itemsize:
            raise TruncatedPayloadError(f"'{path}' is shorter than a RAW header ({len(data)} bytes)")
        header = numpy.frombuffer(data, dtype=RAW_HEADER, count=1)[0]
        if bytes(header["magic"]) != FormatConst.RAW_MAGIC.value:
            raise MagicMismatchError(f"'{path}' does not start with {FormatConst.RAW_MAGIC.value!r}")
        if int(header["version"]) != FormatConst.RAW_VERSION.value:
            raise RawFormatError(f"'{path}' has unsupported RAW version {int(header['version'])}")
        try:
            modality = Modality.from_code(int(header["modality"]))
        except ValueError as e:
            raise ModalityMismatchError(f"'{path}': {e}")

        height, width, channels = int(header["height"]), int(header["width"]), int(header["channels"])
        if channels != modality.channels:
            raise ModalityMismatchError(f"'{path}' declares {modality.value} but stores {channels} channels")

        expected = height * width * channels * RAW_PAYLOAD.itemsize
        payload = len(data) - RAW_HEADER.itemsize
        if payload < expected:
            raise TruncatedPayloadError(f"'{path}' payload has {payload} bytes, expected {expected}")
        if payload > expected:
            raise RawFormatError(f"'{path}' has {payload - expected} bytes after the payload")

        pixels = numpy.frombuffer(data, dtype=RAW_PAYLOAD, offset=RAW_HEADER.itemsize)
        return modality, pixels.reshape(height, width, channels).astype(numpy.float32)

    @staticmethod
    def write_raw(path, modality, pixels):
        modality = Modality.parse(modality)
        pixels = numpy.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[-1] != modality.channels:
            raise ModalityMismatchError(f"{modality.value} needs [H x W x {modality.channels}] pixels, "
                                        f"got {pixels.shape}")
        header = numpy.zeros(1, dtype=RAW_HEADER)
        header["magic"] = FormatConst.RAW_MAGIC.value
        header["version"] = FormatConst.RAW_VERSION.value
        header["modality"] = modality.code
        header["height"], header["width"], header["channels"] = pixels.shape
        with open(path, "wb") as file:
            file.write(header.tobytes())
            file.write(numpy.ascontiguousarray(pixels, dtype=RAW_PAYLOAD).tobytes())
        return path

    # Manifests

    @staticmethod
    def read_manifest(path):
        document = FileOperations.read_json(path)
        folder = os.path.dirname(os.path.abspath(path))
        entries = []
        for item in document.get("images", []):
            image_path = item["path"]
            if not os.path.isabs(image_path):
                image_path = os.path.join(folder, image_path)
            entries.append((image_path, Modality.parse(item["modality"])))
        if len(entries) == 0:
            logging.warning(f"Manifest '{path}' lists no images")
        return entries

    @staticmethod
    def write_manifest(path, entries):
        folder = os.path.dirname(os.path.abspath(path))
        images = []
        for image_path, modality in entries:
            if os.path.isabs(image_path):
                image_path = os.path.relpath(image_path, folder)
            images.append({"path": image_path, "modality": Modality.parse(modality).value})
        return FileOperations.write_json(path, {"version": FormatConst.RAW_VERSION.value, "images": images})

    # Documents

    @staticmethod
    def read_json(path):
        with open(path, encoding="utf-8") as file:
            return json.load(file)

    @staticmethod
    def write_json(path, document):
        with open(path, "w", encoding="utf-8") as file:
            json.dump(document, file, indent=2, sort_keys=False)
        return path

    @staticmethod
    def write_csv(path, header, rows):
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(header)
            writer.writerows(rows)
        return path

    @staticmethod
    def ensure_folder(path):
        if path and not os.path.exists(path):
            logging.info(f"Creating folder '{path}'")
            os.makedirs(path, exist_ok=True)
        return path
