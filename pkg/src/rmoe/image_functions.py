#!/usr/bin/python3
# -*- coding:utf-8 -*-
import logging

import numpy
from PIL import Image

from rmoe.constants import Modality
from rmoe.objectives import power_target


class ImageFunctions:
    """
    A class used to render quick-look previews of rmoe scenes and reconstructions.

    Methods
    -------
    stretch(values, low_percent, high_percent)
        Linearly maps the [low, high] percentiles of 'values' onto [0, 255] as uint8.

    to_display(modality, pixels)
        Returns an 8-bit display array: RGB for Opt and the first three MS bands, log-scaled grayscale for SAR
        (SAR_L1 is shown as its total power).

    preview(modality, pixels, scale)
        Returns a Pillow image of 'pixels', enlarged 'scale' times with nearest-neighbour resampling.

    save_preview(path, modality, pixels, scale)
        Writes the preview to 'path'.

    side_by_side(images)
        Pastes several previews of equal height left to right.
    """

    @staticmethod
    def stretch(values, low_percent=1.0, high_percent=99.0):
        values = numpy.asarray(values, dtype=numpy.float64)
        low, high = numpy.percentile(values, [low_percent, high_percent])
        if high - low <= 0.0:
            return numpy.zeros(values.shape, dtype=numpy.uint8)
        scaled = (values - low) / (high - low)
        return (numpy.clip(scaled, 0.0, 1.0) * 255.0 + 0.5).astype(numpy.uint8)

    @staticmethod
    def to_display(modality, pixels):
        modality = Modality.parse(modality)
        pixels = numpy.asarray(pixels)
        if modality in (Modality.OPT, Modality.MS) and pixels.shape[-1] >= 3:
            return ImageFunctions.stretch(pixels[..., :3])
        if modality is Modality.SAR_L1 and pixels.shape[-1] == modality.channels:
            intensity = power_target(pixels)
        else:
            intensity = pixels[..., 0]
        return ImageFunctions.stretch(numpy.log1p(numpy.maximum(intensity, 0.0)))

    @staticmethod
    def preview(modality, pixels, scale=4):
        data = ImageFunctions.to_display(modality, pixels)
        img = Image.fromarray(data)
        if scale > 1:
            img = img.resize((img.width * scale, img.height * scale), resample=Image.NEAREST)
        return img

    @staticmethod
    def save_preview(path, modality, pixels, scale=4):
        img = ImageFunctions.preview(modality, pixels, scale)
        img.save(path)
        logging.info(f"Saved preview to {path}")
        return path

    @staticmethod
    def side_by_side(images, gap=2):
        if len(images) == 0:
            return None
        images = [img.convert("RGB") for img in images]
        width = sum(img.width for img in images) + gap * (len(images) - 1)
        height = max(img.height for img in images)
        canvas = Image.new("RGB", (width, height))
        x = 0
        for img in images:
            canvas.paste(img, (x, 0))
            x += img.width + gap
        return canvas
