#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Synthetic multi-modal scenes, RAW ingestion, patchification and masking

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy

from rmoe import numkit
from rmoe.constants import ConfigConst, Modality, ModalityConst
from rmoe.errors import ConfigError, ModalityMismatchError, RawFormatError, ShapeError
from rmoe.file_operations import FileOperations
from rmoe.objectives import ReconTarget, power_target

# Relative power of HH, HV, VH, VV in synthetic polarimetric scenes
POLARIZATION_WEIGHTS = numpy.array([0.4, 0.1, 0.1, 0.4])
SPECKLE_LOOKS = 10.0
TERRAIN_BLOBS = 6
# Opt band weights of the luminance SAR scenes are rendered from
LUMINANCE_WEIGHTS = numpy.array([0.299, 0.587, 0.114])


class SceneImage:
    """
    One image of one modality, channel-last float32 pixels.

    Attributes
    ----------
    modality:Modality
    pixels:numpy.ndarray [H x W x C]
        SAR_L1 stores interleaved (re, im) pairs per polarization
    reference_power:numpy.ndarray [H x W] or None
        power field a SAR_L1 scene was rendered from
    """

    def __init__(self, modality, pixels, reference_power=None):
        self.modality = Modality.parse(modality)
        pixels = numpy.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[-1] != self.modality.channels:
            raise ModalityMismatchError(f"{self.modality.value} expects {self.modality.channels} channels, "
                                        f"got pixels of shape {pixels.shape}")
        self.pixels = numkit.check_finite(pixels, f"{self.modality.value} pixels")
        self.reference_power = reference_power
        return

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]


def _blob_field(rng, size, blobs=TERRAIN_BLOBS):
    # Sum of Gaussian blobs rescaled to [0, 1]
    coords = numpy.arange(size, dtype=numpy.float64) + 0.5
    rows, cols = numpy.meshgrid(coords, coords, indexing="ij")
    field = numpy.zeros((size, size))
    for _ in range(blobs):
        row, col = rng.uniform(0.0, size, 2)
        width = rng.uniform(size / 8.0, size / 3.0)
        amplitude = rng.uniform(0.3, 1.0)
        field += amplitude * numpy.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2.0 * width * width))
    low, high = field.min(), field.max()
    if high - low <= 0.0:
        return numpy.zeros_like(field)
    return (field - low) / (high - low)


def optical_luminance(pixels):
    # [H x W x >=3] -> [H x W] weighted sum of the first three (optical) bands
    return numpy.tensordot(numpy.asarray(pixels)[..., :3], LUMINANCE_WEIGHTS, axes=([-1], [0]))


def synth_scene(modality, seed, size=ConfigConst.IMAGE_SIZE.value):
    """
    Procedural scene: low-frequency blob terrain and cover fields shared by all modalities for the same seed,
    rendered per modality. Opt is three tinted bands in [0, 1] and MS adds a correlated near-infrared band. SAR_L2 is
    the optical luminance under multiplicative gamma speckle. SAR_L1 renders each polarization as
    amplitude * (cos phi, sin phi) with a smooth phase, so its power is speckled luminance.
    """
    modality = Modality.parse(modality)
    rng = numkit.SeededRng(seed)
    terrain = _blob_field(rng.derive(0), size)
    cover = _blob_field(rng.derive(1), size)

    bands = [0.7 * terrain + 0.3 * cover,
             0.5 * terrain + 0.5 * (1.0 - cover),
             0.8 * terrain + 0.2 * (1.0 - cover)]
    if modality in (Modality.OPT, Modality.MS):
        if modality is Modality.MS:
            bands.append(0.6 * terrain + 0.4 * cover)
        return SceneImage(modality, numpy.stack(bands, axis=-1).astype(numkit.TRAIN_DTYPE))

    luminance = optical_luminance(numpy.stack(bands, axis=-1))
    speckle_rng = rng.derive(2, modality.code)
    if modality is Modality.SAR_L2:
        speckle = speckle_rng.gamma(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS, (size, size))
        return SceneImage(modality, (luminance * speckle)[..., None].astype(numkit.TRAIN_DTYPE))

    channels = []
    power = numpy.zeros((size, size))
    for p, weight in enumerate(POLARIZATION_WEIGHTS):
        speckle = speckle_rng.derive(p).gamma(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS, (size, size))
        amplitude = numpy.sqrt(weight * luminance * speckle)
        phase = 2.0 * math.pi * _blob_field(rng.derive(3, p), size, blobs=3)
        channels.extend([amplitude * numpy.cos(phase), amplitude * numpy.sin(phase)])
        power += amplitude * amplitude
    return SceneImage(modality, numpy.stack(channels, axis=-1).astype(numkit.TRAIN_DTYPE), reference_power=power)


def patchify(image, patch):
    pixels = image.pixels if isinstance(image, SceneImage) else numpy.asarray(image)
    height, width, channels = pixels.shape
    if patch <= 0 or height % patch != 0 or width % patch != 0:
        raise ShapeError(f"Image {height}x{width} is not divisible into {patch}x{patch} patches")
    grid = pixels.reshape(height // patch, patch, width // patch, patch, channels)
    return grid.transpose(0, 2, 1, 3, 4).reshape((height // patch) * (width // patch), patch * patch * channels)


def unpatchify(tokens, height, width, channels, patch):
    tokens = numpy.asarray(tokens)
    if height % patch != 0 or width % patch != 0:
        raise ShapeError(f"Image {height}x{width} is not divisible into {patch}x{patch} patches")
    if tokens.shape != ((height // patch) * (width // patch), patch * patch * channels):
        raise ShapeError(f"Tokens of shape {tokens.shape} do not tile a {height}x{width}x{channels} image")
    grid = tokens.reshape(height // patch, width // patch, patch, patch, channels)
    return grid.transpose(0, 2, 1, 3, 4).reshape(height, width, channels)


class MaskPlan:
    def __init__(self, num_patches, indices, ratio, seed):
        self.num_patches = num_patches
        self.indices = indices
        self.ratio = ratio
        self.seed = seed
        return

    @property
    def mask(self):
        mask = numpy.zeros(self.num_patches, dtype=bool)
        mask[self.indices] = True
        return mask


def mask_count(num_patches, ratio):
    # round half up
    return int(math.floor(ratio * num_patches + 0.5))


def plan_mask(num_patches, ratio, seed, keys=()):
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"Mask ratio {ratio} is outside [0, 1]")
    count = mask_count(num_patches, ratio)
    indices = numkit.SeededRng(seed, keys).sample_without_replacement(num_patches, count)
    return MaskPlan(num_patches, numpy.sort(indices), ratio, seed)


class NormStats:
    """
    Per-modality standardization: channel mean/std for inputs and a positive power scale for SAR_L1 targets.
    SAR_L1 power targets are divided by the corpus mean power so they stay non-negative.
    """

    def __init__(self, mean, std, power_scale=None):
        self.mean = {Modality.parse(m): numpy.asarray(v, dtype=numkit.VERIFY_DTYPE) for m, v in mean.items()}
        self.std = {Modality.parse(m): numpy.asarray(v, dtype=numkit.VERIFY_DTYPE) for m, v in std.items()}
        self.power_scale = float(power_scale) if power_scale is not None else 1.0
        return

    @staticmethod
    def identity(modalities):
        modalities = [Modality.parse(m) for m in modalities]
        return NormStats({m: numpy.zeros(m.channels) for m in modalities},
                         {m: numpy.ones(m.channels) for m in modalities})

    @staticmethod
    def compute(images):
        grouped = {}
        for image in images:
            grouped.setdefault(image.modality, []).append(image.pixels.reshape(-1, image.channels))
        mean, std = {}, {}
        power_scale = None
        for modality, pixels in grouped.items():
            values = numpy.concatenate(pixels, axis=0).astype(numkit.VERIFY_DTYPE)
            mean[modality] = values.mean(axis=0)
            # Constant channels keep unit scale
            spread = values.std(axis=0)
            std[modality] = numpy.where(spread > 0.0, spread, 1.0)
            if modality is Modality.SAR_L1:
                average = float(numpy.mean(power_target(values)))
                power_scale = average if average > 0.0 else 1.0
        return NormStats(mean, std, power_scale)

    def normalize(self, modality, pixels):
        modality = Modality.parse(modality)
        if modality not in self.mean:
            return pixels
        return ((pixels - self.mean[modality]) / self.std[modality]).astype(pixels.dtype)

    def denormalize(self, modality, pixels):
        modality = Modality.parse(modality)
        if modality not in self.mean:
            return pixels
        return (pixels * self.std[modality] + self.mean[modality]).astype(pixels.dtype)

    def target(self, image):
        # Reconstruction target pixels [H x W x target_channels]
        if image.modality is Modality.SAR_L1:
            power = power_target(image.pixels.astype(numkit.VERIFY_DTYPE)) / self.power_scale
            return power[..., None].astype(image.pixels.dtype)
        return self.normalize(image.modality, image.pixels)

    def untarget(self, modality, pixels):
        modality = Modality.parse(modality)
        if modality is Modality.SAR_L1:
            return (pixels * self.power_scale).astype(pixels.dtype)
        return self.denormalize(modality, pixels)

    def to_dict(self):
        return {"mean": {m.value: v.tolist() for m, v in self.mean.items()},
                "std": {m.value: v.tolist() for m, v in self.std.items()},
                "power_scale": self.power_scale}

    @staticmethod
    def from_dict(values):
        return NormStats(values["mean"], values["std"], values.get("power_scale"))


class MultiModalBatch:
    """
    Tokens, masks and reconstruction targets for the modalities present in one step. Modalities are unpaired: each
    carries its own sample count.

    Attributes
    ----------
    modalities:list
        present modalities in canonical order
    tokens:dict
        Modality -> [B_m x P x patch^2 * C] standardized patch tokens
    masks:dict
        Modality -> [B_m x P] bool
    targets:dict
        Modality -> ReconTarget
    plans:dict
        Modality -> list of MaskPlan
    """

    def __init__(self, tokens, masks, targets, plans=None):
        order = ModalityConst.ORDER.value
        self.modalities = sorted(tokens.keys(), key=lambda m: order.index(m.value))
        self.tokens = tokens
        self.masks = masks
        self.targets = targets
        self.plans = plans or {}
        for modality in self.modalities:
            if modality not in targets:
                raise ShapeError(f"Modality '{modality.value}' has no reconstruction target")
        return

    def sample_count(self, modality):
        return self.tokens[Modality.parse(modality)].shape[0]

    def subset(self, indices):
        # Same batch restricted to sample 'indices' of every modality
        tokens = {m: t[indices] for m, t in self.tokens.items()}
        masks = {m: mask[indices] for m, mask in self.masks.items()}
        targets = {m: ReconTarget(m, t.target[indices], t.mask[indices]) for m, t in self.targets.items()}
        return MultiModalBatch(tokens, masks, targets)


def assemble_batch(images, patch, mask_ratio, seed, stats=None, keys=()):
    """
    Patchifies, standardizes and masks 'images' (any mix of modalities). Sample i of modality m draws its mask with
    keys (*keys, m.code, i) off 'seed'.
    """
    grouped = {}
    for image in images:
        grouped.setdefault(image.modality, []).append(image)
    if stats is None:
        stats = NormStats.identity(grouped.keys())

    tokens, masks, targets, plans = {}, {}, {}, {}
    for modality, group in grouped.items():
        sample_tokens, sample_targets, sample_plans = [], [], []
        for i, image in enumerate(group):
            sample_tokens.append(patchify(stats.normalize(modality, image.pixels), patch))
            sample_targets.append(patchify(stats.target(image), patch))
            sample_plans.append(plan_mask(sample_tokens[-1].shape[0], mask_ratio, seed, keys + (modality.code, i)))
        tokens[modality] = numpy.stack(sample_tokens)
        masks[modality] = numpy.stack([plan.mask for plan in sample_plans])
        targets[modality] = ReconTarget(modality, numpy.stack(sample_targets), masks[modality])
        plans[modality] = sample_plans
    return MultiModalBatch(tokens, masks, targets, plans)


def thread_count():
    value = os.environ.get(ConfigConst.THREADS_ENV.value, "")
    try:
        threads = int(value) if value else ConfigConst.DEFAULT_THREADS.value
    except ValueError:
        logging.warning(f"Ignoring non-integer {ConfigConst.THREADS_ENV.value}='{value}'")
        threads = ConfigConst.DEFAULT_THREADS.value
    return max(1, threads)


class SyntheticCorpus:
    """
    Fixed pool of synthetic scenes per modality. Scene i of modality m uses seed (seed, i), so every modality of the
    same index shares its terrain.
    """

    def __init__(self, modalities, count, seed, size=ConfigConst.IMAGE_SIZE.value):
        self.modalities = [Modality.parse(m) for m in modalities]
        self.count = count
        self.seed = seed
        self.size = size
        self.images = {}
        jobs = [(m, i) for m in self.modalities for i in range(count)]
        with ThreadPoolExecutor(max_workers=thread_count()) as pool:
            scenes = list(pool.map(lambda job: synth_scene(job[0], self.scene_seed(job[1]), size), jobs))
        for (modality, _), scene in zip(jobs, scenes):
            self.images.setdefault(modality, []).append(scene)
        return

    def scene_seed(self, index):
        return numpy.random.SeedSequence([self.seed, index]).generate_state(1)[0]

    def stats(self, samples=ConfigConst.STATS_SAMPLES.value):
        return NormStats.compute(image for m in self.modalities for image in self.images[m][:samples])

    def batch(self, modality, step, batch_size, patch, mask_ratio, stats=None):
        # Deterministic per (seed, modality, step): a seeded draw of 'batch_size' scenes and fresh masks
        modality = Modality.parse(modality)
        rng = numkit.SeededRng(self.seed, (modality.code, step))
        picks = rng.integers(0, self.count, batch_size)
        return assemble_batch([self.images[modality][i] for i in picks], patch, mask_ratio, self.seed,
                              stats, keys=(1, step))


def ingest_raw(path, modality=None):
    # Reads and validates a RAW image against the modality declared for it (manifest entry)
    try:
        stored, pixels = FileOperations.read_raw(path)
    except RawFormatError as e:
        logging.error(f"Rejected RAW image '{path}': {e}")
        raise
    if modality is not None and Modality.parse(modality) is not stored:
        logging.error(f"'{path}' is declared {Modality.parse(modality).value} but stores {stored.value}")
        raise ModalityMismatchError(f"'{path}' is declared {Modality.parse(modality).value} "
                                    f"but its header says {stored.value}")
    return SceneImage(stored, pixels)


def ingest_manifest(path):
    return [ingest_raw(image_path, modality) for image_path, modality in FileOperations.read_manifest(path)]
