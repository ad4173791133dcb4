#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Unit tests for modal_data.py

import os

import numpy
import pytest

from rmoe.constants import Modality, UnitTestConst
from rmoe.errors import ConfigError, ModalityMismatchError, ShapeError, TruncatedPayloadError
from rmoe.file_operations import FileOperations
from rmoe.modal_data import MaskPlan, NormStats, SceneImage, SyntheticCorpus, assemble_batch, ingest_manifest, \
    ingest_raw, mask_count, optical_luminance, patchify, plan_mask, synth_scene, thread_count, unpatchify
from rmoe.objectives import power_target


def temp_folder():
    folder = os.path.join(os.path.dirname(__file__), UnitTestConst.TEMP_FOLDER.value)
    FileOperations.ensure_folder(folder)
    return folder


def remove_files(*paths):
    for path in paths:
        if os.path.exists(path):
            os.remove(path)


@pytest.mark.parametrize("modality", list(Modality))
def test_synth_scene_is_deterministic(modality):
    first = synth_scene(modality, 42, 16)
    second = synth_scene(modality, 42, 16)
    assert first.pixels.tobytes() == second.pixels.tobytes()
    assert first.pixels.shape == (16, 16, modality.channels)
    assert first.pixels.dtype == numpy.float32


def test_synth_scene_seeds_differ():
    assert not numpy.array_equal(synth_scene("opt", 1, 16).pixels, synth_scene("opt", 2, 16).pixels)


def test_synth_scene_ranges():
    opt = synth_scene("opt", 3, 16).pixels
    assert opt.min() >= 0.0 and opt.max() <= 1.0
    assert synth_scene("sar_l2", 3, 16).pixels.min() >= 0.0


def test_synth_sar_l1_power_matches_reference():
    scene = synth_scene("sar_l1", 5, 16)
    assert numpy.allclose(power_target(scene.pixels.astype(numpy.float64)), scene.reference_power, rtol=1e-5,
                          atol=1e-6)


def test_synth_modalities_share_terrain():
    # Opt luminance and SAR_L2 intensity of the same seed are correlated
    opt = synth_scene("opt", 9, 32).pixels.mean(axis=-1).reshape(-1)
    sar = synth_scene("sar_l2", 9, 32).pixels[..., 0].reshape(-1)
    assert numpy.corrcoef(opt, sar)[0, 1] > 0.3


def test_synth_sar_is_speckled_optical_luminance():
    luminance = optical_luminance(synth_scene("opt", 11, 32).pixels.astype(numpy.float64))
    assert luminance.min() > 0.0
    speckle = synth_scene("sar_l2", 11, 32).pixels[..., 0] / luminance
    # Unit-mean gamma speckle
    assert abs(float(speckle.mean()) - 1.0) < 0.1
    assert speckle.std() > 0.1
    power = synth_scene("sar_l1", 11, 32).reference_power / luminance
    assert abs(float(power.mean()) - 1.0) < 0.1


def test_scene_image_channel_check():
    with pytest.raises(ModalityMismatchError):
        SceneImage("opt", numpy.zeros((4, 4, 8)))


def test_patch_count():
    assert patchify(numpy.zeros((32, 32, 3)), 8).shape == (16, 8 * 8 * 3)


def test_patchify_round_trip():
    pixels = synth_scene("ms", 4, 16).pixels
    tokens = patchify(pixels, 4)
    assert unpatchify(tokens, 16, 16, 4, 4).tobytes() == pixels.tobytes()


def test_patchify_layout():
    pixels = numpy.arange(4 * 4, dtype=numpy.float32).reshape(4, 4, 1)
    tokens = patchify(pixels, 2)
    assert tokens[0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert tokens[1].tolist() == [2.0, 3.0, 6.0, 7.0]
    assert tokens[2].tolist() == [8.0, 9.0, 12.0, 13.0]


def test_single_patch_image():
    pixels = synth_scene("opt", 4, 8).pixels
    tokens = patchify(pixels, 8)
    assert tokens.shape == (1, 8 * 8 * 3)
    assert numpy.array_equal(tokens[0], pixels.reshape(-1))


def test_patchify_rejects_partial_patches():
    with pytest.raises(ShapeError):
        patchify(numpy.zeros((10, 10, 1)), 4)
    with pytest.raises(ShapeError):
        unpatchify(numpy.zeros((4, 3)), 4, 4, 1, 2)


def test_mask_ratio_edges():
    assert plan_mask(16, 0.0, 1).mask.sum() == 0
    assert plan_mask(16, 1.0, 1).mask.all()
    with pytest.raises(ConfigError):
        plan_mask(16, 1.5, 1)


def test_mask_count_rounds_half_up():
    assert mask_count(16, 0.6) == 10
    assert mask_count(4, 0.625) == 3
    assert mask_count(3, 0.5) == 2


def test_mask_plan_is_seeded():
    first = plan_mask(16, 0.6, 3, (1, 2))
    second = plan_mask(16, 0.6, 3, (1, 2))
    assert isinstance(first, MaskPlan)
    assert numpy.array_equal(first.indices, second.indices)
    assert not numpy.array_equal(first.indices, plan_mask(16, 0.6, 3, (1, 3)).indices)


def test_mask_frequency_is_uniform():
    counts = numpy.zeros(16)
    seeds = 10000
    for seed in range(seeds):
        counts += plan_mask(16, 0.6, seed).mask
    assert counts.sum() == 10 * seeds
    assert numpy.all(numpy.abs(counts / seeds - 0.625) <= 0.02)


def test_mask_positions_pass_chi_square():
    # Without replacement the per-patch counts carry covariance S p (1 - p) n / (n - 1) (I - 1 1^T / n)
    patches, seeds = 16, 4000
    counts = numpy.zeros(patches)
    for seed in range(seeds):
        counts[plan_mask(patches, 0.25, seed, (7,)).indices] += 1
    p = mask_count(patches, 0.25) / patches
    expected = seeds * p
    statistic = numpy.sum((counts - expected) ** 2) / (expected * (1.0 - p)) * (patches - 1) / patches
    # 99.9th percentile of chi-square with 15 degrees of freedom
    assert statistic < 37.70


def test_norm_stats_standardize():
    images = [synth_scene("ms", seed, 16) for seed in range(4)]
    stats = NormStats.compute(images)
    normalized = numpy.concatenate([stats.normalize("ms", image.pixels).reshape(-1, 4) for image in images])
    assert numpy.allclose(normalized.mean(axis=0), 0.0, atol=1e-5)
    assert numpy.allclose(normalized.std(axis=0), 1.0, atol=1e-4)
    restored = stats.denormalize("ms", stats.normalize("ms", images[0].pixels))
    assert numpy.allclose(restored, images[0].pixels, atol=1e-5)


def test_norm_stats_power_target_is_non_negative():
    images = [synth_scene("sar_l1", seed, 16) for seed in range(3)]
    stats = NormStats.compute(images)
    target = stats.target(images[0])
    assert target.shape == (16, 16, 1)
    assert target.min() >= 0.0
    assert numpy.allclose(stats.untarget("sar_l1", target)[..., 0], power_target(images[0].pixels), rtol=1e-4)


def test_norm_stats_dict_round_trip():
    stats = NormStats.compute([synth_scene("sar_l1", 1, 8), synth_scene("opt", 1, 8)])
    copy = NormStats.from_dict(stats.to_dict())
    assert copy.power_scale == stats.power_scale
    assert numpy.array_equal(copy.mean[Modality.OPT], stats.mean[Modality.OPT])


def test_assemble_batch():
    images = [synth_scene("opt", 1, 16), synth_scene("opt", 2, 16), synth_scene("sar_l1", 1, 16)]
    batch = assemble_batch(images, 4, 0.5, 7)
    assert batch.modalities == [Modality.OPT, Modality.SAR_L1]
    assert batch.tokens[Modality.OPT].shape == (2, 16, 48)
    assert batch.tokens[Modality.SAR_L1].shape == (1, 16, 128)
    assert batch.targets[Modality.SAR_L1].target.shape == (1, 16, 16)
    assert batch.masks[Modality.OPT].sum(axis=1).tolist() == [8, 8]
    assert batch.sample_count("opt") == 2


def test_assemble_batch_masks_differ_per_sample():
    images = [synth_scene("opt", 1, 16), synth_scene("opt", 1, 16)]
    batch = assemble_batch(images, 4, 0.5, 7)
    assert not numpy.array_equal(batch.masks[Modality.OPT][0], batch.masks[Modality.OPT][1])


def test_batch_subset():
    images = [synth_scene("opt", seed, 8) for seed in range(3)]
    batch = assemble_batch(images, 4, 0.5, 7).subset([2])
    assert batch.sample_count(Modality.OPT) == 1


def test_synthetic_corpus_is_deterministic(monkeypatch):
    monkeypatch.setenv("RMOE_THREADS", "3")
    threaded = SyntheticCorpus(["opt", "sar_l2"], 4, 11, 8)
    monkeypatch.setenv("RMOE_THREADS", "1")
    serial = SyntheticCorpus(["opt", "sar_l2"], 4, 11, 8)
    for modality in (Modality.OPT, Modality.SAR_L2):
        for a, b in zip(threaded.images[modality], serial.images[modality]):
            assert a.pixels.tobytes() == b.pixels.tobytes()
    first = threaded.batch("opt", 3, 2, 4, 0.5)
    second = serial.batch("opt", 3, 2, 4, 0.5)
    assert first.tokens[Modality.OPT].tobytes() == second.tokens[Modality.OPT].tobytes()
    assert numpy.array_equal(first.masks[Modality.OPT], second.masks[Modality.OPT])


def test_thread_count(monkeypatch):
    monkeypatch.setenv("RMOE_THREADS", "4")
    assert thread_count() == 4
    monkeypatch.setenv("RMOE_THREADS", "many")
    assert thread_count() == 1
    monkeypatch.delenv("RMOE_THREADS")
    assert thread_count() == 1


def test_ingest_raw_round_trip():
    path = os.path.join(temp_folder(), "scene.raw")
    remove_files(path)
    scene = synth_scene("sar_l1", 8, 16)
    FileOperations.write_raw(path, scene.modality, scene.pixels)
    image = ingest_raw(path, "sar_l1")
    assert image.modality is Modality.SAR_L1
    assert image.pixels.tobytes() == scene.pixels.tobytes()
    remove_files(path)


def test_ingest_raw_declared_modality_mismatch():
    path = os.path.join(temp_folder(), "declared.raw")
    remove_files(path)
    FileOperations.write_raw(path, "opt", synth_scene("opt", 8, 8).pixels)
    with pytest.raises(ModalityMismatchError):
        ingest_raw(path, "ms")
    remove_files(path)


def test_ingest_raw_truncated():
    path = os.path.join(temp_folder(), "truncated.raw")
    remove_files(path)
    FileOperations.write_raw(path, "opt", synth_scene("opt", 8, 8).pixels)
    with open(path, "rb") as file:
        data = file.read()
    with open(path, "wb") as file:
        file.write(data[:-5])
    with pytest.raises(TruncatedPayloadError):
        ingest_raw(path)
    remove_files(path)


def test_ingest_manifest():
    folder = temp_folder()
    paths = [os.path.join(folder, f"manifest_{i}.raw") for i in range(2)]
    manifest = os.path.join(folder, UnitTestConst.MANIFEST_FILE.value)
    remove_files(manifest, *paths)
    FileOperations.write_raw(paths[0], "opt", synth_scene("opt", 1, 8).pixels)
    FileOperations.write_raw(paths[1], "sar_l2", synth_scene("sar_l2", 1, 8).pixels)
    FileOperations.write_manifest(manifest, [(paths[0], "opt"), (paths[1], "sar_l2")])
    images = ingest_manifest(manifest)
    assert [image.modality for image in images] == [Modality.OPT, Modality.SAR_L2]
    remove_files(manifest, *paths)
