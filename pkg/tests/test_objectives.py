#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Unit tests for objectives.py

import numpy
import pytest

from rmoe import numkit
from rmoe.constants import Modality
from rmoe.diff_engine import CompGraph
from rmoe.errors import ReconstructionError, RoutingError, ShapeError
from rmoe.harness import tiny_batch, tiny_config
from rmoe.objectives import ReconTarget, balance_loss_bank, dispatch_cov, dispatch_fractions, objective, \
    power_target, recon_loss, total_balance_loss, total_loss
from rmoe.rmoe_core import BANK_COLLABORATIVE, BANK_SPECIALIZED, DispatchRecord, RMoEModel, top_k_mask


def record(graph, block, bank, owner, modality, selected, probs):
    probs = graph.parameter(f"h.{block}.{bank}.{owner}.{modality}", numpy.asarray(probs, dtype=numpy.float64))
    selected = numpy.asarray(selected).reshape(len(selected), -1)
    return DispatchRecord(block, bank, owner, modality, selected, probs, probs.shape[1], selected.shape[1])


def test_dispatch_fractions_count_top_k():
    f = dispatch_fractions([[0, 1], [0, 2]], 4)
    assert numpy.allclose(f, [0.5, 0.25, 0.25, 0.0])
    assert f.sum() == pytest.approx(1.0)


def test_dispatch_fractions_zero_tokens():
    with pytest.raises(RoutingError):
        dispatch_fractions(numpy.zeros((0, 1), dtype=int), 4)


def test_dispatch_cov():
    assert dispatch_cov([0.25, 0.25, 0.25, 0.25]) == 0.0
    assert dispatch_cov([1.0, 0.0, 0.0, 0.0]) == pytest.approx(numpy.sqrt(3.0))


def test_balance_uniform():
    probs = numpy.full((4, 4), 0.25)
    terms = balance_loss_bank(numpy.array([[0], [1], [2], [3]]), probs)
    assert terms.value == pytest.approx(1.0)


def test_balance_collapse():
    probs = numpy.tile([1.0, 0.0, 0.0, 0.0], (3, 1))
    terms = balance_loss_bank(numpy.zeros((3, 1), dtype=int), probs)
    assert terms.value == pytest.approx(4.0)


def test_balance_hand_example():
    probs = numpy.array([[0.9, 0.1], [0.6, 0.4]])
    terms = balance_loss_bank(numpy.array([[0], [0]]), probs)
    assert numpy.allclose(terms.f, [1.0, 0.0])
    assert numpy.allclose(terms.p, [0.75, 0.25])
    assert terms.value == pytest.approx(1.5)


def test_balance_gradient_flows_through_probabilities_only():
    graph = CompGraph(numpy.float64)
    probs = graph.parameter("h", numpy.array([[0.9, 0.1], [0.6, 0.4]]))
    terms = balance_loss_bank(numpy.array([[0], [0]]), probs, graph)
    grads = graph.backward(terms.loss)
    # d/dH_ik = N f_k / n
    assert numpy.allclose(grads["h"], [[1.0, 0.0], [1.0, 0.0]])


def test_balance_empty_bank():
    with pytest.raises(RoutingError):
        balance_loss_bank(numpy.zeros((0, 1), dtype=int), numpy.zeros((0, 4)))


def test_total_balance_uniform_banks():
    graph = CompGraph(numpy.float64)
    uniform = numpy.full((4, 4), 0.25)
    spread = [0, 1, 2, 3]
    records = []
    for modality in (Modality.OPT, Modality.MS):
        records.append(record(graph, 0, BANK_SPECIALIZED, modality, modality, spread, uniform))
        records.append(record(graph, 0, BANK_COLLABORATIVE, None, modality, spread, uniform))
    summary = total_balance_loss(records, graph)
    assert summary.value == pytest.approx(1.0 + 2 * 1.0)
    assert len(summary.terms) == 3


def test_total_balance_single_modality():
    graph = CompGraph(numpy.float64)
    uniform = numpy.full((4, 4), 0.25)
    records = [record(graph, 0, BANK_SPECIALIZED, Modality.OPT, Modality.OPT, [0, 1, 2, 3], uniform),
               record(graph, 0, BANK_COLLABORATIVE, None, Modality.OPT, [0, 1, 2, 3], uniform)]
    summary = total_balance_loss(records, graph)
    assert sorted(summary.terms.keys(), key=str) == sorted([(0, BANK_SPECIALIZED, "opt"),
                                                            (0, BANK_COLLABORATIVE, None)], key=str)
    assert summary.value == pytest.approx(2.0)


def test_collaborative_bank_pools_modalities():
    graph = CompGraph(numpy.float64)
    records = [record(graph, 0, BANK_COLLABORATIVE, None, Modality.OPT, [0, 0], [[0.9, 0.1], [0.9, 0.1]]),
               record(graph, 0, BANK_COLLABORATIVE, None, Modality.MS, [1, 1], [[0.1, 0.9], [0.1, 0.9]])]
    summary = total_balance_loss(records, graph)
    terms = summary.terms[(0, BANK_COLLABORATIVE, None)]
    assert numpy.allclose(terms.f, [0.5, 0.5])
    assert summary.value == pytest.approx(1.0)
    assert numpy.allclose(summary.collaborative_fractions()[0], [0.5, 0.5])


def test_total_balance_sums_blocks():
    graph = CompGraph(numpy.float64)
    records = [record(graph, 0, BANK_COLLABORATIVE, None, Modality.OPT, [0, 0], [[0.9, 0.1], [0.6, 0.4]]),
               record(graph, 1, BANK_COLLABORATIVE, None, Modality.OPT, [0, 0], [[1.0, 0.0], [1.0, 0.0]])]
    assert total_balance_loss(records, graph).value == pytest.approx(1.5 + 2.0)


def test_total_balance_without_records():
    assert total_balance_loss([], CompGraph(numpy.float64)).value == 0.0


def test_power_target():
    assert power_target(numpy.zeros(8)) == 0.0
    assert power_target(numpy.array([3.0, 4.0, 0, 0, 0, 0, 0, 0])) == pytest.approx(25.0)
    assert power_target(numpy.array([1.0, 1.0, 2.0, 0.0, 0.0, 2.0, 1.0, -1.0])) == pytest.approx(12.0)


def test_power_target_shape():
    assert power_target(numpy.ones((2, 3, 8))).shape == (2, 3)
    with pytest.raises(ShapeError):
        power_target(numpy.ones((2, 3)))


def test_negative_power_target():
    with pytest.raises(ReconstructionError):
        ReconTarget(Modality.SAR_L1, -numpy.ones((1, 2, 4)), numpy.ones((1, 2), dtype=bool))


def test_recon_target_mask_shape():
    with pytest.raises(ShapeError):
        ReconTarget(Modality.OPT, numpy.ones((1, 2, 4)), numpy.ones((2, 1), dtype=bool))


def test_recon_perfect():
    target = numkit.SeededRng(1).normal((2, 3, 4), numpy.float64)
    targets = {Modality.OPT: ReconTarget(Modality.OPT, target, numpy.ones((2, 3), dtype=bool))}
    assert float(recon_loss({Modality.OPT: target.reshape(6, 4)}, targets).value) == 0.0


def test_recon_hand_example():
    targets = {Modality.OPT: ReconTarget(Modality.OPT, numpy.array([[[1.0], [3.0]]]), numpy.array([[True, True]]))}
    loss = recon_loss({Modality.OPT: numpy.zeros((2, 1))}, targets)
    assert float(loss.value) == pytest.approx(5.0)


def test_recon_ignores_visible_patches():
    targets = {Modality.OPT: ReconTarget(Modality.OPT, numpy.array([[[1.0], [3.0], [100.0]]]),
                                         numpy.array([[True, True, False]]))}
    loss = recon_loss({Modality.OPT: numpy.zeros((3, 1))}, targets)
    assert float(loss.value) == pytest.approx(5.0)


def test_recon_sums_modalities():
    targets = {Modality.OPT: ReconTarget(Modality.OPT, numpy.array([[[1.0], [3.0]]]), numpy.array([[True, True]])),
               Modality.SAR_L2: ReconTarget(Modality.SAR_L2, numpy.array([[[2.0], [0.0]]]),
                                            numpy.array([[True, True]]))}
    loss = recon_loss({Modality.OPT: numpy.zeros((2, 1)), Modality.SAR_L2: numpy.zeros((2, 1))}, targets)
    assert float(loss.value) == pytest.approx(7.0)


def test_recon_nothing_masked():
    targets = {Modality.OPT: ReconTarget(Modality.OPT, numpy.ones((1, 2, 1)), numpy.zeros((1, 2), dtype=bool))}
    with pytest.raises(ReconstructionError):
        recon_loss({Modality.OPT: numpy.zeros((2, 1))}, targets)


def test_recon_shape_mismatch():
    targets = {Modality.OPT: ReconTarget(Modality.OPT, numpy.ones((1, 2, 1)), numpy.ones((1, 2), dtype=bool))}
    with pytest.raises(ShapeError):
        recon_loss({Modality.OPT: numpy.zeros((3, 1))}, targets)


def test_recon_gradient():
    graph = CompGraph(numpy.float64)
    prediction = graph.parameter("p", numpy.zeros((2, 1)))
    targets = {Modality.OPT: ReconTarget(Modality.OPT, numpy.array([[[1.0], [3.0]]]), numpy.array([[True, False]]))}
    grads = graph.backward(recon_loss({Modality.OPT: prediction}, targets, graph))
    assert numpy.allclose(grads["p"], [[-2.0], [0.0]])


def test_total_loss():
    assert total_loss(5.0, 1.0, 0.01) == pytest.approx(5.01)
    assert total_loss(5.0, 123.0, 0.0) == 5.0
    with pytest.raises(ValueError):
        total_loss(5.0, 1.0, -1.0)


def test_total_loss_zero_alpha_is_recon():
    graph = CompGraph(numpy.float64)
    recon = graph.parameter("r", numpy.array(2.5))
    balance = graph.parameter("b", numpy.array(7.0))
    assert total_loss(recon, balance, 0.0, graph) is recon


def test_objective_on_model_forward():
    cfg = tiny_config()
    model = RMoEModel.initialize(cfg, 0, numpy.float64)
    batch = tiny_batch(cfg, 0)
    result = model.forward(batch)
    loss = objective(result, batch.targets, 0.01)
    assert result.graph.output is loss.total
    assert float(loss.total.value) == pytest.approx(float(loss.recon.value) + 0.01 * loss.balance.value)
    metrics = loss.metrics()
    assert set(metrics) >= {"recon", "balance", "total", "fractions"}
    assert "0.collaborative" in metrics["fractions"]
    assert "0.specialized.opt" in metrics["fractions"]


def test_power_target_is_phase_rotation_invariant():
    rng = numkit.SeededRng(4)
    pixels = rng.normal((6, 6, 8), numpy.float64)
    rotated = pixels.copy()
    for p, theta in enumerate(rng.uniform(0.0, 2.0 * numpy.pi, 4)):
        re, im = pixels[..., 2 * p], pixels[..., 2 * p + 1]
        rotated[..., 2 * p] = re * numpy.cos(theta) - im * numpy.sin(theta)
        rotated[..., 2 * p + 1] = re * numpy.sin(theta) + im * numpy.cos(theta)
    assert numpy.allclose(power_target(rotated), power_target(pixels), rtol=0.0, atol=1e-6)
    assert power_target(pixels).min() >= 0.0


def routed(logits, top_k=1):
    probs = numkit.softmax(logits)
    return top_k_mask(probs, top_k)[1], probs


def test_balance_random_routing_sits_at_lower_bound():
    for seed in range(10):
        selected, probs = routed(numkit.SeededRng(seed).normal((4096, 4), numpy.float64))
        loss = balance_loss_bank(selected, probs).value
        assert 1.0 - 1e-3 < loss < 1.01


@pytest.mark.parametrize("top_k", [1, 2])
def test_balance_skewed_routing_exceeds_lower_bound(top_k):
    bias = numpy.array([-1.5, -0.5, 0.5, 1.5])
    for seed in range(10):
        selected, probs = routed(numkit.SeededRng(seed).normal((512, 4), numpy.float64) + bias, top_k)
        assert balance_loss_bank(selected, probs).value > 1.0


def test_balance_matching_fractions_obey_cauchy_schwarz():
    # f == P gives N * sum(P^2) >= (sum P)^2 = 1
    shares = numpy.array([0.5, 0.25, 0.25, 0.0])
    terms = balance_loss_bank(numpy.array([[0], [0], [1], [2]]), numpy.tile(shares, (4, 1)))
    assert numpy.allclose(terms.f, terms.p)
    assert terms.value == pytest.approx(4.0 * numpy.sum(shares ** 2))
    assert terms.value > 1.0


def split_losses(model, batch, alpha):
    loss = objective(model.forward(batch), batch.targets, alpha)
    return float(loss.recon.value), loss.balance.value, float(loss.total.value)


@pytest.mark.parametrize("name,coord", [("decoder.opt.weight", (0, 0)),
                                        ("blocks.0.moe.collaborative.gate.w_g", (1, 0)),
                                        ("blocks.0.moe.shared.w1", (2, 3)),
                                        ("embed.sar_l1.weight", (0, 1))])
def test_total_gradient_splits_into_recon_and_balance(name, coord):
    alpha, eps = 0.5, 1e-6
    cfg = tiny_config()
    model = RMoEModel.initialize(cfg, 3, numpy.float64)
    batch = tiny_batch(cfg, 3)
    result = model.forward(batch)
    loss = objective(result, batch.targets, alpha)
    graph = result.graph
    recon_grad = graph.backward(loss.recon)[name][coord]
    balance_grad = graph.backward(loss.balance.loss)[name][coord]
    total_grad = graph.backward(loss.total)[name][coord]
    assert total_grad == pytest.approx(recon_grad + alpha * balance_grad, rel=1e-12, abs=1e-15)

    array = model.parameters()[name]
    original = array[coord]
    array[coord] = original + eps
    upper = split_losses(model, batch, alpha)
    array[coord] = original - eps
    lower = split_losses(model, batch, alpha)
    array[coord] = original
    recon_fd, balance_fd, total_fd = [(u - d) / (2.0 * eps) for u, d in zip(upper, lower)]
    assert total_fd == pytest.approx(recon_fd + alpha * balance_fd, rel=1e-6, abs=1e-7)
    assert total_fd == pytest.approx(total_grad, rel=1e-4, abs=1e-7)
    assert balance_fd == pytest.approx(balance_grad, rel=1e-4, abs=1e-7)
