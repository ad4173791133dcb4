#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Training losses: per-bank load balance, modal reconstruction targets, masked reconstruction and the combined objective

import logging

import numpy

from rmoe import numkit
from rmoe.constants import Modality, ModalityConst
from rmoe.diff_engine import CompGraph, Node
from rmoe.errors import ReconstructionError, RoutingError, ShapeError
from rmoe.rmoe_core import BANK_COLLABORATIVE


def _value(item):
    return item.value if isinstance(item, Node) else item


def dispatch_fractions(selected, num_experts):
    # Each token contributes 1/K to every expert in its top-K set, so the fractions sum to 1
    selected = numpy.asarray(selected)
    if selected.ndim == 1:
        selected = selected[:, None]
    tokens, top_k = selected.shape
    if tokens == 0:
        raise RoutingError("Dispatch fractions over zero tokens")
    counts = numpy.bincount(selected.reshape(-1), minlength=num_experts)[:num_experts]
    return counts.astype(numkit.VERIFY_DTYPE) / (tokens * top_k)


def dispatch_cov(fractions):
    # Coefficient of variation std / mean of a dispatch-fraction vector
    fractions = numpy.asarray(fractions, dtype=numkit.VERIFY_DTYPE)
    mean = float(numpy.mean(fractions))
    if mean == 0.0:
        return 0.0
    return float(numpy.std(fractions)) / mean


class BalanceTerms:
    """
    Load-balance terms of one gated bank: loss = N * sum_k f_k P_k.

    Attributes
    ----------
    f:numpy.ndarray [N]
        dispatch fractions (constant, no gradient)
    probs:Node [N]
        mean soft gate probability per expert
    num_experts:int
    loss:Node
        scalar on the graph the probabilities live on
    """

    def __init__(self, f, probs, num_experts, loss):
        self.f = f
        self.probs = probs
        self.num_experts = num_experts
        self.loss = loss
        return

    @property
    def p(self):
        return self.probs.value

    @property
    def value(self):
        return float(self.loss.value)


def balance_loss_bank(selected, probs, graph=None):
    if graph is None:
        graph = CompGraph(numpy.asarray(_value(probs)).dtype)
    probs = graph.lift(probs)
    if probs.value.ndim != 2:
        raise ShapeError(f"Gate probabilities must be [tokens x experts], got {probs.shape}")
    tokens, num_experts = probs.shape
    if tokens == 0 or num_experts == 0:
        raise RoutingError("Load balance over an empty bank or zero tokens")
    f = dispatch_fractions(selected, num_experts)
    mean_probs = graph.mean(probs, axis=0)
    loss = graph.scale(graph.sum(graph.mul(mean_probs, graph.constant(f))), num_experts)
    return BalanceTerms(f, mean_probs, num_experts, loss)


class BalanceSummary:
    # Per-bank terms keyed by (block, bank, owner modality value or None) plus their summed loss
    def __init__(self, terms, loss):
        self.terms = terms
        self.loss = loss
        return

    @property
    def value(self):
        return float(self.loss.value)

    def fractions(self):
        return {key: terms.f for key, terms in self.terms.items()}

    def collaborative_fractions(self):
        return {key[0]: terms.f for key, terms in self.terms.items() if key[1] == BANK_COLLABORATIVE}


def total_balance_loss(records, graph):
    """
    L_balance = L^C + sum_m L^S_m per block, summed over blocks.

    The collaborative bank of a block pools the tokens of every modality routed through it in this pass.
    """
    groups = {}
    for record in records:
        owner = record.bank_modality.value if record.bank_modality is not None else None
        groups.setdefault((record.block, record.bank, owner), []).append(record)
    if not groups:
        # Dense blocks only
        return BalanceSummary({}, graph.constant(0.0))

    terms = {}
    total = None
    for key in sorted(groups, key=lambda k: (k[0], k[1] != BANK_COLLABORATIVE, k[2] or "")):
        group = groups[key]
        if len(group) == 1:
            probs, selected = group[0].probs, group[0].selected
        else:
            probs = graph.concat([r.probs for r in group], axis=0)
            selected = numpy.concatenate([r.selected for r in group], axis=0)
        bank_terms = balance_loss_bank(selected, probs, graph)
        terms[key] = bank_terms
        total = bank_terms.loss if total is None else graph.add(total, bank_terms.loss)
    return BalanceSummary(terms, total)


def power_target(patch):
    # |HH|^2 + |HV|^2 + |VH|^2 + |VV|^2 from interleaved (re, im) channels, last axis
    patch = numpy.asarray(patch)
    channels = Modality.SAR_L1.channels
    if patch.shape[-1] != channels:
        raise ShapeError(f"SAR_L1 power needs {channels} channels, got {patch.shape[-1]}")
    pairs = patch.reshape(patch.shape[:-1] + (len(ModalityConst.POLARIZATIONS.value), 2))
    return numpy.sum(pairs * pairs, axis=(-2, -1))


class ReconTarget:
    """
    Regression target of one modality in a batch.

    Attributes
    ----------
    modality:Modality
    target:numpy.ndarray [B x P x patch^2 * target_channels]
        pixel values, or per-pixel power for SAR_L1
    mask:numpy.ndarray [B x P] bool
        True where the patch is masked
    """

    def __init__(self, modality, target, mask):
        self.modality = Modality.parse(modality)
        self.target = numkit.check_finite(numpy.asarray(target), f"{self.modality.value} target")
        self.mask = numpy.asarray(mask, dtype=bool)
        if self.mask.shape != self.target.shape[:2]:
            raise ShapeError(f"Mask shape {self.mask.shape} does not match target {self.target.shape}")
        if self.modality is Modality.SAR_L1 and numpy.any(self.target < 0):
            raise ReconstructionError("SAR_L1 power target is negative")
        return

    @property
    def omega(self):
        return int(numpy.count_nonzero(self.mask)) * self.target.shape[-1]


def recon_loss(predictions, targets, graph=None):
    """
    Sum over modalities of the mean squared error over masked entries only.

    'predictions' maps modality -> Node or array of shape [B * P x D] (or [B x P x D]); 'targets' maps modality ->
    ReconTarget. Returns a scalar Node on 'graph'.
    """
    if graph is None:
        first = next(iter(predictions.values()))
        graph = CompGraph(numpy.asarray(_value(first)).dtype)
    total = None
    for modality, prediction in predictions.items():
        modality = Modality.parse(modality)
        if modality not in targets:
            raise ReconstructionError(f"No reconstruction target for '{modality.value}'")
        target = targets[modality]
        if target.omega == 0:
            raise ReconstructionError(f"Nothing is masked for '{modality.value}'")
        samples, patches, width = target.target.shape
        prediction = graph.lift(prediction)
        if prediction.value.size != target.target.size:
            raise ShapeError(f"Prediction {prediction.shape} does not match target {target.target.shape}")
        if prediction.shape != (samples * patches, width):
            prediction = graph.reshape(prediction, (samples * patches, width))
        column = target.mask.reshape(samples * patches, 1).astype(graph.dtype)
        masked = graph.mul(graph.sub(prediction, graph.constant(target.target.reshape(samples * patches, width))),
                           graph.constant(column))
        loss = graph.scale(graph.sum(graph.mul(masked, masked)), 1.0 / target.omega)
        total = loss if total is None else graph.add(total, loss)
    if total is None:
        raise ReconstructionError("No modality to reconstruct")
    return total


def total_loss(recon, balance, alpha, graph=None):
    alpha = float(alpha)
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if graph is None and not isinstance(recon, Node) and not isinstance(balance, Node):
        return float(recon) + alpha * float(balance)
    if graph is None:
        raise ValueError("Graph nodes need their graph")
    if alpha == 0.0:
        return graph.lift(recon)
    return graph.add(recon, graph.scale(balance, alpha))


class Objective:
    # Loss bundle of one training forward pass
    def __init__(self, recon, balance, total, alpha):
        self.recon = recon
        self.balance = balance
        self.total = total
        self.alpha = alpha
        return

    def metrics(self):
        metrics = {"recon": float(self.recon.value), "balance": self.balance.value, "total": float(self.total.value)}
        metrics["fractions"] = {f"{block}.{bank}" + (f".{owner}" if owner else ""): terms.f.tolist()
                                for (block, bank, owner), terms in self.balance.terms.items()}
        return metrics


def objective(result, targets, alpha):
    graph = result.graph
    recon = recon_loss(result.predictions, targets, graph)
    balance = total_balance_loss(result.records, graph)
    total = total_loss(recon, balance.loss, alpha, graph)
    graph.set_output(total)
    logging.debug(f"recon {float(recon.value):.6f} balance {balance.value:.6f} total {float(total.value):.6f}")
    return Objective(recon, balance, total, alpha)

