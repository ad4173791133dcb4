#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Post-training model surgery: activation profiling, modality decomposition, sparse expert pruning and dense fusion
#
# Every operation returns a new model and leaves its input untouched.

import logging
import math

import numpy

from rmoe import numkit
from rmoe.constants import Modality, SurgeryConst
from rmoe.errors import SurgeryError
from rmoe.modal_data import assemble_batch
from rmoe.objectives import dispatch_cov
from rmoe.rmoe_core import BANK_COLLABORATIVE, EncoderConfig, ExpertBank, FusedFFN, GatingNetwork, ordered_modalities


class ActivationStats:
    """
    Collaborative-bank dispatch counts per (block, modality) over a profiling corpus.

    Attributes
    ----------
    counts:dict
        block -> Modality -> int array [N_C], one count per (token, selected expert)
    tokens:dict
        block -> Modality -> number of routed tokens
    top_k:dict
        block -> K of the collaborative gate

    Methods
    -------
    frequencies(block, modality)
        f(E_k | x_m) = count_k / (tokens * K); sums to 1.
    """

    def __init__(self, counts=None, tokens=None, top_k=None):
        self.counts = counts if counts is not None else {}
        self.tokens = tokens if tokens is not None else {}
        self.top_k = top_k if top_k is not None else {}
        return

    def add(self, record):
        block_counts = self.counts.setdefault(record.block, {})
        block_tokens = self.tokens.setdefault(record.block, {})
        modality = record.token_modality
        if modality not in block_counts:
            block_counts[modality] = numpy.zeros(record.num_experts, dtype=numpy.int64)
            block_tokens[modality] = 0
        block_counts[modality] += record.counts()
        block_tokens[modality] += record.num_tokens
        self.top_k[record.block] = record.top_k
        return

    @property
    def blocks(self):
        return sorted(self.counts.keys())

    def modalities(self, block):
        return ordered_modalities(self.counts.get(block, {}).keys())

    def frequencies(self, block, modality):
        modality = Modality.parse(modality)
        if block not in self.counts or modality not in self.counts[block]:
            raise SurgeryError(f"No activation statistics for block {block}, modality '{modality.value}'")
        tokens = self.tokens[block][modality]
        if tokens == 0:
            raise SurgeryError(f"Block {block}, modality '{modality.value}' routed no tokens")
        return self.counts[block][modality] / float(tokens * self.top_k[block])

    def retain(self, kept):
        """
        Statistics reindexed to a pruned model: 'kept' maps block -> surviving collaborative expert indices, which
        become experts 0..len-1. Counts of dropped experts are discarded; token totals and K stay as profiled, so the
        survivors keep their frequencies.
        """
        stats = ActivationStats(top_k=dict(self.top_k))
        for block in self.blocks:
            if block in kept:
                stats.counts[block] = {m: c[list(kept[block])].copy() for m, c in self.counts[block].items()}
            else:
                stats.counts[block] = {m: c.copy() for m, c in self.counts[block].items()}
            stats.tokens[block] = dict(self.tokens[block])
        return stats

    def to_dict(self):
        blocks = {}
        for block in self.blocks:
            blocks[str(block)] = {
                "top_k": self.top_k[block],
                "modalities": {m.value: {"tokens": int(self.tokens[block][m]),
                                         "counts": self.counts[block][m].tolist(),
                                         "frequencies": self.frequencies(block, m).tolist(),
                                         "cov": dispatch_cov(self.frequencies(block, m))}
                               for m in self.modalities(block)}}
        return {"blocks": blocks}

    @staticmethod
    def from_dict(values):
        stats = ActivationStats()
        for block, entry in values["blocks"].items():
            block = int(block)
            stats.top_k[block] = int(entry["top_k"])
            stats.counts[block] = {Modality.parse(m): numpy.asarray(v["counts"], dtype=numpy.int64)
                                   for m, v in entry["modalities"].items()}
            stats.tokens[block] = {Modality.parse(m): int(v["tokens"]) for m, v in entry["modalities"].items()}
        return stats


def profiling_batches(images, modalities, patch_size, norm=None):
    # One unmasked batch per model modality present in 'images'; images of other modalities are skipped
    modalities = ordered_modalities(modalities)
    batches = []
    for modality in modalities:
        group = [image for image in images if image.modality is modality]
        if group:
            batches.append(assemble_batch(group, patch_size, 0.0, 0, norm))
    skipped = sorted({image.modality.value for image in images if image.modality not in modalities})
    if skipped:
        logging.warning(f"Skipping images of modalities the model lacks: {skipped}")
    return batches


def profile_activations(model, batches):
    """
    Exact collaborative dispatch counts of 'model' in evaluation mode (no gate noise) over 'batches'. Statistics
    describe how each modality's real patches are routed, so batches carrying masked patches are rejected.
    """
    model = model.copy().set_training(False)
    stats = ActivationStats()
    seen = 0
    for batch in batches:
        masked = [m.value for m in batch.modalities if numpy.any(batch.masks[m])]
        if masked:
            raise SurgeryError(f"Activation profiling needs unmasked patches, {masked} carry a mask")
        seen += 1
        for record in model.forward(batch).records:
            if record.bank == BANK_COLLABORATIVE:
                stats.add(record)
    if seen == 0:
        raise SurgeryError("Cannot profile activations over an empty corpus")
    for block in stats.blocks:
        for modality in stats.modalities(block):
            logging.info(f"Block {block} {modality.value} collaborative frequencies "
                         f"{numpy.round(stats.frequencies(block, modality), 4).tolist()}")
    return stats


def percentile_threshold(freqs, percentile=SurgeryConst.PERCENTILE.value):
    # Nearest rank: value at 1-based position ceil(p/100 * N) of the ascending frequencies
    freqs = numpy.sort(numpy.asarray(freqs, dtype=numkit.VERIFY_DTYPE))
    if freqs.size == 0:
        raise SurgeryError("Percentile of an empty frequency vector")
    rank = min(freqs.size, max(1, math.ceil(percentile * freqs.size / 100.0)))
    return float(freqs[rank - 1])


class PruneReport:
    """
    Outcome of sparse expert pruning.

    Attributes
    ----------
    layers:dict
        block -> {"thresholds": {modality: phi}, "retained_per_modality": {modality: [k]}, "retained": [k],
        "rescued": bool}
    params_before:int
    params_after:int
    """

    def __init__(self, layers, params_before, params_after, percentile, fixed_threshold):
        self.layers = layers
        self.params_before = params_before
        self.params_after = params_after
        self.percentile = percentile
        self.fixed_threshold = fixed_threshold
        return

    @property
    def retention(self):
        return self.params_after / self.params_before if self.params_before else 0.0

    def to_dict(self):
        return {"percentile": self.percentile, "fixed_threshold": self.fixed_threshold,
                "layers": {str(block): layer for block, layer in self.layers.items()},
                "params_before": self.params_before, "params_after": self.params_after,
                "retention": self.retention}


def retained_set(freqs, threshold):
    # Strict inequality f > phi
    return [int(k) for k in numpy.nonzero(numpy.asarray(freqs) > threshold)[0]]


def sparse_prune(model, stats, percentile=SurgeryConst.PERCENTILE.value, fixed_threshold=None):
    """
    Keeps, per RMoE block, the union over modalities of the collaborative experts whose modality-conditioned activation
    frequency exceeds that modality's threshold (nearest-rank 'percentile', or 'fixed_threshold' when given). Gate
    columns of dropped experts are deleted and K becomes min(K, survivors). Specialized and shared experts are kept.

    A block whose union would be empty keeps the most frequent expert of each modality instead; the report flags it.
    """
    pruned = model.copy()
    layers = {}
    for block, encoder_block in enumerate(pruned.blocks):
        if not encoder_block.is_moe:
            continue
        layer = encoder_block.ffn
        scope = list(layer.specialized.keys())
        thresholds, per_modality = {}, {}
        union = set()
        for modality in scope:
            freqs = stats.frequencies(block, modality)
            if freqs.shape[0] != len(layer.collaborative.experts):
                raise SurgeryError(f"Block {block} statistics cover {freqs.shape[0]} collaborative experts, "
                                   f"the model has {len(layer.collaborative.experts)}")
            threshold = float(fixed_threshold) if fixed_threshold is not None else percentile_threshold(
                freqs, percentile)
            thresholds[modality.value] = threshold
            per_modality[modality.value] = retained_set(freqs, threshold)
            union.update(per_modality[modality.value])

        rescued = len(union) == 0
        if rescued:
            union = {int(numpy.argmax(stats.frequencies(block, m))) for m in scope}
            logging.warning(f"Block {block} would retain no collaborative expert, keeping the most frequent "
                            f"{sorted(union)}")
        kept = sorted(union)
        gate = layer.collaborative.gate
        layer.collaborative = ExpertBank([layer.collaborative.experts[k] for k in kept],
                                         GatingNetwork(gate.w_g[:, kept].copy(), gate.w_noise[:, kept].copy(),
                                                       min(gate.top_k, len(kept)), gate.noise_enabled))
        layers[block] = {"thresholds": thresholds, "retained_per_modality": per_modality, "retained": kept,
                         "rescued": rescued}
        logging.info(f"Block {block}: thresholds {thresholds}, retained {kept}")

    report = PruneReport(layers, model.count_parameters(), pruned.count_parameters(), percentile, fixed_threshold)
    logging.info(f"Pruning kept {report.params_after} of {report.params_before} parameters")
    return pruned, report


def decompose_modality(model, modality):
    # Sub-model with only the embedder, decoder and specialized banks of 'modality'
    modality = Modality.parse(modality)
    if modality not in model.embedders:
        raise SurgeryError(f"Model has no modality '{modality.value}'")
    sub = model.copy()
    sub.embedders = {modality: sub.embedders[modality]}
    sub.decoder.projections = {modality: sub.decoder.projections[modality]}
    for block in sub.blocks:
        if block.is_moe:
            block.ffn.specialized = {modality: block.ffn.specialized[modality]}
    values = sub.cfg.to_dict()
    values["modalities"] = [modality.value]
    sub.cfg = EncoderConfig.from_dict(values)
    return sub


def _fusion_scope(layer, modality):
    if modality is None:
        if len(layer.specialized) != 1:
            raise SurgeryError("Dense fusion needs a single modality: decompose the model or name one")
        modality = next(iter(layer.specialized))
    modality = Modality.parse(modality)
    if modality not in layer.specialized:
        raise SurgeryError(f"Layer has no specialized bank for '{modality.value}'")
    return modality


def _fusion_experts(layer, modality):
    experts = list(layer.experts(_fusion_scope(layer, modality)))
    shapes = {(e.w1.shape, e.b1.shape, e.w2.shape, e.b2.shape) for e in experts}
    if len(shapes) != 1:
        raise SurgeryError(f"Experts disagree on shapes: {sorted(shapes)}")
    return experts


def _sum(arrays):
    total = numpy.zeros(arrays[0].shape, dtype=numkit.VERIFY_DTYPE)
    for array in arrays:
        total = total + array
    return total


def knowledge_sum(layer, modality=None):
    experts = _fusion_experts(layer, modality)
    dtype = experts[0].w1.dtype
    parts = [_sum([getattr(e, name) for e in experts]).astype(dtype) for name in ("w1", "b1", "w2", "b2")]
    return FusedFFN(*parts, provenance=SurgeryConst.PROVENANCE.value[SurgeryConst.STRATEGY_KS.value])


def knowledge_average(layer, modality=None):
    experts = _fusion_experts(layer, modality)
    dtype = experts[0].w1.dtype
    parts = [(_sum([getattr(e, name) for e in experts]) / len(experts)).astype(dtype)
             for name in ("w1", "b1", "w2", "b2")]
    return FusedFFN(*parts, provenance=SurgeryConst.PROVENANCE.value[SurgeryConst.STRATEGY_KA.value])


def truncated_svd(w, rank):
    """
    Rank-'rank' truncation of 'w' by SVD.

    Returns (approximation, discarded) where 'discarded' is the sum of squared dropped singular values, the squared
    Frobenius error of the best rank-'rank' approximation.
    """
    u, s, v = numkit.svd(w)
    return numkit.low_rank(u, s, v, rank), float(numpy.sum(s[rank:] ** 2))


def block_concat_product(weights, rank):
    # [U_1 S_1 | ... | U_N S_N] @ [V_1^T; ...; V_N^T] with every factor truncated to 'rank'
    left, right = [], []
    for w in weights:
        u, s, v = numkit.svd(w)
        r = min(rank, s.shape[0])
        left.append(u[:, :r] * s[:r])
        right.append(v[:, :r].T)
    return numkit.matmul(numpy.concatenate(left, axis=1), numpy.concatenate(right, axis=0))


def compressed_sum(weights, rank):
    return _sum([truncated_svd(w, rank)[0] for w in weights])


def knowledge_compress(layer, modality=None):
    """
    SVD low-rank fusion: each specialized expert projection is truncated to rank d2 / N_S and each collaborative one
    to rank d2 / N_C; the truncations are summed per bank and added to the shared expert. Biases are summed.
    """
    modality = _fusion_scope(layer, modality)
    specialized = layer.specialized[modality].experts
    collaborative = layer.collaborative.experts
    shared = layer.shared
    d2 = shared.d2
    for name, count in (("specialized", len(specialized)), ("collaborative", len(collaborative))):
        if count == 0 or d2 % count != 0:
            raise SurgeryError(f"Hidden width {d2} is not divisible by the {count} {name} experts")
    rank_s, rank_c = d2 // len(specialized), d2 // len(collaborative)

    dtype = shared.w1.dtype
    parts = {}
    for name in ("w1", "w2"):
        fused = (compressed_sum([getattr(e, name) for e in specialized], rank_s)
                 + compressed_sum([getattr(e, name) for e in collaborative], rank_c)
                 + getattr(shared, name).astype(numkit.VERIFY_DTYPE))
        parts[name] = fused.astype(dtype)
    for name in ("b1", "b2"):
        parts[name] = _sum([getattr(e, name) for e in list(specialized) + list(collaborative) + [shared]]).astype(dtype)
    return FusedFFN(parts["w1"], parts["b1"], parts["w2"], parts["b2"],
                    provenance=SurgeryConst.PROVENANCE.value[SurgeryConst.STRATEGY_KC.value])


FUSIONS = {
    SurgeryConst.STRATEGY_KS.value: knowledge_sum,
    SurgeryConst.STRATEGY_KA.value: knowledge_average,
    SurgeryConst.STRATEGY_KC.value: knowledge_compress,
}


def densify(model, strategy, modality=None):
    # Replaces every RMoE layer by its fused dense FFN; multi-modal models are decomposed to 'modality' first
    if strategy not in FUSIONS:
        raise SurgeryError(f"Unknown fusion strategy '{strategy}', expected one of {sorted(FUSIONS)}")
    if len(model.modalities) > 1:
        if modality is None:
            raise SurgeryError("Dense fusion of a multi-modal model needs a target modality")
        model = decompose_modality(model, modality)
    else:
        model = model.copy()
    for block, encoder_block in enumerate(model.blocks):
        if encoder_block.is_moe:
            encoder_block.ffn = FUSIONS[strategy](encoder_block.ffn)
            logging.info(f"Block {block} fused by {encoder_block.ffn.provenance}")
    return model
