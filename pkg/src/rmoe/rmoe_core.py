#!/usr/bin/python3
# -*- coding:utf-8 -*-
# The model: expert FFNs, noisy top-K gates, the RMoE layer, a pre-norm encoder hosting it, and modal decoders

import copy
import math

import numpy

from rmoe import numkit
from rmoe.constants import ConfigConst, Modality, ModalityConst
from rmoe.diff_engine import CompGraph
from rmoe.errors import ConfigError, RoutingError, ShapeError

BANK_SPECIALIZED = "specialized"
BANK_COLLABORATIVE = "collaborative"


def ordered_modalities(modalities):
    modalities = {Modality.parse(m) for m in modalities}
    return [Modality(m) for m in ModalityConst.ORDER.value if Modality(m) in modalities]


class ExpertFFN:
    """
    Two-projection feed-forward expert GELU(x W1 + b1) W2 + b2.

    Attributes
    ----------
    w1:numpy.ndarray [d1 x d2]
    b1:numpy.ndarray [d2]
    w2:numpy.ndarray [d2 x d1]
    b2:numpy.ndarray [d1]

    Methods
    -------
    initialize(d1, d2, rng, dtype, std)
        Returns a randomly initialized expert (normal weights, zero biases).

    apply(graph, x, prefix)
        Records the expert on 'graph' for input Node 'x' with parameter names under 'prefix'. Returns the output Node.

    named_parameters(prefix)
        Yields (name, array) pairs.
    """

    def __init__(self, w1, b1, w2, b2):
        if w1.shape[1] != b1.shape[0] or w2.shape != (w1.shape[1], w1.shape[0]) or b2.shape[0] != w1.shape[0]:
            raise ShapeError(f"Inconsistent expert shapes {w1.shape} {b1.shape} {w2.shape} {b2.shape}")
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        return

    @staticmethod
    def initialize(d1, d2, rng, dtype=numkit.TRAIN_DTYPE, std=ConfigConst.INIT_STD.value):
        return ExpertFFN(rng.normal((d1, d2), dtype) * dtype(std), numpy.zeros(d2, dtype),
                         rng.normal((d2, d1), dtype) * dtype(std), numpy.zeros(d1, dtype))

    @staticmethod
    def zeros(d1, d2, dtype=numkit.TRAIN_DTYPE):
        return ExpertFFN(numpy.zeros((d1, d2), dtype), numpy.zeros(d2, dtype),
                         numpy.zeros((d2, d1), dtype), numpy.zeros(d1, dtype))

    @property
    def d1(self):
        return self.w1.shape[0]

    @property
    def d2(self):
        return self.w1.shape[1]

    def named_parameters(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2

    def apply(self, graph, x, prefix):
        x = graph.lift(x)
        if x.shape[-1] != self.d1:
            raise ShapeError(f"Expert expects last extent {self.d1}, got {x.shape[-1]}")
        hidden = graph.gelu(graph.add(graph.matmul(x, graph.parameter(f"{prefix}.w1", self.w1)),
                                      graph.parameter(f"{prefix}.b1", self.b1)))
        return graph.add(graph.matmul(hidden, graph.parameter(f"{prefix}.w2", self.w2)),
                         graph.parameter(f"{prefix}.b2", self.b2))


class FusedFFN(ExpertFFN):
    # A dense expert produced by knowledge summing, averaging or compressing one RMoE layer
    def __init__(self, w1, b1, w2, b2, provenance):
        super().__init__(w1, b1, w2, b2)
        self.provenance = provenance
        return


def expert_forward(expert, x):
    x = numpy.asarray(x)
    graph = CompGraph(x.dtype)
    return expert.apply(graph, graph.constant(x), "expert").value


class GateOutput:
    def __init__(self, weights, probs, selected):
        # weights: Node [n x N] top-K values of probs, zero elsewhere
        # probs: Node [n x N] full softmax H
        # selected: int array [n x K], ordered by descending probability
        self.weights = weights
        self.probs = probs
        self.selected = selected
        return


def top_k_mask(probs, k):
    # Stable sort on the negated values keeps the lowest expert index first among ties
    selected = numpy.argsort(-probs, axis=-1, kind="stable")[..., :k]
    mask = numpy.zeros(probs.shape, dtype=probs.dtype)
    numpy.put_along_axis(mask, selected, 1, axis=-1)
    return mask, selected


class GatingNetwork:
    """
    Noisy top-K gate: H = softmax(x W_g + N(0, 1) * softplus(x W_noise)), weights = TopK(H, K) without renormalization.
    Noise is only added while 'noise_enabled' (training).
    """

    def __init__(self, w_g, w_noise, top_k, noise_enabled=False):
        if w_g.shape != w_noise.shape:
            raise ShapeError(f"Gate weight shapes differ {w_g.shape} vs {w_noise.shape}")
        self.w_g = w_g
        self.w_noise = w_noise
        self.top_k = int(top_k)
        self.noise_enabled = noise_enabled
        return

    @staticmethod
    def initialize(d, num_experts, top_k, rng, dtype=numkit.TRAIN_DTYPE, std=ConfigConst.INIT_STD.value):
        return GatingNetwork(rng.normal((d, num_experts), dtype) * dtype(std),
                             numpy.zeros((d, num_experts), dtype), top_k)

    @property
    def num_experts(self):
        return self.w_g.shape[1]

    def named_parameters(self, prefix):
        yield f"{prefix}.w_g", self.w_g
        yield f"{prefix}.w_noise", self.w_noise

    def apply(self, graph, x, rng, prefix):
        if not 1 <= self.top_k <= self.num_experts:
            raise RoutingError(f"top-K {self.top_k} is outside [1, {self.num_experts}]")
        x = graph.lift(x)
        logits = graph.matmul(x, graph.parameter(f"{prefix}.w_g", self.w_g))
        if self.noise_enabled:
            if rng is None:
                raise RoutingError("Noisy gating needs a random stream")
            noise_scale = graph.softplus(graph.matmul(x, graph.parameter(f"{prefix}.w_noise", self.w_noise)))
            noise = graph.constant(rng.normal(logits.shape, graph.dtype))
            logits = graph.add(logits, graph.mul(noise, noise_scale))
        probs = graph.softmax(logits, axis=-1)
        # Selection is a constant mask: gradients only flow through the retained soft values
        mask, selected = top_k_mask(probs.value, self.top_k)
        weights = graph.mul(probs, graph.constant(mask))
        return GateOutput(weights, probs, selected)


def noisy_topk_gate(gate, x, rng=None):
    x = numpy.asarray(x)
    graph = CompGraph(x.dtype)
    out = gate.apply(graph, graph.constant(x), rng, "gate")
    return out.weights.value, out.selected


class DispatchRecord:
    """
    Which experts of one gated bank fired for each token of one forward pass.

    Attributes
    ----------
    block:int
        encoder block index
    bank:str
        'specialized' or 'collaborative'
    bank_modality:Modality
        owner of a specialized bank, None for the collaborative bank
    token_modality:Modality
        modality of the routed tokens
    selected:numpy.ndarray [n x K]
        chosen expert indices per token
    probs:Node [n x N]
        soft gate probabilities H on the graph the pass was recorded on
    """

    def __init__(self, block, bank, bank_modality, token_modality, selected, probs, num_experts, top_k):
        self.block = block
        self.bank = bank
        self.bank_modality = bank_modality
        self.token_modality = token_modality
        self.selected = selected
        self.probs = probs
        self.num_experts = num_experts
        self.top_k = top_k
        return

    @property
    def num_tokens(self):
        return self.selected.shape[0]

    def counts(self):
        return numpy.bincount(self.selected.reshape(-1), minlength=self.num_experts)


class ExpertBank:
    # N experts behind one gating network
    def __init__(self, experts, gate):
        if len(experts) != gate.num_experts:
            raise ShapeError(f"{len(experts)} experts but the gate routes to {gate.num_experts}")
        self.experts = experts
        self.gate = gate
        return

    @staticmethod
    def initialize(d, d2, num_experts, top_k, rng, dtype, std):
        experts = [ExpertFFN.initialize(d, d2, rng.derive(k), dtype, std) for k in range(num_experts)]
        return ExpertBank(experts, GatingNetwork.initialize(d, num_experts, min(top_k, num_experts),
                                                            rng.derive(num_experts), dtype, std))

    def named_parameters(self, prefix):
        yield from self.gate.named_parameters(f"{prefix}.gate")
        for k, expert in enumerate(self.experts):
            yield from expert.named_parameters(f"{prefix}.experts.{k}")

    def apply(self, graph, x, rng, prefix):
        gate_out = self.gate.apply(graph, x, rng, f"{prefix}.gate")
        count = x.shape[0]
        total = None
        for k, expert in enumerate(self.experts):
            rows = numpy.nonzero(numpy.any(gate_out.selected == k, axis=1))[0]
            if rows.size == 0:
                continue
            output = expert.apply(graph, graph.take_rows(x, rows), f"{prefix}.experts.{k}")
            weighted = graph.mul(output, graph.take_column(gate_out.weights, rows, k))
            contribution = graph.scatter_rows(weighted, rows, count)
            total = contribution if total is None else graph.add(total, contribution)
        if total is None:
            total = graph.constant(numpy.zeros(x.shape, dtype=x.value.dtype))
        return total, gate_out


class RMoELayer:
    """
    Hierarchical mixture of modality experts: y_m = y_m^S + y_m^C + E^Shared(x_m), where y_m^S routes through the
    specialized bank of modality m only, y_m^C through the collaborative bank and the shared expert is gate-free.

    Attributes
    ----------
    specialized:dict
        Modality -> ExpertBank
    collaborative:ExpertBank
    shared:ExpertFFN
    """

    def __init__(self, specialized, collaborative, shared):
        self.specialized = specialized
        self.collaborative = collaborative
        self.shared = shared
        return

    @staticmethod
    def initialize(d, d2, modalities, num_specialized, num_collaborative, top_k, rng,
                   dtype=numkit.TRAIN_DTYPE, std=ConfigConst.INIT_STD.value):
        specialized = {m: ExpertBank.initialize(d, d2, num_specialized, top_k, rng.derive(0, m.code), dtype, std)
                       for m in ordered_modalities(modalities)}
        collaborative = ExpertBank.initialize(d, d2, num_collaborative, top_k, rng.derive(1), dtype, std)
        shared = ExpertFFN.initialize(d, d2, rng.derive(2), dtype, std)
        return RMoELayer(specialized, collaborative, shared)

    def gates(self):
        yield from (bank.gate for bank in self.specialized.values())
        yield self.collaborative.gate

    def experts(self, modality=None):
        # All experts of one modality's scope: specialized bank (of 'modality' or all), collaborative, shared
        if modality is None:
            banks = list(self.specialized.values())
        else:
            banks = [self.specialized[Modality.parse(modality)]]
        for bank in banks:
            yield from bank.experts
        yield from self.collaborative.experts
        yield self.shared

    def named_parameters(self, prefix):
        for modality, bank in self.specialized.items():
            yield from bank.named_parameters(f"{prefix}.specialized.{modality.value}")
        yield from self.collaborative.named_parameters(f"{prefix}.collaborative")
        yield from self.shared.named_parameters(f"{prefix}.shared")

    def apply(self, graph, x, modality, rng, prefix, block=0):
        modality = Modality.parse(modality)
        if modality not in self.specialized:
            raise RoutingError(f"No specialized bank for modality '{modality.value}'")
        x = graph.lift(x)
        bank = self.specialized[modality]
        y_s, gate_s = bank.apply(graph, x, None if rng is None else rng.derive(0),
                                 f"{prefix}.specialized.{modality.value}")
        y_c, gate_c = self.collaborative.apply(graph, x, None if rng is None else rng.derive(1),
                                               f"{prefix}.collaborative")
        y_shared = self.shared.apply(graph, x, f"{prefix}.shared")
        records = [
            DispatchRecord(block, BANK_SPECIALIZED, modality, modality, gate_s.selected, gate_s.probs,
                           bank.gate.num_experts, bank.gate.top_k),
            DispatchRecord(block, BANK_COLLABORATIVE, None, modality, gate_c.selected, gate_c.probs,
                           self.collaborative.gate.num_experts, self.collaborative.gate.top_k),
        ]
        return graph.add(graph.add(y_s, y_c), y_shared), records


def rmoe_forward(layer, x_m, modality, rng=None):
    x_m = numkit.check_finite(numpy.asarray(x_m), "RMoE input")
    graph = CompGraph(x_m.dtype)
    y, records = layer.apply(graph, graph.constant(x_m), modality, rng, "moe")
    return y.value, records


class Attention:
    # Multi-head self-attention within each sample
    NAMES = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]

    def __init__(self, weights, num_heads):
        self.weights = weights
        self.num_heads = num_heads
        return

    @staticmethod
    def initialize(d, num_heads, rng, dtype=numkit.TRAIN_DTYPE, std=ConfigConst.INIT_STD.value):
        weights = {}
        for i, name in enumerate(Attention.NAMES):
            if name.startswith("w"):
                weights[name] = rng.derive(i).normal((d, d), dtype) * dtype(std)
            else:
                weights[name] = numpy.zeros(d, dtype)
        return Attention(weights, num_heads)

    @staticmethod
    def zeros(d, num_heads, dtype=numkit.TRAIN_DTYPE):
        return Attention({name: numpy.zeros((d, d) if name.startswith("w") else d, dtype)
                          for name in Attention.NAMES}, num_heads)

    def named_parameters(self, prefix):
        for name in Attention.NAMES:
            yield f"{prefix}.{name}", self.weights[name]

    def _project(self, graph, x, name, prefix):
        return graph.add(graph.matmul(x, graph.parameter(f"{prefix}.w{name}", self.weights[f"w{name}"])),
                         graph.parameter(f"{prefix}.b{name}", self.weights[f"b{name}"]))

    def apply(self, graph, x, samples, tokens, prefix):
        d = x.shape[-1]
        heads = self.num_heads
        head_dim = d // heads

        def split(node):
            return graph.transpose(graph.reshape(node, (samples, tokens, heads, head_dim)), (0, 2, 1, 3))

        q = split(self._project(graph, x, "q", prefix))
        k = split(self._project(graph, x, "k", prefix))
        v = split(self._project(graph, x, "v", prefix))
        scores = graph.scale(graph.matmul(q, graph.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
        context = graph.matmul(graph.softmax(scores, axis=-1), v)
        context = graph.reshape(graph.transpose(context, (0, 2, 1, 3)), (samples * tokens, d))
        return self._project(graph, context, "o", prefix)


class EncoderBlock:
    # Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x)) where FFN is an RMoELayer or a dense FusedFFN
    def __init__(self, norm1, attention, norm2, ffn):
        self.norm1 = norm1
        self.attention = attention
        self.norm2 = norm2
        self.ffn = ffn
        return

    @property
    def is_moe(self):
        return isinstance(self.ffn, RMoELayer)

    def named_parameters(self, prefix):
        yield f"{prefix}.norm1.gain", self.norm1[0]
        yield f"{prefix}.norm1.bias", self.norm1[1]
        yield from self.attention.named_parameters(f"{prefix}.attn")
        yield f"{prefix}.norm2.gain", self.norm2[0]
        yield f"{prefix}.norm2.bias", self.norm2[1]
        if self.is_moe:
            yield from self.ffn.named_parameters(f"{prefix}.moe")
        else:
            yield from self.ffn.named_parameters(f"{prefix}.ffn")

    def apply(self, graph, x, samples, tokens, modality, rng, prefix, block):
        normed = graph.layer_norm(x, graph.parameter(f"{prefix}.norm1.gain", self.norm1[0]),
                                  graph.parameter(f"{prefix}.norm1.bias", self.norm1[1]))
        x = graph.add(x, self.attention.apply(graph, normed, samples, tokens, f"{prefix}.attn"))
        normed = graph.layer_norm(x, graph.parameter(f"{prefix}.norm2.gain", self.norm2[0]),
                                  graph.parameter(f"{prefix}.norm2.bias", self.norm2[1]))
        if self.is_moe:
            out, records = self.ffn.apply(graph, normed, modality, rng, f"{prefix}.moe", block)
        else:
            out, records = self.ffn.apply(graph, normed, f"{prefix}.ffn"), []
        return graph.add(x, out), records


class EncoderConfig:
    """
    Shape hyperparameters of the encoder.

    Attributes
    ----------
    model_dim:int
    num_blocks:int
    num_heads:int
    expansion_factor:int
        expert hidden width d2 = expansion_factor * model_dim
    patch_size:int
    image_size:int
        square image extent, sets the positional table to (image_size / patch_size)^2 rows
    num_specialized:int
    num_collaborative:int
    top_k:int
    modalities:list
    init_std:float
    """

    FIELDS = ["model_dim", "num_blocks", "num_heads", "expansion_factor", "patch_size", "image_size",
              "num_specialized", "num_collaborative", "top_k", "init_std"]

    def __init__(self, model_dim=ConfigConst.MODEL_DIM.value, num_blocks=ConfigConst.NUM_BLOCKS.value,
                 num_heads=ConfigConst.NUM_HEADS.value, expansion_factor=ConfigConst.EXPANSION_FACTOR.value,
                 patch_size=ConfigConst.PATCH_SIZE.value, image_size=ConfigConst.IMAGE_SIZE.value,
                 num_specialized=ConfigConst.NUM_SPECIALIZED.value,
                 num_collaborative=ConfigConst.NUM_COLLABORATIVE.value, top_k=ConfigConst.TOP_K.value,
                 modalities=None, init_std=ConfigConst.INIT_STD.value):
        self.model_dim = int(model_dim)
        self.num_blocks = int(num_blocks)
        self.num_heads = int(num_heads)
        self.expansion_factor = int(expansion_factor)
        self.patch_size = int(patch_size)
        self.image_size = int(image_size)
        self.num_specialized = int(num_specialized)
        self.num_collaborative = int(num_collaborative)
        self.top_k = int(top_k)
        self.init_std = float(init_std)
        self.modalities = ordered_modalities(modalities if modalities is not None else ConfigConst.MODALITIES.value)
        self.validate()
        return

    def validate(self):
        if self.model_dim <= 0 or self.num_heads <= 0 or self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by num_heads {self.num_heads}")
        if self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} must be divisible by patch_size {self.patch_size}")
        if not 1 <= self.top_k <= min(self.num_specialized, self.num_collaborative):
            raise ConfigError(f"top_k {self.top_k} must lie in [1, min(N_S, N_C)]")
        if not self.modalities:
            raise ConfigError("At least one modality is required")
        return

    @property
    def hidden_dim(self):
        return self.expansion_factor * self.model_dim

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    def token_dim(self, modality):
        return self.patch_size ** 2 * Modality.parse(modality).channels

    def target_dim(self, modality):
        return self.patch_size ** 2 * Modality.parse(modality).target_channels

    def to_dict(self):
        values = {name: getattr(self, name) for name in EncoderConfig.FIELDS}
        values["modalities"] = [m.value for m in self.modalities]
        return values

    @staticmethod
    def from_dict(values):
        return EncoderConfig(**{key: values[key] for key in EncoderConfig.FIELDS + ["modalities"] if key in values})


class ModalDecoder:
    # One linear projection z -> x_hat per modality, no activation
    def __init__(self, projections):
        self.projections = projections
        return

    @staticmethod
    def initialize(cfg, rng, dtype=numkit.TRAIN_DTYPE):
        return ModalDecoder({m: (rng.derive(m.code).normal((cfg.model_dim, cfg.target_dim(m)), dtype)
                                 * dtype(cfg.init_std), numpy.zeros(cfg.target_dim(m), dtype))
                             for m in cfg.modalities})

    def named_parameters(self, prefix="decoder"):
        for modality, (weight, bias) in self.projections.items():
            yield f"{prefix}.{modality.value}.weight", weight
            yield f"{prefix}.{modality.value}.bias", bias

    def apply(self, graph, z, modality, prefix="decoder"):
        modality = Modality.parse(modality)
        if modality not in self.projections:
            raise RoutingError(f"No decoder for modality '{modality.value}'")
        weight, bias = self.projections[modality]
        return graph.add(graph.matmul(z, graph.parameter(f"{prefix}.{modality.value}.weight", weight)),
                         graph.parameter(f"{prefix}.{modality.value}.bias", bias))


def decode(decoder, z_m, modality):
    z_m = numpy.asarray(z_m)
    graph = CompGraph(z_m.dtype)
    return decoder.apply(graph, graph.constant(z_m), modality).value


class ForwardResult:
    def __init__(self, graph, latents, predictions, records):
        self.graph = graph
        self.latents = latents
        self.predictions = predictions
        self.records = records
        return


class RMoEModel:
    """
    Modal embedders, positional table, mask token, encoder blocks and modal decoders.

    Methods
    -------
    initialize(cfg, seed, dtype)
        Randomly initialized model for EncoderConfig 'cfg'.

    from_architecture(architecture, tensors)
        Rebuilds a model from its architecture description and a name -> array map (checkpoint loading).

    encode(graph, batch, rng)
        Records the encoder on 'graph'. Returns (latent Node per modality, dispatch records).

    forward(batch, rng, graph)
        Encode + decode. Returns a ForwardResult.

    set_training(flag)
        Turns gate noise on (training) or off (evaluation).
    """

    def __init__(self, cfg, embedders, pos_embed, mask_token, blocks, decoder):
        self.cfg = cfg
        self.embedders = embedders
        self.pos_embed = pos_embed
        self.mask_token = mask_token
        self.blocks = blocks
        self.decoder = decoder
        self.training = False
        return

    @staticmethod
    def initialize(cfg, seed=ConfigConst.SEED.value, dtype=numkit.TRAIN_DTYPE):
        rng = numkit.SeededRng(seed)
        std = dtype(cfg.init_std)
        d = cfg.model_dim
        embedders = {m: (rng.derive(1, m.code).normal((cfg.token_dim(m), d), dtype) * std, numpy.zeros(d, dtype))
                     for m in cfg.modalities}
        pos_embed = rng.derive(2).normal((cfg.num_patches, d), dtype) * std
        mask_token = rng.derive(3).normal((d,), dtype) * std
        blocks = []
        for i in range(cfg.num_blocks):
            block_rng = rng.derive(4, i)
            blocks.append(EncoderBlock(
                (numpy.ones(d, dtype), numpy.zeros(d, dtype)),
                Attention.initialize(d, cfg.num_heads, block_rng.derive(0), dtype, cfg.init_std),
                (numpy.ones(d, dtype), numpy.zeros(d, dtype)),
                RMoELayer.initialize(d, cfg.hidden_dim, cfg.modalities, cfg.num_specialized, cfg.num_collaborative,
                                     cfg.top_k, block_rng.derive(1), dtype, cfg.init_std)))
        decoder = ModalDecoder.initialize(cfg, rng.derive(5), dtype)
        return RMoEModel(cfg, embedders, pos_embed, mask_token, blocks, decoder)

    # Structure

    @property
    def modalities(self):
        return list(self.embedders.keys())

    @property
    def dtype(self):
        return self.pos_embed.dtype

    def named_parameters(self):
        for modality, (weight, bias) in self.embedders.items():
            yield f"embed.{modality.value}.weight", weight
            yield f"embed.{modality.value}.bias", bias
        yield "pos_embed", self.pos_embed
        yield "mask_token", self.mask_token
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"blocks.{i}")
        yield from self.decoder.named_parameters()

    def parameters(self):
        return dict(self.named_parameters())

    def count_parameters(self):
        return int(sum(array.size for _, array in self.named_parameters()))

    def architecture(self):
        blocks = []
        for block in self.blocks:
            if block.is_moe:
                blocks.append({"kind": "moe",
                               "num_specialized": {m.value: len(bank.experts)
                                                   for m, bank in block.ffn.specialized.items()},
                               "specialized_top_k": {m.value: bank.gate.top_k
                                                     for m, bank in block.ffn.specialized.items()},
                               "num_collaborative": len(block.ffn.collaborative.experts),
                               "collaborative_top_k": block.ffn.collaborative.gate.top_k})
            else:
                blocks.append({"kind": "dense", "provenance": getattr(block.ffn, "provenance", None)})
        encoder = self.cfg.to_dict()
        encoder["modalities"] = [m.value for m in self.modalities]
        return {"encoder": encoder, "blocks": blocks}

    @staticmethod
    def from_architecture(architecture, tensors=None, dtype=numkit.TRAIN_DTYPE):
        cfg = EncoderConfig.from_dict(architecture["encoder"])
        d, d2 = cfg.model_dim, cfg.hidden_dim
        embedders = {m: (numpy.zeros((cfg.token_dim(m), d), dtype), numpy.zeros(d, dtype)) for m in cfg.modalities}
        blocks = []
        for spec in architecture["blocks"]:
            if spec["kind"] == "moe":
                specialized = {}
                for m in cfg.modalities:
                    count = spec["num_specialized"][m.value]
                    specialized[m] = ExpertBank([ExpertFFN.zeros(d, d2, dtype) for _ in range(count)],
                                                GatingNetwork(numpy.zeros((d, count), dtype),
                                                              numpy.zeros((d, count), dtype),
                                                              spec["specialized_top_k"][m.value]))
                count = spec["num_collaborative"]
                collaborative = ExpertBank([ExpertFFN.zeros(d, d2, dtype) for _ in range(count)],
                                           GatingNetwork(numpy.zeros((d, count), dtype),
                                                         numpy.zeros((d, count), dtype),
                                                         spec["collaborative_top_k"]))
                ffn = RMoELayer(specialized, collaborative, ExpertFFN.zeros(d, d2, dtype))
            else:
                zero = ExpertFFN.zeros(d, d2, dtype)
                ffn = FusedFFN(zero.w1, zero.b1, zero.w2, zero.b2, spec.get("provenance"))
            blocks.append(EncoderBlock((numpy.ones(d, dtype), numpy.zeros(d, dtype)),
                                       Attention.zeros(d, cfg.num_heads, dtype),
                                       (numpy.ones(d, dtype), numpy.zeros(d, dtype)), ffn))
        decoder = ModalDecoder({m: (numpy.zeros((d, cfg.target_dim(m)), dtype), numpy.zeros(cfg.target_dim(m), dtype))
                                for m in cfg.modalities})
        model = RMoEModel(cfg, embedders, numpy.zeros((cfg.num_patches, d), dtype), numpy.zeros(d, dtype),
                          blocks, decoder)
        if tensors is not None:
            model.load_parameters(tensors)
        return model

    def load_parameters(self, tensors, strict=True):
        own = self.parameters()
        if strict:
            missing = sorted(set(own) - set(tensors))
            unexpected = sorted(set(tensors) - set(own))
            if missing or unexpected:
                raise ShapeError(f"Parameter mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, array in own.items():
            if name not in tensors:
                continue
            value = numpy.asarray(tensors[name])
            if value.shape != array.shape:
                raise ShapeError(f"Parameter '{name}' has shape {value.shape}, expected {array.shape}")
            array[...] = value
        return self

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        model = self.copy()
        return RMoEModel.from_architecture(model.architecture(), {name: array.astype(dtype) for name, array in
                                                                  model.named_parameters()}, dtype)._with_mode(
            self.training)

    def _with_mode(self, training):
        self.set_training(training)
        return self

    def set_training(self, training):
        self.training = bool(training)
        for block in self.blocks:
            if block.is_moe:
                for gate in block.ffn.gates():
                    gate.noise_enabled = self.training
        return self

    # Forward

    def embed(self, graph, tokens, mask, modality):
        samples, patches, width = tokens.shape
        if modality not in self.embedders:
            raise RoutingError(f"No embedder for modality '{modality.value}'")
        if patches != self.cfg.num_patches or width != self.cfg.token_dim(modality):
            raise ShapeError(f"Tokens of shape {tokens.shape} do not fit the encoder "
                             f"({self.cfg.num_patches} patches of width {self.cfg.token_dim(modality)})")
        weight, bias = self.embedders[modality]
        x = graph.constant(tokens.reshape(samples * patches, width))
        embedded = graph.add(graph.matmul(x, graph.parameter(f"embed.{modality.value}.weight", weight)),
                             graph.parameter(f"embed.{modality.value}.bias", bias))
        if mask is not None and numpy.any(mask):
            column = mask.reshape(samples * patches, 1).astype(graph.dtype)
            embedded = graph.add(graph.mul(embedded, graph.constant(1.0 - column)),
                                 graph.mul(graph.constant(column), graph.parameter("mask_token", self.mask_token)))
        positions = numpy.tile(numpy.arange(patches), samples)
        return graph.add(embedded, graph.take_rows(graph.parameter("pos_embed", self.pos_embed), positions))

    def encode(self, graph, batch, rng=None):
        latents = {}
        records = []
        for modality in batch.modalities:
            tokens = batch.tokens[modality]
            samples, patches = tokens.shape[:2]
            x = self.embed(graph, tokens, batch.masks.get(modality), modality)
            for i, block in enumerate(self.blocks):
                block_rng = None if rng is None else rng.derive(i, modality.code)
                x, block_records = block.apply(graph, x, samples, patches, modality, block_rng, f"blocks.{i}", i)
                records.extend(block_records)
            latents[modality] = x
        return latents, records

    def forward(self, batch, rng=None, graph=None):
        graph = CompGraph(self.dtype) if graph is None else graph
        latents, records = self.encode(graph, batch, rng)
        predictions = {m: self.decoder.apply(graph, z, m) for m, z in latents.items()}
        return ForwardResult(graph, latents, predictions, records)


def encoder_forward(model, batch, rng=None):
    result = model.forward(batch, rng)
    return {m: node.value for m, node in result.latents.items()}, result.records
