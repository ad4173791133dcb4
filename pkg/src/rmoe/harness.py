#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Training loop, AdamW, gradient clipping and the gradient-check suite

import logging

import numpy

from rmoe import numkit
from rmoe.constants import ConfigConst, GradConst, Modality
from rmoe.diff_engine import CompGraph, finite_diff_check
from rmoe.errors import NonFiniteError
from rmoe.modal_data import NormStats, SyntheticCorpus, assemble_batch, synth_scene
from rmoe.objectives import dispatch_cov, objective
from rmoe.rmoe_core import EncoderConfig, RMoEModel


class AdamW:
    """
    AdamW with decoupled weight decay: every parameter is first scaled by (1 - lr * weight_decay), then moved by the
    bias-corrected adaptive step lr * m_hat / (sqrt(v_hat) + eps). Updates happen in place.
    """

    def __init__(self, learning_rate=ConfigConst.LEARNING_RATE.value, weight_decay=ConfigConst.WEIGHT_DECAY.value,
                 beta1=ConfigConst.BETA1.value, beta2=ConfigConst.BETA2.value, eps=ConfigConst.ADAM_EPS.value):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        return

    @staticmethod
    def from_config(config):
        return AdamW(config.learning_rate, config.weight_decay, config.beta1, config.beta2, config.adam_eps)

    @staticmethod
    def init_moments(params):
        return {"m": {name: numpy.zeros_like(value) for name, value in params.items()},
                "v": {name: numpy.zeros_like(value) for name, value in params.items()}}

    def update(self, params, grads, moments, step):
        # 'step' counts from 1
        correction1 = 1.0 - self.beta1 ** step
        correction2 = 1.0 - self.beta2 ** step
        decay = 1.0 - self.learning_rate * self.weight_decay
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            dtype = param.dtype.type
            m = moments["m"][name]
            v = moments["v"][name]
            m *= dtype(self.beta1)
            m += dtype(1.0 - self.beta1) * grad
            v *= dtype(self.beta2)
            v += dtype(1.0 - self.beta2) * grad * grad
            m_hat = m / dtype(correction1)
            v_hat = v / dtype(correction2)
            param *= dtype(decay)
            param -= dtype(self.learning_rate) * m_hat / (numpy.sqrt(v_hat) + dtype(self.eps))
        return params


def adamw_update(params, grads, moments, step, config):
    return AdamW.from_config(config).update(params, grads, moments, step)


def global_norm(grads):
    return float(numpy.sqrt(sum(float(numpy.sum(numpy.square(g, dtype=numpy.float64))) for g in grads.values())))


def clip_gradients(grads, max_norm=ConfigConst.CLIP_NORM.value):
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: (g * g.dtype.type(scale)) for name, g in grads.items()}, norm


class TrainState:
    """
    Everything a training run owns: the model, optimizer moments, the step counter, the config it was built from,
    the normalization statistics of its corpus and the metric history.
    """

    def __init__(self, model, config, moments=None, step=0, stats=None):
        self.model = model
        self.config = config
        self.moments = moments if moments is not None else AdamW.init_moments(model.parameters())
        self.step = step
        self.stats = stats if stats is not None else NormStats.identity(model.modalities)
        self.history = []
        self.optimizer = AdamW.from_config(config)
        return

    @staticmethod
    def initialize(config, seed=None):
        seed = config.seed if seed is None else seed
        model = RMoEModel.initialize(config.encoder_config(), seed)
        return TrainState(model, config)


def train_step(state, batch, rng):
    model = state.model.set_training(True)
    try:
        result = model.forward(batch, rng)
        loss = objective(result, batch.targets, state.config.alpha)
        if not numpy.isfinite(loss.total.value):
            raise NonFiniteError("Loss is not finite")
        grads = result.graph.backward()
    except NonFiniteError as e:
        logging.error(f"Step {state.step + 1} ({[m.value for m in batch.modalities]}) diverged: {e}")
        raise

    grads, norm = clip_gradients(grads, state.config.clip_norm)
    state.step += 1
    state.optimizer.update(model.parameters(), grads, state.moments, state.step)

    metrics = loss.metrics()
    metrics["step"] = state.step
    metrics["grad_norm"] = norm
    metrics["modalities"] = [m.value for m in batch.modalities]
    metrics["collaborative_cov"] = {str(block): dispatch_cov(f)
                                    for block, f in loss.balance.collaborative_fractions().items()}
    state.history.append(metrics)
    return state, metrics


def pretrain(config, steps=None, seed=None, state=None, corpus=None):
    """
    Masked pretraining on a fixed synthetic corpus with round-robin single-modality batches. Deterministic per
    (seed, config).
    """
    config.validate()
    steps = config.steps if steps is None else steps
    seed = config.seed if seed is None else seed
    if state is None:
        state = TrainState.initialize(config, seed)
    modalities = [Modality.parse(m) for m in config.modalities]
    if corpus is None:
        corpus = SyntheticCorpus(modalities, config.corpus_size, seed, config.image_size)
    if config.normalize:
        state.stats = corpus.stats(config.stats_samples)

    logging.info(f"Pretraining {state.model.count_parameters()} parameters for {steps} steps on "
                 f"{[m.value for m in modalities]}")
    for _ in range(steps):
        modality = modalities[state.step % len(modalities)]
        batch = corpus.batch(modality, state.step, config.batch_size, config.patch_size, config.mask_ratio,
                             state.stats)
        state, metrics = train_step(state, batch, numkit.SeededRng(seed, (2, state.step)))
        if config.log_every > 0 and (state.step % config.log_every == 0 or state.step == 1):
            logging.info(f"step {state.step} {modality.value}: recon {metrics['recon']:.5f} "
                         f"balance {metrics['balance']:.5f} total {metrics['total']:.5f} "
                         f"grad norm {metrics['grad_norm']:.4f}")
    state.model.set_training(False)
    return state


# Gradient checks

def _weighted_sum(graph, node, rng):
    # Scalar loss sum(node * w) touching every output entry
    weights = graph.constant(rng.normal(node.shape, graph.dtype))
    return graph.sum(graph.mul(node, weights))


def _operation_cases():
    cases = {
        "add": lambda g, p: g.add(p("a", (3, 4)), p("b", (4,))),
        "sub": lambda g, p: g.sub(p("a", (3, 4)), p("b", (3, 1))),
        "mul": lambda g, p: g.mul(p("a", (3, 4)), p("b", (1, 4))),
        "scale": lambda g, p: g.scale(p("a", (2, 3)), -1.7),
        "matmul": lambda g, p: g.matmul(p("a", (3, 5)), p("b", (5, 2))),
        "batched_matmul": lambda g, p: g.matmul(p("a", (2, 3, 4)), p("b", (2, 4, 3))),
        "gelu": lambda g, p: g.gelu(p("a", (3, 4))),
        "softplus": lambda g, p: g.softplus(p("a", (3, 4))),
        "softmax": lambda g, p: g.softmax(p("a", (3, 5)), axis=-1),
        "layer_norm": lambda g, p: g.layer_norm(p("x", (3, 6)), p("gain", (6,)), p("bias", (6,))),
        "mean": lambda g, p: g.mean(p("a", (4, 3)), axis=0),
        "reshape_transpose": lambda g, p: g.transpose(g.reshape(p("a", (2, 6)), (2, 2, 3)), (1, 0, 2)),
        "take_rows": lambda g, p: g.take_rows(p("a", (5, 3)), [4, 0, 4, 2]),
        "take_column": lambda g, p: g.take_column(p("a", (5, 3)), [1, 3], 2),
        "scatter_rows": lambda g, p: g.scatter_rows(p("a", (2, 3)), [3, 0], 5),
        "concat": lambda g, p: g.concat([p("a", (2, 3)), p("b", (1, 3))], axis=0),
    }
    return cases


def check_operation(name, seed, eps=GradConst.EPS.value, tol=GradConst.TOL.value, atol=GradConst.ATOL.value):
    case = _operation_cases()[name]
    rng = numkit.SeededRng(seed, (3,))
    graph = CompGraph(numkit.VERIFY_DTYPE)

    def param(key, shape):
        return graph.parameter(key, rng.derive(len(graph.parameters)).normal(shape, numkit.VERIFY_DTYPE))

    out = case(graph, param)
    graph.set_output(_weighted_sum(graph, out, rng.derive(99)))
    return finite_diff_check(graph, eps, tol, atol, seed=seed)


def tiny_config(modalities=(Modality.OPT, Modality.SAR_L1), top_k=2):
    return EncoderConfig(model_dim=8, num_blocks=1, num_heads=2, expansion_factor=2, patch_size=4, image_size=8,
                         num_specialized=2, num_collaborative=2, top_k=top_k, modalities=list(modalities))


def tiny_batch(cfg, seed, samples=2, mask_ratio=0.5):
    images = [synth_scene(m, numkit.SeededRng(seed, (4, m.code, i)).integers(0, 2 ** 31), cfg.image_size)
              for m in cfg.modalities for i in range(samples)]
    return assemble_batch(images, cfg.patch_size, mask_ratio, seed, NormStats.compute(images))


def scaled_model(model, factor=GradConst.MODEL_SCALE.value):
    # Training init scaled up so the checked loss is far from linear; gate noise on
    for _, array in model.named_parameters():
        array *= array.dtype.type(factor)
    return model.set_training(True)


def loss_graph(model, batch, seed, alpha=ConfigConst.ALPHA.value):
    result = model.forward(batch, numkit.SeededRng(seed, (5,)))
    objective(result, batch.targets, alpha)
    return result.graph


def check_model(seed, eps=GradConst.EPS.value, tol=GradConst.TOL.value, atol=GradConst.ATOL.value,
                coords_per_param=GradConst.COORDS_PER_PARAM.value, alpha=ConfigConst.ALPHA.value,
                atol_scale=GradConst.ATOL_SCALE.value):
    # Full masked-reconstruction + balance loss of a d=8 model in float64
    cfg = tiny_config()
    model = scaled_model(RMoEModel.initialize(cfg, seed, numkit.VERIFY_DTYPE))
    graph = loss_graph(model, tiny_batch(cfg, seed), seed, alpha)
    return finite_diff_check(graph, eps, tol, atol, coords_per_param=coords_per_param, seed=seed, extrapolate=True,
                             atol_scale=atol_scale)


def check_model_f32(seed, eps=GradConst.EPS.value, tol=GradConst.F32_TOL.value, atol=GradConst.F32_ATOL.value,
                    coords_per_param=GradConst.COORDS_PER_PARAM.value, alpha=ConfigConst.ALPHA.value,
                    atol_scale=GradConst.F32_ATOL_SCALE.value):
    """
    float32 analytic gradients certified against float64 central differences of the same values. Entries whose
    true gradient vanishes (e.g. attention key biases, which softmax cancels) only carry float32 rounding noise, so
    differences below 'atol_scale' times the largest gradient entry pass.
    """
    cfg = tiny_config()
    model32 = scaled_model(RMoEModel.initialize(cfg, seed, numkit.TRAIN_DTYPE))
    batch = tiny_batch(cfg, seed)
    graph32 = loss_graph(model32, batch, seed, alpha)
    reference = graph32.backward()
    model64 = model32.astype(numkit.VERIFY_DTYPE)
    graph64 = loss_graph(model64, batch, seed, alpha)
    return finite_diff_check(graph64, eps, tol, atol, coords_per_param=coords_per_param, seed=seed,
                             reference=reference, extrapolate=True, atol_scale=atol_scale)


def gradcheck_suite(eps=GradConst.EPS.value, tol=GradConst.TOL.value, seeds=GradConst.SEEDS.value):
    """
    Runs every differentiable operation, the full float64 loss and the float32 path over 'seeds' seeds.
    Returns {case name: GradReport}.
    """
    reports = {}
    for seed in range(seeds):
        for name in _operation_cases():
            reports[f"{name}[{seed}]"] = check_operation(name, seed, eps, tol)
        reports[f"model_f64[{seed}]"] = check_model(seed, eps, tol)
        reports[f"model_f32[{seed}]"] = check_model_f32(seed, eps, max(tol, GradConst.F32_TOL.value))
    failed = [name for name, report in reports.items() if not report.passed]
    if failed:
        logging.error(f"Gradient check failed for {failed}")
    else:
        logging.info(f"Gradient check passed for {len(reports)} cases")
    return reports
