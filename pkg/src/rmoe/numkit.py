#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Dense numeric kernels every other rmoe module is built from
#
# Tensors are row-major numpy arrays. float32 is the training precision and float64 the verification precision.
# matmul accumulates sequentially over the inner extent, so results match a naive triple loop bit for bit and are
# reproducible across runs.

import math

import numpy

from rmoe.constants import NumConst
from rmoe.errors import ConvergenceError, NonFiniteError, ShapeError

TRAIN_DTYPE = numpy.float32
VERIFY_DTYPE = numpy.float64


class SeededRng:
    """
    Reproducible random stream built on numpy's counter-based Philox bit generator.

    Attributes
    ----------
    seed:int
        64-bit seed the stream was created from
    keys:tuple
        derivation keys, empty for a root stream

    Methods
    -------
    derive(*keys)
        Returns an independent SeededRng keyed on this seed plus 'keys'. Same keys always give the same stream.

    normal(shape, dtype)
        Standard normal draws of 'shape'.

    sample_without_replacement(population, count)
        'count' unique indices below 'population', uniformly chosen.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed, keys=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed, *self.keys] if self.keys else self.seed
        self.generator = numpy.random.Generator(numpy.random.Philox(numpy.random.SeedSequence(entropy)))
        return

    def derive(self, *keys):
        return SeededRng(self.seed, self.keys + tuple(keys))

    def normal(self, shape, dtype=TRAIN_DTYPE):
        return self.generator.standard_normal(shape).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def gamma(self, shape, scale, size=None):
        return self.generator.gamma(shape, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def sample_without_replacement(self, population, count):
        return self.generator.permutation(population)[:count]


def check_finite(values, what="tensor"):
    if not numpy.all(numpy.isfinite(values)):
        raise NonFiniteError(f"Non-finite values in {what}")
    return values


def as_tensor(values, dtype=TRAIN_DTYPE):
    # Copying constructor that enforces the finite-scalar invariant
    tensor = numpy.array(values, dtype=dtype)
    return check_finite(tensor, "tensor construction")


def matmul(a, b):
    a = numpy.asarray(a)
    b = numpy.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} x {b.shape}")

    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = a.shape[:-2]
    out = numpy.zeros(batch + (m, n), dtype=numpy.result_type(a, b))
    if k == 0 or m == 0 or n == 0:
        return out

    a3 = a.reshape((-1, m, k))
    b3 = b.reshape((-1, k, n))
    o3 = out.reshape((-1, m, n))
    chunk = NumConst.MATMUL_CHUNK_ELEMENTS.value
    per_item = m * k * n

    if per_item <= chunk:
        # Several batch items per pass
        step = max(1, chunk // per_item)
        for start in range(0, a3.shape[0], step):
            stop = min(a3.shape[0], start + step)
            product = a3[start:stop, :, :, None] * b3[start:stop, None, :, :]
            o3[start:stop] = numpy.add.accumulate(product, axis=2)[:, :, -1, :]
    else:
        rows = max(1, chunk // (k * n))
        for item in range(a3.shape[0]):
            for start in range(0, m, rows):
                stop = min(m, start + rows)
                product = a3[item, start:stop, :, None] * b3[item, None, :, :]
                o3[item, start:stop] = numpy.add.accumulate(product, axis=1)[:, -1, :]

    return check_finite(out, "matmul result")


def softmax(x, axis=-1):
    x = numpy.asarray(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x - numpy.max(x, axis=axis, keepdims=True)
    exponent = numpy.exp(shifted)
    return exponent / numpy.sum(exponent, axis=axis, keepdims=True)


def gelu(x):
    # tanh approximation
    x = numpy.asarray(x)
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + NumConst.GELU_COEFF.value * x ** 3)
    return 0.5 * x * (1.0 + numpy.tanh(inner))


def gelu_grad(x):
    x = numpy.asarray(x)
    c = math.sqrt(2.0 / math.pi)
    coeff = NumConst.GELU_COEFF.value
    t = numpy.tanh(c * (x + coeff * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * coeff * x * x)


def softplus(x):
    return numpy.logaddexp(0.0, numpy.asarray(x)).astype(numpy.asarray(x).dtype)


def sigmoid(x):
    x = numpy.asarray(x)
    return 0.5 * (1.0 + numpy.tanh(0.5 * x))


def layer_norm(x, gain, bias, eps=NumConst.LAYER_NORM_EPS.value):
    x = numpy.asarray(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("layer_norm over a zero-length row")
    if numpy.shape(gain) != (x.shape[-1],) or numpy.shape(bias) != (x.shape[-1],):
        raise ShapeError(f"layer_norm gain/bias must have shape ({x.shape[-1]},)")

    centered = x - numpy.mean(x, axis=-1, keepdims=True)
    variance = numpy.mean(centered * centered, axis=-1, keepdims=True)
    with numpy.errstate(divide="ignore", invalid="ignore"):
        normalized = centered / numpy.sqrt(variance + eps)
    # 0/0 on a constant row with eps == 0
    normalized = numpy.where(centered == 0, 0.0, normalized).astype(x.dtype)
    return check_finite(normalized * gain + bias, "layer_norm result")


def frobenius(x):
    x = numpy.asarray(x, dtype=VERIFY_DTYPE)
    return float(numpy.sqrt(numpy.sum(x * x)))


def svd(w, max_sweeps=None, tol=NumConst.SVD_TOLERANCE.value):
    """
    One-sided (Hestenes) Jacobi SVD computed in float64.

    Orthogonal plane rotations are applied to the columns of the tall orientation of 'w' until every column pair is
    orthogonal to within 'tol' (relative to the column norms). Raises ConvergenceError once 'max_sweeps' sweeps
    (default 100 * min(d1, d2)) pass without convergence.

    Returns U [d1 x r], S [r] (descending, non-negative) and V [d2 x r] with r = min(d1, d2) and w = U diag(S) V^T.
    """
    w = check_finite(numpy.asarray(w, dtype=VERIFY_DTYPE), "svd input")
    if w.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {w.shape}")

    d1, d2 = w.shape
    transposed = d1 < d2
    a = (w.T if transposed else w).copy()
    rows, cols = a.shape
    v = numpy.eye(cols, dtype=VERIFY_DTYPE)

    if max_sweeps is None:
        max_sweeps = NumConst.SVD_SWEEPS_PER_DIM.value * max(1, min(d1, d2))

    converged = cols < 2
    sweep = 0
    while not converged:
        if sweep >= max_sweeps:
            raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
        sweep += 1
        off = 0.0
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                alpha = float(numpy.dot(a[:, p], a[:, p]))
                beta = float(numpy.dot(a[:, q], a[:, q]))
                gamma = float(numpy.dot(a[:, p], a[:, q]))
                if alpha == 0.0 or beta == 0.0 or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                if abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                column = a[:, p].copy()
                a[:, p] = c * column - s * a[:, q]
                a[:, q] = s * column + c * a[:, q]
                column = v[:, p].copy()
                v[:, p] = c * column - s * v[:, q]
                v[:, q] = s * column + c * v[:, q]
        converged = off <= tol

    norms = numpy.sqrt(numpy.sum(a * a, axis=0))
    order = numpy.argsort(-norms, kind="stable")
    singular = norms[order]
    a = a[:, order]
    v = v[:, order]

    u = numpy.zeros((rows, cols), dtype=VERIFY_DTYPE)
    scale = singular[0] if cols > 0 else 0.0
    for j in range(cols):
        if singular[j] > scale * 1e-15 and singular[j] > 0.0:
            u[:, j] = a[:, j] / singular[j]
        else:
            singular[j] = 0.0
    u = _complete_basis(u, singular > 0.0)

    if transposed:
        return v, singular, u
    return u, singular, v


def _complete_basis(u, filled):
    # Fill the columns of 'u' not marked 'filled' with orthonormal vectors (Gram-Schmidt over the standard basis)
    rows, cols = u.shape
    candidate = 0
    for j in range(cols):
        if filled[j]:
            continue
        while candidate < rows:
            vector = numpy.zeros(rows, dtype=u.dtype)
            vector[candidate] = 1.0
            candidate += 1
            for other in range(cols):
                if filled[other]:
                    vector -= numpy.dot(u[:, other], vector) * u[:, other]
            # second pass for numerical orthogonality
            for other in range(cols):
                if filled[other]:
                    vector -= numpy.dot(u[:, other], vector) * u[:, other]
            norm = math.sqrt(float(numpy.dot(vector, vector)))
            if norm > 1e-8:
                u[:, j] = vector / norm
                filled = filled.copy()
                filled[j] = True
                break
    return u


def low_rank(u, s, v, rank):
    # Rank-'rank' reconstruction U_K diag(S_K) V_K^T
    rank = min(rank, s.shape[0])
    return matmul(u[:, :rank] * s[:rank], v[:, :rank].T)
