#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Reverse-mode differentiation over the numkit kernels, plus a central-difference gradient checker

import logging

import numpy

from rmoe import numkit
from rmoe.constants import GradConst, NumConst
from rmoe.errors import GraphError, NonFiniteError, ShapeError


class Node:
    """
    One value in a CompGraph: a parameter leaf, a constant leaf or a kernel application.

    Attributes
    ----------
    value:numpy.ndarray
        result of the last forward evaluation
    inputs:tuple
        input Nodes of a kernel application (empty for leaves)
    forward:callable
        forward(*input_values) -> value, None for leaves
    vjp:callable
        vjp(grad, value, *input_values) -> tuple of input gradients (None where not needed)
    name:str
        parameter name, None for everything else
    requires_grad:bool
        True when the node depends on a trainable parameter
    """

    __slots__ = ("value", "inputs", "forward", "vjp", "name", "requires_grad", "grad", "index")

    def __init__(self, value, inputs=(), forward=None, vjp=None, name=None, requires_grad=False):
        self.value = value
        self.inputs = inputs
        self.forward = forward
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad
        self.grad = None
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(name={self.name}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(grad, shape):
    # Sum 'grad' back down to 'shape' after numpy broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class CompGraph:
    """
    Define-by-run computation graph. Nodes are recorded in construction order, which is also a topological order, so
    backward() walks the list in reverse and replay() re-evaluates it forwards from the current leaf values.

    Attributes
    ----------
    dtype:numpy.dtype
        precision constants are cast to
    nodes:list
        every Node in construction order
    parameters:dict
        parameter name -> leaf Node
    output:Node
        scalar loss Node, set by set_output() or backward()

    Methods
    -------
    parameter(name, value, trainable)
        Registers a named leaf. Registering the same name twice returns the existing Node.

    constant(value)
        Registers a constant leaf. Constants never receive gradients.

    replay()
        Re-evaluates every kernel application in construction order.

    backward(output)
        Accumulates gradients from scalar 'output' and returns a dict parameter name -> gradient array.
    """

    def __init__(self, dtype=numkit.TRAIN_DTYPE):
        self.dtype = numpy.dtype(dtype)
        self.nodes = []
        self.parameters = {}
        self.output = None
        self.evaluated = True
        return

    # Leaves

    def _add(self, node):
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def parameter(self, name, value, trainable=True):
        if name in self.parameters:
            return self.parameters[name]
        value = numpy.asarray(value)
        numkit.check_finite(value, f"parameter '{name}'")
        node = self._add(Node(value, name=name, requires_grad=trainable))
        self.parameters[name] = node
        return node

    def constant(self, value):
        if isinstance(value, Node):
            return value
        value = numpy.asarray(value, dtype=self.dtype)
        numkit.check_finite(value, "constant")
        return self._add(Node(value))

    def lift(self, value):
        return value if isinstance(value, Node) else self.constant(value)

    def apply(self, forward, vjp, *inputs):
        inputs = tuple(self.lift(item) for item in inputs)
        value = forward(*(item.value for item in inputs))
        numkit.check_finite(value, "graph operation")
        requires_grad = any(item.requires_grad for item in inputs)
        return self._add(Node(value, inputs, forward, vjp, requires_grad=requires_grad))

    # Kernels

    def add(self, a, b):
        a, b = self.lift(a), self.lift(b)
        shape_a, shape_b = a.shape, b.shape
        return self.apply(numpy.add,
                          lambda g, out, x, y: (_unbroadcast(g, shape_a), _unbroadcast(g, shape_b)),
                          a, b)

    def sub(self, a, b):
        a, b = self.lift(a), self.lift(b)
        shape_a, shape_b = a.shape, b.shape
        return self.apply(numpy.subtract,
                          lambda g, out, x, y: (_unbroadcast(g, shape_a), -_unbroadcast(g, shape_b)),
                          a, b)

    def mul(self, a, b):
        a, b = self.lift(a), self.lift(b)
        shape_a, shape_b = a.shape, b.shape
        return self.apply(numpy.multiply,
                          lambda g, out, x, y: (_unbroadcast(g * y, shape_a), _unbroadcast(g * x, shape_b)),
                          a, b)

    def scale(self, a, factor):
        factor = float(factor)
        return self.apply(lambda x: x * x.dtype.type(factor),
                          lambda g, out, x: (g * x.dtype.type(factor),),
                          a)

    def matmul(self, a, b):
        return self.apply(numkit.matmul,
                          lambda g, out, x, y: (numkit.matmul(g, numpy.swapaxes(y, -1, -2)),
                                                numkit.matmul(numpy.swapaxes(x, -1, -2), g)),
                          a, b)

    def gelu(self, a):
        return self.apply(numkit.gelu,
                          lambda g, out, x: (g * numkit.gelu_grad(x),),
                          a)

    def softplus(self, a):
        return self.apply(numkit.softplus,
                          lambda g, out, x: (g * numkit.sigmoid(x),),
                          a)

    def softmax(self, a, axis=-1):
        def vjp(g, out, x):
            return (out * (g - numpy.sum(g * out, axis=axis, keepdims=True)),)

        return self.apply(lambda x: numkit.softmax(x, axis), vjp, a)

    def layer_norm(self, x, gain, bias, eps=NumConst.LAYER_NORM_EPS.value):
        def vjp(g, out, xv, gv, bv):
            centered = xv - numpy.mean(xv, axis=-1, keepdims=True)
            inv = 1.0 / numpy.sqrt(numpy.mean(centered * centered, axis=-1, keepdims=True) + eps)
            normalized = centered * inv
            rows = numpy.prod(xv.shape[:-1], dtype=int)
            dgain = numpy.sum((g * normalized).reshape(rows, -1), axis=0)
            dbias = numpy.sum(g.reshape(rows, -1), axis=0)
            dnorm = g * gv
            dx = inv * (dnorm - numpy.mean(dnorm, axis=-1, keepdims=True)
                        - normalized * numpy.mean(dnorm * normalized, axis=-1, keepdims=True))
            return dx, dgain, dbias

        return self.apply(lambda xv, gv, bv: numkit.layer_norm(xv, gv, bv, eps), vjp, x, gain, bias)

    def sum(self, a):
        def vjp(g, out, x):
            return (numpy.broadcast_to(g, x.shape).astype(x.dtype),)

        return self.apply(lambda x: numpy.sum(x, dtype=x.dtype), vjp, a)

    def mean(self, a, axis=0):
        def vjp(g, out, x):
            return (numpy.broadcast_to(numpy.expand_dims(g, axis) / x.shape[axis], x.shape).astype(x.dtype),)

        return self.apply(lambda x: numpy.mean(x, axis=axis, dtype=x.dtype), vjp, a)

    def reshape(self, a, shape):
        a = self.lift(a)
        original = a.shape
        return self.apply(lambda x: numpy.reshape(x, shape),
                          lambda g, out, x: (numpy.reshape(g, original),),
                          a)

    def transpose(self, a, axes):
        inverse = tuple(numpy.argsort(axes))
        return self.apply(lambda x: numpy.ascontiguousarray(numpy.transpose(x, axes)),
                          lambda g, out, x: (numpy.transpose(g, inverse),),
                          a)

    def take_rows(self, a, rows):
        rows = numpy.asarray(rows, dtype=int)

        def vjp(g, out, x):
            grad = numpy.zeros_like(x)
            numpy.add.at(grad, rows, g)
            return (grad,)

        return self.apply(lambda x: x[rows], vjp, a)

    def take_column(self, a, rows, column):
        # Gathers a[rows, column] as a (len(rows), 1) column
        rows = numpy.asarray(rows, dtype=int)

        def vjp(g, out, x):
            grad = numpy.zeros_like(x)
            numpy.add.at(grad, (rows, column), g[:, 0])
            return (grad,)

        return self.apply(lambda x: x[rows, column][:, None], vjp, a)

    def scatter_rows(self, a, rows, count):
        # Places the rows of 'a' at positions 'rows' of a zero (count, ...) tensor
        rows = numpy.asarray(rows, dtype=int)

        def forward(x):
            out = numpy.zeros((count,) + x.shape[1:], dtype=x.dtype)
            out[rows] = x
            return out

        return self.apply(forward, lambda g, out, x: (g[rows],), a)

    def concat(self, items, axis=0):
        items = [self.lift(item) for item in items]
        bounds = numpy.cumsum([0] + [item.shape[axis] for item in items])

        def vjp(g, out, *values):
            return tuple(numpy.take(g, numpy.arange(bounds[i], bounds[i + 1]), axis=axis)
                         for i in range(len(values)))

        return self.apply(lambda *values: numpy.concatenate(values, axis=axis), vjp, *items)

    # Evaluation

    def set_output(self, node):
        if node.value.size != 1:
            raise GraphError(f"Graph output must be scalar, got shape {node.value.shape}")
        self.output = node
        return node

    def replay(self):
        for node in self.nodes:
            if node.forward is not None:
                node.value = node.forward(*(item.value for item in node.inputs))
                numkit.check_finite(node.value, "graph replay")
        self.evaluated = True
        return self.output.value if self.output is not None else None

    def assign(self, name, value):
        # Replaces a parameter value; the graph must be replayed before backward()
        node = self.parameters[name]
        node.value = numpy.asarray(value, dtype=node.value.dtype).reshape(node.value.shape)
        self.evaluated = False
        return

    def backward(self, output=None):
        if output is not None:
            self.set_output(output)
        if self.output is None:
            raise GraphError("Graph has no scalar output")
        if self.output.value.size != 1:
            raise GraphError(f"Graph output must be scalar, got shape {self.output.value.shape}")
        if not self.evaluated:
            raise GraphError("Graph has not been evaluated since its parameters changed")

        for node in self.nodes:
            node.grad = None
        self.output.grad = numpy.ones_like(self.output.value)

        for node in reversed(self.nodes[:self.output.index + 1]):
            if node.grad is None or node.vjp is None or not node.requires_grad:
                continue
            grads = node.vjp(node.grad, node.value, *(item.value for item in node.inputs))
            for item, grad in zip(node.inputs, grads):
                if grad is None or not item.requires_grad:
                    continue
                grad = numpy.asarray(grad, dtype=item.value.dtype).reshape(item.value.shape)
                item.grad = grad.copy() if item.grad is None else item.grad + grad

        gradients = {}
        for name, node in self.parameters.items():
            if not node.requires_grad:
                continue
            grad = node.grad if node.grad is not None else numpy.zeros_like(node.value)
            numkit.check_finite(grad, f"gradient of '{name}'")
            gradients[name] = grad
        return gradients


def backward(graph, output=None):
    return graph.backward(output)


class GradReport:
    """
    Analytic vs. central-difference gradients for the checked coordinates of every parameter.

    Attributes
    ----------
    analytic:dict
        parameter name -> analytic gradient values at the checked coordinates
    numeric:dict
        parameter name -> central-difference values at the same coordinates
    errors:dict
        parameter name -> max relative error |a - n| / max(|a|, |n|, 1e-8) over coordinates that fail 'atol'
    max_error:float
        max over 'errors'
    passed:bool
        max_error <= tol
    """

    def __init__(self, tol, atol):
        self.tol = tol
        self.atol = atol
        self.analytic = {}
        self.numeric = {}
        self.errors = {}
        self.max_error = 0.0
        self.passed = True
        return

    @staticmethod
    def relative_error(analytic, numeric):
        analytic = numpy.asarray(analytic, dtype=numpy.float64)
        numeric = numpy.asarray(numeric, dtype=numpy.float64)
        floor = numpy.maximum(numpy.maximum(numpy.abs(analytic), numpy.abs(numeric)), GradConst.REL_FLOOR.value)
        return numpy.abs(analytic - numeric) / floor

    def add(self, name, analytic, numeric):
        analytic = numpy.asarray(analytic, dtype=numpy.float64)
        numeric = numpy.asarray(numeric, dtype=numpy.float64)
        self.analytic[name] = analytic
        self.numeric[name] = numeric
        relative = self.relative_error(analytic, numeric)
        relative = numpy.where(numpy.abs(analytic - numeric) <= self.atol, 0.0, relative)
        error = float(numpy.max(relative)) if relative.size else 0.0
        self.errors[name] = error
        self.max_error = max(self.max_error, error)
        self.passed = self.max_error <= self.tol
        return

    def summary(self):
        worst = sorted(self.errors.items(), key=lambda item: -item[1])[:5]
        return {"passed": self.passed, "max_error": self.max_error, "tol": self.tol, "atol": self.atol, "worst": worst}


def _central_difference(graph, flat, coord, eps):
    original = flat[coord]
    try:
        flat[coord] = original + eps
        plus = float(graph.replay())
        flat[coord] = original - eps
        minus = float(graph.replay())
    finally:
        flat[coord] = original
    return (plus - minus) / (2.0 * eps)


def finite_diff_check(graph, eps=GradConst.EPS.value, tol=GradConst.TOL.value, atol=GradConst.ATOL.value,
                      names=None, coords_per_param=None, seed=0, reference=None, extrapolate=False, atol_scale=0.0):
    """
    Compares the analytic gradients of graph.output with central differences (f(t + eps) - f(t - eps)) / 2 eps.

    'names' restricts the check to some parameters, 'coords_per_param' samples that many coordinates per parameter
    (seeded by 'seed') instead of checking every entry. 'reference' optionally supplies the analytic gradients to be
    certified (e.g. from a float32 run of the same model); by default they come from graph.backward().

    'extrapolate' combines the differences at eps and eps / 2 as (4 D(eps / 2) - D(eps)) / 3, which cancels the
    eps^2 truncation term. 'atol_scale' raises the absolute tolerance to atol_scale * max |analytic gradient| so that
    entries whose true gradient is zero are compared against the gradient scale of the whole model.
    Returns a GradReport.
    """
    if graph.output is None:
        raise GraphError("Graph has no scalar output")
    if not graph.evaluated:
        graph.replay()

    analytic = reference if reference is not None else graph.backward()
    scale = max((float(numpy.max(numpy.abs(g))) for g in analytic.values() if numpy.size(g)), default=0.0)
    report = GradReport(tol, max(atol, atol_scale * scale))
    rng = numkit.SeededRng(seed)
    names = list(analytic.keys()) if names is None else list(names)

    for position, name in enumerate(names):
        node = graph.parameters[name]
        flat = node.value.reshape(-1)
        size = flat.shape[0]
        if coords_per_param is None or coords_per_param >= size:
            coords = numpy.arange(size)
        else:
            coords = numpy.sort(rng.derive(position).sample_without_replacement(size, coords_per_param))

        numeric = numpy.zeros(coords.shape[0], dtype=numpy.float64)
        for i, coord in enumerate(coords):
            try:
                numeric[i] = _central_difference(graph, flat, coord, eps)
                if extrapolate:
                    half = _central_difference(graph, flat, coord, eps / 2.0)
                    numeric[i] = (4.0 * half - numeric[i]) / 3.0
            except NonFiniteError as e:
                graph.replay()
                raise NonFiniteError(f"Loss non-finite while perturbing '{name}'[{coord}]") from e

        report.add(name, numpy.asarray(analytic[name]).reshape(-1)[coords], numeric)

    graph.replay()
    logging.info(f"Gradient check: max relative error {report.max_error:.3e} (tol {tol:.1e}, "
                 f"atol {report.atol:.1e}), passed={report.passed}")
    return report


def check_shapes(expected, actual, what):
    if tuple(expected) != tuple(actual):
        raise ShapeError(f"{what}: expected shape {tuple(expected)}, got {tuple(actual)}")
    return
