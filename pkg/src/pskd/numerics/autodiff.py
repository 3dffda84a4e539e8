"""Tape-based reverse-mode differentiation over numpy arrays.

Values are plain ``numpy.ndarray``; a :class:`Var` wraps one together with the
tape it was recorded on.  A ``Var`` whose ``tape`` is ``None`` is a constant and
ops on constants only compute values, which is how inference runs tape-free.

Every op kind is registered in ``BACKWARD_RULES``; :func:`backward` looks up the
rule by name so that a rule can be swapped out (see :func:`corrupted_backward`).
"""
from __future__ import annotations

import contextlib
from typing import Callable

import numpy as np

from ..errors import InternalError, ParameterError

PROB_EPS = 1e-12

BACKWARD_RULES: dict[str, Callable] = {}


def backward_rule(op):
    def register(fn):
        BACKWARD_RULES[op] = fn
        return fn

    return register


class Var:
    __slots__ = ("value", "tape", "op", "parents", "saved", "name")

    def __init__(self, value, tape=None, op=None, parents=(), saved=None, name=None):
        self.value = value
        self.tape = tape
        self.op = op
        self.parents = parents
        self.saved = saved
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or self.op or "const"
        return f"Var({tag}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Records ops in execution order; that order is a topological order of the graph."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def watch(self, name, value):
        if name in self.params:
            raise ParameterError(f"parameter {name!r} already registered on tape")
        v = Var(np.asarray(value), tape=self, name=name)
        self.params[name] = v
        return v

    def record(self, op, value, parents, saved=None):
        v = Var(value, tape=self, op=op, parents=parents, saved=saved)
        self.nodes.append(v)
        return v

    def __len__(self):
        return len(self.nodes)


def as_var(x):
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x))


def _tape_of(*vs):
    tape = None
    for v in vs:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise ParameterError("operands recorded on different tapes")
            tape = v.tape
    return tape


def _emit(op, value, parents, saved=None):
    tape = _tape_of(*parents)
    if tape is None:
        return Var(value)
    return tape.record(op, value, parents, saved)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_var(a), as_var(b)
    return _emit("add", a.value + b.value, (a, b))


@backward_rule("add")
def _add_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return _emit("sub", a.value - b.value, (a, b))


@backward_rule("sub")
def _sub_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _emit("mul", a.value * b.value, (a, b))


@backward_rule("mul")
def _mul_bw(g, node):
    a, b = node.parents
    return _unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)


def scale(a, s):
    """Multiply by a constant Python scalar."""
    a = as_var(a)
    s = float(s)
    return _emit("scale", a.value * s, (a,), s)


@backward_rule("scale")
def _scale_bw(g, node):
    return (g * node.saved,)


def relu(a):
    a = as_var(a)
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0).astype(a.value.dtype, copy=False), (a,), mask)


@backward_rule("relu")
def _relu_bw(g, node):
    return (g * node.saved,)


def square(a):
    a = as_var(a)
    return _emit("square", a.value * a.value, (a,))


@backward_rule("square")
def _square_bw(g, node):
    (a,) = node.parents
    return (2.0 * g * a.value,)


def log(a, eps=PROB_EPS):
    """Natural log of ``max(a, eps)``; zero gradient where the clamp is active."""
    a = as_var(a)
    clamped = np.maximum(a.value, eps)
    return _emit("log", np.log(clamped), (a,), (clamped, a.value >= eps))


@backward_rule("log")
def _log_bw(g, node):
    clamped, live = node.saved
    return (np.where(live, g / clamped, 0.0),)


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None):
    a = as_var(a)
    return _emit("sum", np.sum(a.value, axis=axis), (a,), axis)


@backward_rule("sum")
def _sum_bw(g, node):
    (a,) = node.parents
    axis = node.saved
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.value.shape).copy(),)


def mean(a, axis=None):
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return _emit("mean", np.mean(a.value, axis=axis), (a,), (axis, n))


@backward_rule("mean")
def _mean_bw(g, node):
    (a,) = node.parents
    axis, n = node.saved
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.value.shape).copy(),)


def reshape(a, shape):
    a = as_var(a)
    return _emit("reshape", a.value.reshape(shape), (a,))


@backward_rule("reshape")
def _reshape_bw(g, node):
    (a,) = node.parents
    return (g.reshape(a.value.shape),)


def take_labels(a, labels):
    """Pick ``a[b, labels[b]]`` for every row ``b``; returns shape (B,)."""
    a = as_var(a)
    labels = np.asarray(labels)
    rows = np.arange(a.value.shape[0])
    return _emit("take_labels", a.value[rows, labels], (a,), (rows, labels))


@backward_rule("take_labels")
def _take_labels_bw(g, node):
    (a,) = node.parents
    rows, labels = node.saved
    out = np.zeros_like(a.value)
    out[rows, labels] = g
    return (out,)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_var(a), as_var(b)
    return _emit("matmul", a.value @ b.value, (a, b))


@backward_rule("matmul")
def _matmul_bw(g, node):
    a, b = node.parents
    return g @ b.value.T, a.value.T @ g


def conv1d(x, w, b=None):
    """Same-padded 1-D convolution (cross-correlation) in time-major layout.

    x: (B, T, C_in), w: (C_out, C_in, K) with K odd, b: (C_out,).  Output (B, T, C_out).
    """
    x, w = as_var(x), as_var(w)
    if x.value.ndim != 3 or w.value.ndim != 3 or x.value.shape[2] != w.value.shape[1]:
        raise ParameterError(f"conv1d layout mismatch: x{x.value.shape} w{w.value.shape}")
    cout, cin, k = w.value.shape
    if k % 2 != 1:
        raise ParameterError("conv1d kernel size must be odd")
    pad = k // 2
    t = x.value.shape[1]
    xp = np.pad(x.value, ((0, 0), (pad, pad), (0, 0)))
    cols = np.concatenate([xp[:, j:j + t, :] for j in range(k)], axis=2)  # (B, T, K*C_in)
    wmat = w.value.transpose(0, 2, 1).reshape(cout, k * cin)
    out = (cols.reshape(-1, k * cin) @ wmat.T).reshape(cols.shape[0], t, cout)
    parents = (x, w)
    if b is not None:
        b = as_var(b)
        out += b.value
        parents = (x, w, b)
    return _emit("conv1d", out, parents, (cols, pad))


@backward_rule("conv1d")
def _conv1d_bw(g, node):
    x, w = node.parents[:2]
    cols, pad = node.saved
    cout, cin, k = w.value.shape
    bsz, t, _ = g.shape
    g2 = g.reshape(-1, cout)
    gw = (g2.T @ cols.reshape(-1, k * cin)).reshape(cout, k, cin).transpose(0, 2, 1)
    gcols = (g2 @ w.value.transpose(0, 2, 1).reshape(cout, k * cin)).reshape(bsz, t, k, cin)
    gxp = np.zeros((bsz, t + 2 * pad, cin), dtype=g.dtype)
    for j in range(k):
        gxp[:, j:j + t, :] += gcols[:, :, j, :]
    gx = gxp[:, pad:pad + t, :]
    if len(node.parents) == 3:
        return gx, gw, g2.sum(axis=0)
    return gx, gw


# ---------------------------------------------------------------- probability ops

def _softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z, temperature=1.0):
    z = as_var(z)
    p = _softmax_rows(z.value / temperature)
    return _emit("softmax", p, (z,), (p, temperature))


@backward_rule("softmax")
def _softmax_bw(g, node):
    p, temperature = node.saved
    inner = (g * p).sum(axis=1, keepdims=True)
    return (p * (g - inner) / temperature,)


def log_softmax(z, temperature=1.0):
    z = as_var(z)
    lp = _log_softmax_rows(z.value / temperature)
    return _emit("log_softmax", lp, (z,), (lp, temperature))


@backward_rule("log_softmax")
def _log_softmax_bw(g, node):
    lp, temperature = node.saved
    p = np.exp(lp)
    return ((g - p * g.sum(axis=1, keepdims=True)) / temperature,)


def kl_rows(p, q, eps=PROB_EPS):
    """Per-row KL(p || q) with 0*ln(0/q) = 0 and q clamped at eps; shape (B,)."""
    p, q = as_var(p), as_var(q)
    pv, qv = p.value, q.value
    qc = np.maximum(qv, eps)
    pos = pv > 0
    safe_p = np.where(pos, pv, 1.0)
    terms = np.where(pos, pv * (np.log(safe_p) - np.log(qc)), 0.0)
    return _emit("kl_rows", terms.sum(axis=1), (p, q), (qc, pos, safe_p, qv >= eps))


@backward_rule("kl_rows")
def _kl_rows_bw(g, node):
    p, q = node.parents
    qc, pos, safe_p, live = node.saved
    g = g[:, None]
    gp = np.where(pos, g * (np.log(safe_p) - np.log(qc) + 1.0), 0.0)
    gq = np.where(live, -g * p.value / qc, 0.0)
    return gp, gq


# ---------------------------------------------------------------- backward pass

def backward(tape, loss):
    """Gradients of scalar ``loss`` with respect to every parameter watched on ``tape``.

    Unreached parameters get a zero gradient.
    """
    if not isinstance(loss, Var) or loss.value.size != 1 or loss.value.ndim != 0:
        raise ParameterError("backward needs a 0-d scalar loss")
    if loss.tape is not tape:
        raise ParameterError("loss was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        rule = BACKWARD_RULES.get(node.op)
        if rule is None:
            raise InternalError(f"no backward rule for op {node.op!r}")
        parent_grads = rule(g, node)
        for parent, pg in zip(node.parents, parent_grads):
            if parent.tape is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=p.value.dtype)
    return out


@contextlib.contextmanager
def corrupted_backward(op, factor=1.1):
    """Temporarily scale the backward rule of ``op`` by ``factor`` (negative control)."""
    if op not in BACKWARD_RULES:
        raise ParameterError(f"unknown op {op!r}")
    original = BACKWARD_RULES[op]

    def broken(g, node):
        return tuple(pg * factor for pg in original(g, node))

    BACKWARD_RULES[op] = broken
    try:
        yield
    finally:
        BACKWARD_RULES[op] = original
