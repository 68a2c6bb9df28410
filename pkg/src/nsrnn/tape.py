"""A small reverse-mode tape over numpy arrays.

Only the primitives the stack models and controllers need are provided.
Every primitive computes its value eagerly; when a :class:`Tape` is active
and some input requires a gradient, the primitive appends one node holding
its inputs, its output and a closure mapping the output adjoint to input
adjoints.  :meth:`Tape.backward` replays the nodes in reverse.

Nodes are recorded by handle, never by mutation: an op always produces a
fresh :class:`Var`, so replay needs no aliasing analysis.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .semiring import (
    DEFAULT_BLOCK_SIZE,
    contraction_adjoints,
    log_add as _log_add,
    logsumexp as _logsumexp,
    semiring_contract,
)

__all__ = [
    "Var", "Tape", "active_tape", "as_var", "no_grad",
    "add", "sub", "mul", "div", "neg", "affine", "matmul",
    "sigmoid", "tanh", "exp", "log", "log_sigmoid", "softmax", "log_softmax",
    "relu", "maximum", "minimum", "sum", "cumsum", "reshape", "transpose",
    "getitem", "concat", "stack", "logsumexp", "log_add", "contract",
    "where", "square",
]


class Var:
    """An array value that may take part in differentiation."""

    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []
_GRAD_ENABLED = [True]


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE and _GRAD_ENABLED[-1] else None


class no_grad:
    """Context manager that suspends recording on every tape."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; ops executed inside the block are recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Var] = {}

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)

    def record(self, out: Var, inputs: Sequence[Var], backward: Callable):
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, out: Var, seed=None) -> None:
        """Accumulate adjoints of every recorded value with respect to ``out``.

        Leaves that require gradients get their ``grad`` attribute set
        (accumulating into any existing gradient).
        """
        if seed is None:
            if out.value.size != 1:
                raise ValueError("backward() from a non-scalar needs an explicit seed")
            seed = np.ones_like(out.value)
        grads = {id(out): np.asarray(seed, dtype=np.float64).reshape(out.value.shape)}
        keep = {id(out): out}
        produced = set()
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for var, ig in zip(node.inputs, in_grads):
                if ig is None or not var.requires_grad:
                    continue
                key = id(var)
                keep[key] = var
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        self._grads = grads
        self._keep = keep
        for key, g in grads.items():
            var = keep[key]
            if key in produced:
                continue
            var.grad = g if var.grad is None else var.grad + g

    def adjoint(self, var: Var) -> np.ndarray:
        """Adjoint of a leaf after :meth:`backward`; zeros if unused."""
        if var.grad is not None:
            return var.grad
        return self._grads.get(id(var), np.zeros_like(var.value))

    def clear(self):
        self.nodes.clear()
        self._grads = {}
        self._keep = {}


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for k, n in enumerate(shape):
        if n == 1 and g.shape[k] != 1:
            g = g.sum(axis=k, keepdims=True)
    return g


def _make(value, inputs: Sequence[Var], backward: Callable) -> Var:
    req = any(v.requires_grad for v in inputs)
    out = Var(value, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        tape.record(out, inputs, backward)
    return out


# arithmetic

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    y = a.value / b.value
    return _make(y, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * y / b.value, b.shape)))


def neg(a) -> Var:
    a = as_var(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def square(a) -> Var:
    a = as_var(a)
    return _make(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,))


def matmul(x, w) -> Var:
    """``x @ w`` for ``x`` of shape [..., n] and ``w`` of shape [n, m]."""
    x, w = as_var(x), as_var(w)

    def back(g):
        gx = g @ w.value.T
        gw = x.value.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _make(x.value @ w.value, (x, w), back)


def affine(x, weight, bias) -> Var:
    """``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    x, weight, bias = as_var(x), as_var(weight), as_var(bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.value
        gw = g2.T @ x.value.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make(x.value @ weight.value.T + bias.value, (x, weight, bias), back)


# nonlinearities

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    y = _sigmoid(a.value)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a) -> Var:
    a = as_var(a)
    z = a.value
    y = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _make(y, (a,), lambda g: (g * _sigmoid(-z),))


def tanh(a) -> Var:
    a = as_var(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Var:
    a = as_var(a)
    y = np.exp(a.value)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Var:
    a = as_var(a)
    with np.errstate(divide="ignore"):
        y = np.log(a.value)
    return _make(y, (a,), lambda g: (g / a.value,))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    pick = a.value >= b.value
    return _make(np.maximum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape),
                            _unbroadcast(g * ~pick, b.shape)))


def minimum(a, b) -> Var:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    pick = a.value <= b.value
    return _make(np.minimum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick, a.shape),
                            _unbroadcast(g * ~pick, b.shape)))


def where(mask, a, b) -> Var:
    a, b = as_var(a), as_var(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    z = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    lse = _logsumexp(a.value, axis=axis, keepdims=True)
    y = a.value - lse
    p = np.exp(y)
    return _make(y, (a,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# reductions and shape ops

def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    y = np.sum(a.value, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(y, (a,), back)


def cumsum(a, axis: int = -1) -> Var:
    a = as_var(a)

    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make(np.cumsum(a.value, axis=axis), (a,), back)


def reshape(a, shape) -> Var:
    a = as_var(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, key) -> Var:
    a = as_var(a)

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.value[key], (a,), back)


def concat(parts: Sequence, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    ax = axis if axis >= 0 else parts[0].ndim + axis
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([p.value for p in parts], axis=ax), parts, back)


def stack(parts: Sequence, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([p.value for p in parts], axis=axis), parts, back)


# log semiring

def logsumexp(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    y = np.asarray(_logsumexp(a.value, axis=axis, keepdims=True))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None:
            g = np.reshape(g, (1,) * a.ndim)
        dead = np.isneginf(y)
        w = np.exp(a.value - np.where(dead, 0.0, y))
        return (np.where(dead, 0.0, w * g),)

    out = y if keepdims else (np.squeeze(y, axis=axis) if axis is not None else y.reshape(()))
    return _make(out, (a,), back)


def log_add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    y = np.asarray(_log_add(a.value, b.value))

    def back(g):
        dead = np.isneginf(y)
        ys = np.where(dead, 0.0, y)
        ga = np.where(dead, 0.0, g * np.exp(a.value - ys))
        gb = np.where(dead, 0.0, g * np.exp(b.value - ys))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(y, (a, b), back)


def contract(spec, *operands, semiring: str = "log", block_size: int = DEFAULT_BLOCK_SIZE,
             method: str = "auto") -> Var:
    """Recorded :func:`semiring_contract`; the backward pass uses posterior weights."""
    ops = [as_var(o) for o in operands]
    vals = [o.value for o in ops]
    cache = {} if active_tape() is not None else None
    y = semiring_contract(spec, vals, block_size=block_size, semiring=semiring, method=method,
                          cache=cache)

    def back(g):
        return contraction_adjoints(spec, vals, y, g, block_size=block_size,
                                    semiring=semiring, method=method, cache=cache)

    return _make(y, ops, back)
