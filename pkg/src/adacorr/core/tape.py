"""Reverse-mode differentiation tape over float64 numpy arrays.

Every operation appends a :class:`Node` to the tape that owns its inputs.
``backward`` walks the tape in exact reverse recording order, so gradient
accumulation order (and therefore every bit of every gradient) is fixed by
the order in which the forward pass was written.
"""
from __future__ import annotations

import numpy as np

from .params import ParamStore


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Node:
    __slots__ = ("tape", "id", "value", "op", "parents", "grad", "_backward", "param_name")

    def __init__(self, tape, value, op, parents=(), backward=None, param_name=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.grad = None
        self._backward = backward
        self.param_name = param_name
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Linear record of nodes; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []

    def constant(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), "const")

    def variable(self, value) -> Node:
        """Leaf whose gradient is kept (constants do not accumulate one)."""
        return Node(self, np.asarray(value, dtype=np.float64), "input")

    def param(self, store: ParamStore, name: str) -> Node:
        return Node(self, store.params[name], "param", param_name=name)

    def backward(self, root: Node, store: ParamStore | None = None) -> None:
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.id + 1]):
            if node.grad is None:
                continue
            if node._backward is not None:
                node._backward(node.grad)
            if node.param_name is not None and store is not None:
                store.grads[node.param_name] += node.grad


def _accum(node: Node, g) -> None:
    if node.op == "const":
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad = node.grad + g


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a tape Node")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shape(a: Node, b: Node):
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    # one operand has to broadcast onto the other; no mutual expansion
    if out is None or (out != a.shape and out != b.shape):
        raise ShapeError(f"incompatible operand shapes {a.shape} and {b.shape}")
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Node(tape, a.value + b.value, "add", (a, b), backward)


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return Node(tape, a.value - b.value, "sub", (a, b), backward)


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.value, a.shape))
        _accum(b, _unbroadcast(g * a.value, b.shape))

    return Node(tape, a.value * b.value, "mul", (a, b), backward)


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _binary_shape(a, b)
    if np.any(b.value == 0):
        raise DomainError("division by zero")
    out = a.value / b.value

    def backward(g):
        _accum(a, _unbroadcast(g / b.value, a.shape))
        _accum(b, _unbroadcast(-g * out / b.value, b.shape))

    return Node(tape, out, "div", (a, b), backward)


def neg(a: Node) -> Node:
    return Node(a.tape, -a.value, "neg", (a,), lambda g: _accum(a, -g))


def square(a: Node) -> Node:
    return Node(a.tape, a.value * a.value, "square", (a,),
                lambda g: _accum(a, 2.0 * a.value * g))


def sqrt(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise DomainError("sqrt requires strictly positive entries")
    out = np.sqrt(a.value)
    return Node(a.tape, out, "sqrt", (a,), lambda g: _accum(a, 0.5 * g / out))


def absolute(a: Node) -> Node:
    return Node(a.tape, np.abs(a.value), "abs", (a,),
                lambda g: _accum(a, g * np.sign(a.value)))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(a.tape, out, "tanh", (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return Node(a.tape, np.where(mask, a.value, 0.0), "relu", (a,),
                lambda g: _accum(a, g * mask))


_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Node) -> Node:
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    x = a.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return Node(a.tape, x * cdf, "gelu", (a,), lambda g: _accum(a, g * (cdf + x * pdf)))


_UNARY = {"neg": neg, "square": square, "sqrt": sqrt, "tanh": tanh, "gelu": gelu,
          "relu": relu, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Node:
    """Dispatch by name: add/sub/mul/div take two operands, the rest one."""
    if op_kind in _BINARY:
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def activation(name: str, a: Node) -> Node:
    return {"gelu": gelu, "tanh": tanh, "relu": relu}[name.lower()](a)


# ------------------------------------------------------------------ reductions

def reduce_sum(a: Node, axis=None, keepdims: bool = False) -> Node:
    """Sum over ``axis`` (None = everything).

    The reduced axes are moved last and made contiguous so numpy's pairwise
    summation applies over the whole reduced extent.
    """
    x = a.value
    axes = tuple(range(x.ndim)) if axis is None else tuple(
        ax % x.ndim for ax in np.atleast_1d(axis))
    keep = [ax for ax in range(x.ndim) if ax not in axes]
    moved = np.ascontiguousarray(np.transpose(x, keep + list(axes)))
    red = int(np.prod([x.shape[ax] for ax in axes], dtype=np.int64))
    flat = moved.reshape(*[x.shape[ax] for ax in keep], red)
    out = flat.sum(axis=-1)
    if keepdims:
        out = out.reshape([1 if ax in axes else x.shape[ax] for ax in range(x.ndim)])

    def backward(g):
        if not keepdims:
            g = np.reshape(g, [1 if ax in axes else x.shape[ax] for ax in range(x.ndim)])
        _accum(a, np.broadcast_to(g, x.shape))

    return Node(a.tape, np.asarray(out, dtype=np.float64), "sum", (a,), backward)


def sample_sum(a: Node, keepdims: bool = True) -> Node:
    """Per-sample total: sum over every axis except the leading batch axis."""
    return reduce_sum(a, axis=tuple(range(1, a.value.ndim)), keepdims=keepdims)


def mean(a: Node) -> Node:
    return reduce_sum(a) * (1.0 / a.value.size)


def l2norm(a: Node, keepdims: bool = False) -> Node:
    """Per-sample Euclidean norm over all non-batch axes; subgradient 0 at 0."""
    sq = np.ascontiguousarray(a.value * a.value).reshape(a.value.shape[0], -1)
    out = np.sqrt(sq.sum(axis=-1))
    bshape = (a.value.shape[0],) + (1,) * (a.value.ndim - 1)
    safe = np.where(out > 0, out, 1.0).reshape(bshape)
    if keepdims:
        out = out.reshape(bshape)

    def backward(g):
        _accum(a, np.reshape(g, bshape) * a.value / safe)

    return Node(a.tape, out, "l2norm", (a,), backward)


# ------------------------------------------------------------- shape plumbing

def reshape(a: Node, shape) -> Node:
    src = a.value.shape
    return Node(a.tape, a.value.reshape(shape), "reshape", (a,),
                lambda g: _accum(a, g.reshape(src)))


def take_channels(a: Node, channels) -> Node:
    idx = np.asarray(channels, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (slice(None), idx), g)
        _accum(a, full)

    return Node(a.tape, a.value[:, idx], "take", (a,), backward)


def replace_channels(full: Node, sub_: Node, channels) -> Node:
    """Copy of ``full`` whose ``channels`` are taken from ``sub_``."""
    idx = np.asarray(channels, dtype=np.int64)
    out = full.value.copy()
    out[:, idx] = sub_.value

    def backward(g):
        g_full = g.copy()
        g_full[:, idx] = 0.0
        _accum(full, g_full)
        _accum(sub_, g[:, idx])

    return Node(full.tape, out, "replace", (full, sub_), backward)


def concat(parts, axis: int = 1) -> Node:
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    sizes = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            _accum(p, gp)

    return Node(tape, np.concatenate([p.value for p in parts], axis=axis), "concat",
                parts, backward)


def expand_batch(a: Node, batch: int) -> Node:
    """Repeat a leading axis of size 1 to ``batch`` (shared parameters)."""
    if a.value.shape[0] != 1:
        raise ShapeError(f"expand_batch needs a leading axis of 1, got {a.value.shape}")
    out = np.repeat(a.value, batch, axis=0)
    return Node(a.tape, out, "expand", (a,), lambda g: _accum(a, g.sum(axis=0, keepdims=True)))
