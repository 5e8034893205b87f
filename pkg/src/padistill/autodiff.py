"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of the same differentiable
operations it differentiates, so calling :func:`grad` with
``create_graph=True`` yields gradients that are themselves part of a graph.
That is what allows differentiating through unrolled SGD steps.

Graphs are built implicitly: each tracked :class:`Tensor` holds a
:class:`Node` listing the tensors it was computed from.  There is no global
tape; a graph lives exactly as long as the tensors that reference it.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()


class Node:
    """One recorded operation.

    ``backward(g, *inputs)`` returns one gradient (or ``None``) per input.
    Ids increase monotonically, so inputs always have smaller ids than the
    node consuming them.
    """

    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable | None):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward

    @property
    def is_leaf(self) -> bool:
        return self.backward is None


class Tensor:
    __slots__ = ("data", "node")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.node = Node("leaf", (), None) if requires_grad else None

    @classmethod
    def _from_op(cls, data, op, inputs, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        if any(t.node is not None for t in inputs):
            out.node = Node(op, inputs, backward)
        else:
            out.node = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                     "(only identical shapes or scalar operands are supported)")


def _reduce_to(g: Tensor, shape: tuple) -> Tensor:
    # scalar operand received a full-shape gradient
    if g.shape == shape:
        return g
    return sum_(g)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, "add", (a, b),
                           lambda g, a, b: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, "sub", (a, b),
                           lambda g, a, b: (_reduce_to(g, sa), _reduce_to(neg(g), sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return Tensor._from_op(a.data * b.data, "mul", (a, b),
                           lambda g, a, b: (_reduce_to(mul(g, b), a.shape),
                                            _reduce_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")

    def backward(g, a, b):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return Tensor._from_op(a.data / b.data, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, "neg", (a,), lambda g, a: (neg(g),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data * a.data, "square", (a,),
                           lambda g, a: (mul(g, mul(a, 2.0)),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.sqrt(a.data), "sqrt", (a,),
                           lambda g, a: (div(g, mul(sqrt(a), 2.0)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.exp(a.data), "exp", (a,), lambda g, a: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), "log", (a,), lambda g, a: (div(g, a),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # second derivative is zero almost everywhere: the mask is a constant
    return Tensor._from_op(np.maximum(a.data, 0.0), "relu", (a,),
                           lambda g, a: (mul(g, Tensor(a.data > 0)),))


# ------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), "reshape", (a,),
                           lambda g, a: (reshape(g, old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), "transpose", (a,),
                           lambda g, a: (transpose(g, inverse),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the only way to expand a tensor."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    old = a.shape
    return Tensor._from_op(np.broadcast_to(a.data, shape).copy(), "broadcast",
                           (a,), lambda g, a: (sum_to(g, old),))


def sum_to(g, shape) -> Tensor:
    """Adjoint of :func:`broadcast_to`."""
    g = as_tensor(g)
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1)
    return reshape(sum_(g, axes, keepdims=True), shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in np.atleast_1d(axis))
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g, a):
        return (broadcast_to(reshape(g, kept), shape),)

    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return Tensor._from_op(np.asarray(out), "sum", (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._from_op(np.array(a.data[key]), "getitem", (a,),
                           lambda g, a: (scatter(g, key, shape),))


def scatter(g, key, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``key``; adjoint of getitem."""
    g = as_tensor(g)
    out = np.zeros(shape, dtype=DTYPE)
    np.add.at(out, key, g.data)
    return Tensor._from_op(out, "scatter", (g,), lambda gg, g: (getitem(gg, key),))


take = getitem


# -------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return Tensor._from_op(a.data @ b.data, "matmul", (a, b),
                           lambda g, a, b: (matmul(g, transpose(b)),
                                            matmul(transpose(a), g)))


def _conv_out(n: int, stride: int) -> int:
    return (n + 2 - 3) // stride + 1


def im2col(x, stride: int = 1) -> Tensor:
    """3x3 patches with zero padding 1, laid out as (b*oh*ow, c*9)."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    oh, ow = _conv_out(h, stride), _conv_out(w, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, oh, ow, c, 3, 3), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    shape = x.shape
    return Tensor._from_op(cols.reshape(b * oh * ow, c * 9), "im2col", (x,),
                           lambda g, x: (col2im(g, shape, stride),))


def col2im(cols, shape, stride: int = 1) -> Tensor:
    """Adjoint of :func:`im2col`."""
    cols = as_tensor(cols)
    b, c, h, w = shape
    oh, ow = _conv_out(h, stride), _conv_out(w, stride)
    g = cols.data.reshape(b, oh, ow, c, 3, 3)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return Tensor._from_op(xp[:, :, 1:h + 1, 1:w + 1].copy(), "col2im", (cols,),
                           lambda gg, cols: (im2col(gg, stride),))


def conv2d(x, w, stride: int = 1) -> Tensor:
    """3x3 cross-correlation, padding 1, no bias."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects x[b,c,h,w] and w[o,c,3,3], got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, "
                         f"kernel expects {w.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    b, c, h, wd = x.shape
    o = w.shape[0]
    oh, ow = _conv_out(h, stride), _conv_out(wd, stride)
    cols = im2col(x, stride)
    out = matmul(cols, transpose(reshape(w, (o, c * 9))))
    return transpose(reshape(out, (b, oh, ow, o)), (0, 3, 1, 2))


def avgpool2d(x, k: int) -> Tensor:
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avgpool2d: spatial extents {(h, w)} not divisible by {k}")
    blocks = reshape(x, (b, c, h // k, k, w // k, k))
    return mul(sum_(blocks, (3, 5)), 1.0 / (k * k))


# -------------------------------------------------------------------- losses

def log_softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, broadcast_to(shift, logits.shape))
    lse = log(sum_(exp(z), axis=1, keepdims=True))
    return sub(z, broadcast_to(lse, logits.shape))


def softmax(logits) -> Tensor:
    return exp(log_softmax(logits))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of ``-sum(targets * log_softmax(logits))``.

    ``targets`` may be soft labels and may itself require gradients.
    """
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.ndim != 2 or logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} must both be [b, C]")
    t = targets.data
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        bad = int(np.argmax((t < 0).any(axis=1) | (np.abs(t.sum(axis=1) - 1.0) > 1e-6)))
        raise ValueError(f"target row {bad} is not a probability vector "
                         f"(sum={t[bad].sum():.8g})")
    per_row = sum_(mul(targets, log_softmax(logits)), axis=1)
    return neg(mean(per_row))


# ------------------------------------------------------------------ backward

def _topo(root: Node) -> list[Node]:
    seen = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for t in node.inputs:
            n = t.node
            if n is not None and n.id not in seen:
                seen[n.id] = n
                stack.append(n)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def grad(output: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a one-element ``output`` with respect to each of ``leaves``.

    A leaf that does not influence ``output`` gets a zero gradient.  With
    ``create_graph=True`` the returned tensors are themselves tracked, so
    they can be differentiated again.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a single-element output, got shape {output.shape}")
    if output.node is None:
        return [Tensor(np.zeros_like(t.data)) for t in leaves]

    wanted = {t.node.id for t in leaves if t.node is not None}
    grads: dict[int, Tensor] = {output.node.id: Tensor(np.ones_like(output.data))}
    found: dict[int, Tensor] = {}
    for node in _topo(output.node):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.id in wanted:
            found[node.id] = g
        if node.is_leaf:
            continue
        inputs = node.inputs if create_graph else tuple(t.detach() for t in node.inputs)
        for t, gi in zip(node.inputs, node.backward(g, *inputs)):
            if gi is None or t.node is None:
                continue
            prev = grads.get(t.node.id)
            grads[t.node.id] = gi if prev is None else add(prev, gi)

    out = []
    for t in leaves:
        g = found.get(t.node.id) if t.node is not None else None
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph:
            g = g.detach()
        out.append(g)
    return out
