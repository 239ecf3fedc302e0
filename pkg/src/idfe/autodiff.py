"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Only the operations the IDFE network needs are provided. A :class:`Tape`
records every operation whose inputs are tracked, in execution order;
:meth:`Tape.backward` walks the records in exact reverse order and returns
the gradient of a scalar loss for every named leaf.

    tape = Tape()
    w = tape.param("w", np.ones((3, 2)))
    x = constant(np.random.randn(4, 3))
    loss = sum_(relu(matmul(x, w)))
    grads = tape.backward(loss)        # {"w": array of shape (3, 2)}

Arrays keep the dtype they were created with, so float64 inputs give
float64 gradients (used by the gradient checks) and float32 inputs stay
float32 (used by training).
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, IdfeError, ParameterError, TapeStateError


class ClassIndexError(IdfeError, IndexError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple  # node ids on the same tape, None for untracked inputs
    vjp: Optional[Callable]  # upstream grad -> tuple of input grads


class Tensor:
    """A numpy array plus its position on a tape (if tracked)."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self):
        return self.tape is not None

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations for one forward/backward pass.

    A tape is not thread-safe; use one tape per pass and per thread.
    """

    def __init__(self):
        self.nodes = []
        self._leaves = {}  # node id -> (name, array)

    def __len__(self):
        return len(self.nodes)

    def param(self, name, array):
        """Register a named leaf whose gradient :meth:`backward` reports."""
        if any(name == n for n, _ in self._leaves.values()):
            raise ParameterError(f"leaf {name!r} already registered on this tape")
        t = Tensor(array, self, self._push("leaf", (), None))
        self._leaves[t.node] = (name, t.data)
        return t

    def _push(self, kind, inputs, vjp):
        self.nodes.append(Node(kind, tuple(inputs), vjp))
        return len(self.nodes) - 1

    def backward(self, loss):
        """Return ``{leaf name: d loss / d leaf}`` for every registered leaf.

        The tape is left intact, so repeated calls give identical results.
        """
        if not isinstance(loss, Tensor) or loss.tape is None:
            raise TapeStateError("loss is not recorded on any tape; run a forward pass first")
        if loss.tape is not self:
            raise TapeStateError("loss was recorded on a different tape")
        if not any(n.kind != "leaf" for n in self.nodes):
            raise TapeStateError("backward called before any forward operation was recorded")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads = [None] * len(self.nodes)
        grads[loss.node] = np.ones_like(loss.data)
        for idx in range(loss.node, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp is None or gi is None:
                    continue
                grads[inp] = gi if grads[inp] is None else grads[inp] + gi

        out = {}
        for idx, (name, array) in self._leaves.items():
            out[name] = np.zeros_like(array) if grads[idx] is None else grads[idx]
        return out


def constant(array, dtype=None):
    """Untracked tensor; gradients never flow into it."""
    return Tensor(np.asarray(array, dtype=dtype))


def _wrap(x, dtype):
    return x if isinstance(x, Tensor) else constant(x, dtype)


def _record(kind, out, inputs, vjp):
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeStateError(f"{kind}: inputs are recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    ids = [t.node if t.tape is tape else None for t in inputs]
    return Tensor(out, tape, tape._push(kind, ids, vjp))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.tracked else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.tracked else None
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def add(a, b):
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    """Element-wise product with numpy broadcasting."""
    _broadcast_check("elementwise_mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.tracked else None
        gb = _unbroadcast(g * ad, bd.shape) if b.tracked else None
        return ga, gb

    return _record("elementwise_mul", ad * bd, (a, b), vjp)


def scale(a, c):
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    mask = a.data > 0
    # np.maximum keeps NaN visible so divergence is reported, not masked
    return _record("relu", np.maximum(a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,))


def _check_axis(kind, a, axis):
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"{kind}: axis {axis} out of range for shape {a.shape}")


def softmax(a, axis=-1):
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (a,), vjp)


def log_softmax(a, axis=-1):
    _check_axis("log_softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    if axis is not None:
        _check_axis("sum", a, axis)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no inputs")
    _check_axis("concat", tensors[0], axis)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tensors, vjp)


def reshape(a, shape):
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} to {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Batch normalization over axis 0 of a ``[B, C]`` input.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` (plain arrays) are updated in place; in eval mode the
    running statistics are used and nothing is mutated.
    """
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batch_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    if training:
        n = xd.shape[0]
        if n < 2:
            raise DimensionError(f"batch_norm: training mode needs a batch of at least 2, got {n}")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv_std).astype(xd.dtype, copy=False)
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gxhat = g * gd
        if training:
            gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        else:
            gx = gxhat * inv_std
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    return _record("batch_norm", out, (x, gamma, beta), vjp)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity outside training or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = ((rng.random(x.shape) >= rate) / keep).astype(x.dtype)
    return _record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def grl(x, lam):
    """Gradient reversal: identity forward, ``-lam * upstream`` backward."""
    lam = float(lam)
    if not lam >= 0.0:
        raise ParameterError(f"gradient reversal scale must be non-negative, got {lam}")
    neg = -lam
    return _record("grl", x.data.copy(), (x,), lambda g: (neg * g,))


def cross_entropy(logits, targets, class_weights=None):
    """Weighted mean negative log-likelihood of ``targets`` under ``logits``.

    The sum of ``-w[y_i] * log_softmax(logits)[i, y_i]`` is divided by the
    sum of the selected weights ``w[y_i]``, not by the batch size.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [B, C], got {logits.shape}")
    b, c = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (b,):
        raise DimensionError(f"cross_entropy: {b} logits rows but targets shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer) or targets.min() < 0 or targets.max() >= c:
        raise ClassIndexError(f"cross_entropy: targets must be integers in [0, {c}), got {targets}")
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (c,) or not np.all(w > 0):
        raise ParameterError(f"cross_entropy: need {c} positive class weights, got {w}")
    selected = np.zeros((b, c), dtype=logits.dtype)
    selected[np.arange(b), targets] = w[targets]
    total = float(w[targets].sum())
    picked = sum_(mul(log_softmax(logits, axis=1), constant(selected)))
    return scale(picked, -1.0 / total)


OPS = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "sum": sum_,
    "mean": mean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "elementwise_mul": mul,
    "reshape": reshape,
    "transpose": transpose,
    "grl": grl,
}


def forward_op(kind, *inputs, **kwargs):
    """Apply the operation named ``kind``; see :data:`OPS` for the menu."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ParameterError(f"unknown op kind {kind!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)
