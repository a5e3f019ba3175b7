"""Dense tensors with tape-based reverse-mode differentiation.

Only what a small Transformer encoder needs is here.  Every primitive stores
a closure mapping the upstream gradient to one gradient per parent; the
closures run in reverse topological order inside :func:`value_and_grad`.

Two precisions are supported by simply keeping whatever float dtype the data
arrives in: float32 for training, float64 for gradient checking.
"""

import numpy as np
from scipy.special import erf

__all__ = [
    "ContractViolation",
    "NumericFault",
    "Tensor",
    "tensor",
    "value_and_grad",
    "finite_difference",
    "matmul",
    "layer_norm",
    "softmax",
    "softmax_rows",
    "log_softmax",
    "gelu",
    "relu",
    "dropout",
    "stack",
    "concat",
    "l1_mean",
]


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shapes, scalar loss, ...)."""


class NumericFault(FloatingPointError):
    """A non-finite value appeared in the forward or backward pass."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}{tag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def abs(self):
        return tabs(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False, dtype=np.float32, name=None):
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, _parents=parents, _backward=backward)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "add")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a):
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a):
    out = np.maximum(a.data, 0)
    return _node(out, (a,), lambda g: (g * (a.data > 0),), "relu")


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _node(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# shape / reduction

def matmul(a, b):
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            bd = b.data if b.ndim >= 2 else b.data[None, :]
            gg = g if b.ndim >= 2 else g[..., None]
            ga = _unbroadcast(np.matmul(gg, np.swapaxes(bd, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim >= 2:
                # fold leading dims: (..., n, k)^T @ (..., n, m) -> (k, m)
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx):
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), (a,), backward, "getitem")


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), backward, "stack")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# fused layers

def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` (bool, broadcastable) marks kept entries.

    Masked entries behave as logits of -inf: their probability is exactly zero
    and they receive zero gradient.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        s = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - s),)

    return _node(out, (a,), backward, "softmax")


def softmax_rows(x):
    """Row-wise softmax of an ``[L, K]`` tensor."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    return softmax(x, axis=-1)


def log_softmax(a, axis=-1):
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    out = x - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    gain = _lift(gain, x)
    bias = _lift(bias, x)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = d.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = (inv / n) * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _node(out.astype(d.dtype, copy=False), (x, gain, bias), backward, "layer_norm")


def dropout(x, p, gen, train=True):
    """Inverted dropout with a recorded mask; identity when not training or p == 0.

    ``gen`` is a numpy Generator (see :meth:`tera.rng.Rng.numpy_generator`).
    """
    if not train or p <= 0.0:
        return x
    keep = (gen.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * keep
    return _node(out, (x,), lambda g: (g * keep,), "dropout")


def l1_mean(pred, target, weights):
    """Weighted mean absolute error: ``sum(w * |pred - target|) / sum(w)``."""
    target = _lift(target, pred)
    w = np.asarray(weights, dtype=pred.dtype)
    total = w.sum()
    diff = pred.data - target.data
    out = np.asarray(np.sum(w * np.abs(diff)) / total, dtype=pred.dtype)

    def backward(g):
        return (g * w * np.sign(diff) / total, None)

    return _node(out, (pred, target), backward, "l1_mean")


# ---------------------------------------------------------------------------
# differentiation

def _topo_order(root):
    order = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _first_nonfinite(order):
    for node in order:
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def value_and_grad(loss, leaves):
    """Return ``(loss value, [gradient for each leaf])``.

    Leaves that the loss does not depend on get an all-zero gradient.  Raises
    :class:`ContractViolation` for a non-scalar loss and :class:`NumericFault`
    naming the first offending node when a NaN/inf is produced.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss) if loss.requires_grad else [loss]
    value = float(loss.data.reshape(()))
    if not np.isfinite(value):
        bad = _first_nonfinite(order) or loss
        raise NumericFault(f"non-finite value produced by node '{bad.op}'", bad)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient reaching node '{node.op}'", node)
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        elif not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for leaf '{leaf.name or leaf.op}'", leaf)
        out.append(np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape))
    return value, out


def finite_difference(f, x, eps=1e-4):
    """Central-difference gradient of scalar ``f`` at array ``x``, coordinate by coordinate."""
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
