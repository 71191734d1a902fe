"""A small reverse-mode autograd over numpy arrays.

Only the operations the transformer, quantizer and probes need are provided.
Several of them are fused (layer norm, softmax, cross entropy, l2
normalisation) so that their backward passes stay cheap and numerically
tidy. Every op preserves the floating dtype of its inputs, which lets the
gradient checks run the same graph in float64.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- conveniences -------------------------------------------------------
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring gradients."""
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _lift(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not a_t and not b_t:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _result(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = _lift(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _lift(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _lift(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation of the Gaussian error linear unit."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _result(out.astype(x.dtype, copy=False), (a,), backward)


# -- shape ------------------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index):
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


# -- linear algebra -------------------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a, b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None):
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def take_rows(table, index):
    """Gather rows of a 2-D table: out[...] = table[index[...]]."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        flat_g = g.reshape(-1, table.shape[1])
        flat_i = index.reshape(-1)
        rows = table.shape[0]
        if rows * len(flat_i) <= 50_000_000:
            onehot = np.zeros((rows, len(flat_i)), dtype=flat_g.dtype)
            onehot[flat_i, np.arange(len(flat_i))] = 1.0
            return (onehot @ flat_g,)
        full = np.zeros_like(table.data)
        np.add.at(full, flat_i, flat_g)
        return (full,)

    return _result(table.data[index], (table,), backward)


def conv1d(x, w, b, stride=1):
    """Channels-last 1-D convolution without padding.

    x: (N, L, Cin), w: (K, Cin, Cout), b: (Cout,) -> (N, Lout, Cout)
    """
    n, length, cin = x.shape
    k, _, cout = w.shape
    lout = (length - k) // stride + 1
    if lout < 1:
        raise ValueError(f"conv input length {length} shorter than kernel {k}")
    span = stride * (lout - 1) + 1
    cols = np.stack([x.data[:, j:j + span:stride, :] for j in range(k)], axis=2)
    cols = cols.reshape(n, lout, k * cin)                     # (N, Lout, K*Cin)
    wmat = w.data.reshape(k * cin, cout)
    out = cols @ wmat + b.data

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(n, lout, k, cin)
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[:, j:j + span:stride, :] += gcols[:, :, j, :]
        if w.requires_grad:
            gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(w.shape)
        gb = g.reshape(-1, cout).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, w, b), backward)


# -- fused normalisations and losses -----------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            d = x.shape[-1]
            gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), backward)


def log_softmax_np(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets, reduction="sum"):
    """Negative log-likelihood of integer ``targets`` under softmax(logits) over the last axis."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    logp = log_softmax_np(z)
    nll = -logp[np.arange(len(t)), t]
    scale = 1.0 / max(len(t), 1) if reduction == "mean" else 1.0
    value = np.asarray(nll.sum() * scale, dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(len(t)), t] -= 1.0
        return ((p * (g * scale)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _result(value, (logits,), backward)


def bce_with_logits(logits, targets, reduction="mean", weights=None):
    """Binary cross entropy on sigmoid(logits); ``weights`` masks individual entries."""
    y = np.asarray(targets, dtype=logits.dtype)
    z = logits.data
    w = np.ones_like(z) if weights is None else np.broadcast_to(np.asarray(weights, dtype=z.dtype), z.shape)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) * w
    scale = 1.0 / max(float(w.sum()), 1.0) if reduction == "mean" else 1.0
    value = np.asarray(loss.sum() * scale, dtype=z.dtype)

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return (((s - y) * w * (g * scale)).astype(z.dtype, copy=False),)

    return _result(value, (logits,), backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x.data / safe

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / safe,)

    return _result(y, (x,), backward)


# -- stop-gradient with replay ------------------------------------------------------------

class _Frozen:
    """Records constants on the first pass and replays them afterwards.

    Finite-difference checks of losses with stop-gradient nodes or discrete
    assignments must hold those quantities fixed at the unperturbed point,
    which is what a gradient with ``sg`` means.
    """

    def __init__(self):
        self.values = []
        self.cursor = 0
        self.replaying = False

    def take(self, value):
        if self.replaying:
            v = self.values[self.cursor]
            self.cursor += 1
            return v
        self.values.append(np.array(value, copy=True))
        return value


_frozen_stack: list = []


@contextlib.contextmanager
def frozen_constants(session: _Frozen | None = None):
    """Context for recording (fresh session) or replaying (existing session) constants."""
    if session is None:
        session = _Frozen()
    else:
        session.replaying = True
        session.cursor = 0
    _frozen_stack.append(session)
    try:
        yield session
    finally:
        _frozen_stack.pop()


def constant(value):
    """Route a value that must not vary under perturbation (indices, targets) through the tape."""
    if _frozen_stack:
        return _frozen_stack[-1].take(value)
    return value


def detach(x) -> Tensor:
    """Stop-gradient: identity forward, zero gradient."""
    return Tensor(constant(as_tensor(x).data))

