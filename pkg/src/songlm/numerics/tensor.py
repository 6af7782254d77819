"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the op that produced it and its parent tensors.
:func:`grad` walks the recorded graph backwards. Backward rules live in a
registry keyed by op name, so a node whose op has no registered rule fails
loudly instead of silently producing a zero gradient.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

_BACKWARD: dict[str, Callable] = {}
_GRAD_ENABLED = True


class GradError(RuntimeError):
    pass


def register_backward(op: str):
    def deco(fn):
        _BACKWARD[op] = fn
        return fn

    return deco


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "op", "ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.op = "leaf"
        self.ctx = None

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return transpose(self, axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _node(op: str, data, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.ctx = ctx
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.op = op
    else:
        out.requires_grad = False
        out.parents = ()
        out.op = "const"
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node("add", a.data + b.data, (a, b))


@register_backward("add")
def _add_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node("sub", a.data - b.data, (a, b))


@register_backward("sub")
def _sub_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node("mul", a.data * b.data, (a, b))


@register_backward("mul")
def _mul_bw(node, g):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node("div", a.data / b.data, (a, b))


@register_backward("div")
def _div_bw(node, g):
    a, b = node.parents
    ga = _unbroadcast(g / b.data, a.shape)
    gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
    return ga, gb


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,))


@register_backward("neg")
def _neg_bw(node, g):
    return (-g,)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def exp(a: Tensor) -> Tensor:
    return _node("exp", np.exp(a.data), (a,))


@register_backward("exp")
def _exp_bw(node, g):
    return (g * node.data,)


def log(a: Tensor) -> Tensor:
    return _node("log", np.log(a.data), (a,))


@register_backward("log")
def _log_bw(node, g):
    return (g / node.parents[0].data,)


def tanh(a: Tensor) -> Tensor:
    return _node("tanh", np.tanh(a.data), (a,))


@register_backward("tanh")
def _tanh_bw(node, g):
    return (g * (1 - node.data * node.data),)


def relu(a: Tensor) -> Tensor:
    return _node("relu", np.maximum(a.data, 0), (a,))


@register_backward("relu")
def _relu_bw(node, g):
    return (g * (node.parents[0].data > 0),)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu_array(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(_GELU_C)
    return x.dtype.type(0.5) * x * (1 + np.tanh(c * (x + x.dtype.type(0.044715) * x * x * x)))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    c = x.dtype.type(_GELU_C)
    t = np.tanh(c * (x + x.dtype.type(0.044715) * x * x * x))
    return _node("gelu", x.dtype.type(0.5) * x * (1 + t), (a,), t)


@register_backward("gelu")
def _gelu_bw(node, g):
    x = node.parents[0].data
    t = node.ctx
    c = x.dtype.type(_GELU_C)
    dt = (1 - t * t) * c * (1 + x.dtype.type(3 * 0.044715) * x * x)
    return (g * (0.5 * (1 + t) + 0.5 * x * dt),)


def sigmoid(a: Tensor) -> Tensor:
    return _node("sigmoid", _sigmoid(a.data), (a,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


@register_backward("sigmoid")
def _sigmoid_bw(node, g):
    return (g * node.data * (1 - node.data),)


def log_sigmoid(a: Tensor) -> Tensor:
    """``ln σ(x)`` computed without overflow."""
    x = a.data
    return _node("log_sigmoid", np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x))), (a,))


@register_backward("log_sigmoid")
def _log_sigmoid_bw(node, g):
    return (g * _sigmoid(-node.parents[0].data),)


# --- reductions and shape ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return _node("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), (axis, keepdims))


@register_backward("sum")
def _sum_bw(node, g):
    a = node.parents[0]
    axis, keepdims = node.ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _node("reshape", a.data.reshape(shape), (a,))


@register_backward("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.parents[0].shape),)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    return _node("transpose", a.data.transpose(axes), (a,), axes)


@register_backward("transpose")
def _transpose_bw(node, g):
    return (g.transpose(np.argsort(node.ctx)),)


def getitem(a: Tensor, idx) -> Tensor:
    return _node("getitem", a.data[idx], (a,), idx)


@register_backward("getitem")
def _getitem_bw(node, g):
    a = node.parents[0]
    out = np.zeros_like(a.data)
    idx = node.ctx
    parts = idx if isinstance(idx, tuple) else (idx,)
    if any(isinstance(i, (np.ndarray, list)) for i in parts):
        np.add.at(out, idx, g)
    else:
        out[idx] += g
    return (out,)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _node("concat", data, tuple(tensors), (axis, sizes))


@register_backward("concat")
def _concat_bw(node, g):
    axis, sizes = node.ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return _node("embedding", weight.data[ids], (weight,), ids)


@register_backward("embedding")
def _embedding_bw(node, g):
    weight = node.parents[0]
    ids = node.ctx.reshape(-1)
    flat = g.reshape(-1, weight.shape[-1])
    out = np.zeros_like(weight.data)
    np.add.at(out, ids, flat)
    return (out,)


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    return _node("matmul", a.data @ b.data, (a, b))


@register_backward("matmul")
def _matmul_bw(node, g):
    a, b = node.parents
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
    if b.requires_grad:
        if b.ndim == 2 and a.ndim > 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
    return ga, gb


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
        return _node("linear", out, (x, w, b))
    return _node("linear", out, (x, w))


@register_backward("linear")
def _linear_bw(node, g):
    x, w = node.parents[0], node.parents[1]
    gx = g @ w.data.T if x.requires_grad else None
    gw = None
    if w.requires_grad:
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    if len(node.parents) == 3:
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if node.parents[2].requires_grad else None
        return gx, gw, gb
    return gx, gw


# --- fused neural-net ops ---------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _node("softmax", p, (a,), axis)


@register_backward("softmax")
def _softmax_bw(node, g):
    p = node.data
    axis = node.ctx
    return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return _node("log_softmax", log_softmax_array(a.data, axis), (a,), axis)


@register_backward("log_softmax")
def _log_softmax_bw(node, g):
    axis = node.ctx
    p = np.exp(node.data)
    return (g - p * g.sum(axis=axis, keepdims=True),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    return _node("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), (xhat, inv))


@register_backward("layer_norm")
def _layer_norm_bw(node, g):
    x, gain, bias = node.parents
    xhat, inv = node.ctx
    d = x.shape[-1]
    gx = gg = gb = None
    if gain.requires_grad:
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
    if bias.requires_grad:
        gb = g.reshape(-1, d).sum(axis=0)
    if x.requires_grad:
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, gg, gb


def attention(q: Tensor, k: Tensor, v: Tensor, mask_add: np.ndarray) -> Tensor:
    """Scaled dot-product attention over (B, H, L, dh) inputs.

    ``mask_add`` is added to the scores before the softmax; hidden entries
    carry a large negative value so their weights are exactly zero.
    """
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale + mask_add
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return _node("attention", p @ v.data, (q, k, v), (p, scale))


@register_backward("attention")
def _attention_bw(node, g):
    q, k, v = node.parents
    p, scale = node.ctx
    gv = np.swapaxes(p, -1, -2) @ g
    gp = g @ np.swapaxes(v.data, -1, -2)
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
    gq = (gs @ k.data) * scale
    gk = (np.swapaxes(gs, -1, -2) @ q.data) * scale
    return gq, gk, gv


def token_logprobs(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Log-probability of ``targets`` under ``softmax(logits)`` along the last axis.

    Positions whose target is negative get 0 and no gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lsm = log_softmax_array(logits.data)
    valid = targets >= 0
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(lsm, safe[..., None], axis=-1)[..., 0]
    picked = np.where(valid, picked, 0).astype(logits.dtype)
    return _node("token_logprobs", picked, (logits,), (lsm, safe, valid))


@register_backward("token_logprobs")
def _token_logprobs_bw(node, g):
    lsm, safe, valid = node.ctx
    gl = -np.exp(lsm) * g[..., None]
    np.put_along_axis(gl, safe[..., None],
                      np.take_along_axis(gl, safe[..., None], axis=-1) + g[..., None], axis=-1)
    gl *= valid[..., None]
    return (gl,)


# --- gradients ----------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by ``id`` of each leaf tensor."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise GradError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[id(node)] = g
            continue
        rule = _BACKWARD.get(node.op)
        if rule is None:
            raise GradError(f"no backward rule for op {node.op!r}")
        for parent, pg in zip(node.parents, rule(node, g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(loss: Tensor, params) -> "OrderedDict[str, np.ndarray]":
    """Gradients of ``loss`` for every non-frozen parameter of ``params``.

    Parameters the loss does not reach get zero arrays.
    """
    leaves = backward(loss)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, t in params.items():
        if name in params.frozen:
            continue
        g = leaves.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
    return out


def stack_scalars(values: Iterable[Tensor]) -> Tensor:
    return concat([v.reshape(1) for v in values], axis=0)
