"""Hot loops with a compiled backend and a numpy fallback.

The compiled module ``songlm._kernels`` is used when it imports and
``SONGLM_PURE`` is unset. Both backends reduce in the same sequential order,
so results are row-independent: a row's output does not depend on how many
other rows are processed in the same call.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "attend",
    "gelu",
    "layer_norm",
    "levenshtein",
    "matmul",
    "rvq_assign",
    "sqnorm_rows",
    "use_backend",
]


def _f32(x):
    return np.ascontiguousarray(x, dtype=np.float32)


class _Numpy:
    name = "numpy"

    @staticmethod
    def matmul(a, b):
        if a.shape[1] != b.shape[0]:
            raise ValueError("inner dimensions differ")
        out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
        for p in range(a.shape[1]):
            out += a[:, p : p + 1] * b[p]
        return out

    @staticmethod
    def layer_norm(x, gain, bias, eps):
        d = x.shape[1]
        mean = np.zeros(x.shape[0], dtype=np.float32)
        for j in range(d):
            mean += x[:, j]
        mean = mean / np.float32(d)
        var = np.zeros(x.shape[0], dtype=np.float32)
        for j in range(d):
            c = x[:, j] - mean
            var += c * c
        var = var / np.float32(d)
        inv = np.float32(1.0) / np.sqrt(var + np.float32(eps))
        return (x - mean[:, None]) * inv[:, None] * gain + bias

    @staticmethod
    def attend(q, keys, values, keymask, scale):
        g, n, dh = keys.shape
        visible = keymask.astype(bool)
        scores = np.zeros((g, n), dtype=np.float32)
        for d in range(dh):
            scores += q[:, d : d + 1] * keys[:, :, d]
        scores = np.where(visible, scores * np.float32(scale), np.float32(-3.0e38))
        mx = scores.max(axis=1, keepdims=True)
        e = np.where(visible, np.exp(scores - mx), np.float32(0.0))
        total = np.zeros(g, dtype=np.float32)
        for j in range(n):
            total += e[:, j]
        out = np.zeros((g, dh), dtype=np.float32)
        for j in range(n):
            term = (e[:, j] / np.where(total > 0, total, 1))[:, None] * values[:, j]
            out += np.where(visible[:, j : j + 1], term, np.float32(0.0))
        return out

    @staticmethod
    def gelu(x):
        c = np.float32(0.7978845608028654)
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            v = x[i]
            out[i] = np.float32(0.5) * v * (np.float32(1.0) + np.tanh(c * (v + np.float32(0.044715) * v * v * v)))
        return out

    @staticmethod
    def sqnorm_rows(x):
        acc = np.zeros(x.shape[0], dtype=np.float32)
        for j in range(x.shape[1]):
            v = x[:, j]
            acc += v * v
        return acc

    @staticmethod
    def rvq_assign(residual, codebook):
        if codebook.shape[1] != residual.shape[1]:
            raise ValueError("codebook dimension differs from residual dimension")
        diff = residual[:, None, :] - codebook[None, :, :]
        acc = np.zeros(diff.shape[:2], dtype=np.float32)
        for j in range(diff.shape[2]):
            v = diff[:, :, j]
            acc += v * v
        idx = np.argmin(acc, axis=1).astype(np.int64)
        return idx, residual - codebook[idx]

    @staticmethod
    def levenshtein(a, b):
        n, m = len(a), len(b)
        if n == 0:
            return m
        if m == 0:
            return n
        prev = list(range(m + 1))
        for i in range(1, n + 1):
            cur = [i] + [0] * m
            ai = a[i - 1]
            for j in range(1, m + 1):
                cur[j] = min(prev[j - 1] + (ai != b[j - 1]), prev[j] + 1, cur[j - 1] + 1)
            prev = cur
        return int(prev[m])


def _load_compiled():
    if os.environ.get("SONGLM_PURE"):
        return None
    try:
        from songlm import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
_impl = _compiled if _compiled is not None else _Numpy
BACKEND = "compiled" if _compiled is not None else "numpy"


def use_backend(name: str) -> str:
    """Switch between "compiled" and "numpy"; returns the previous backend."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = _compiled
    elif name == "numpy":
        _impl = _Numpy
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return previous


def matmul(a, b):
    """``a @ b`` for 2-D float32 arrays with a sequential inner reduction."""
    return _impl.matmul(_f32(a), _f32(b))


def layer_norm(x, gain, bias, eps=1e-5):
    return _impl.layer_norm(_f32(x), _f32(gain), _f32(bias), float(eps))


def attend(q, keys, values, keymask, scale):
    """Softmax attention of one query per group over that group's keys.

    q: (G, dh); keys, values: (G, n, dh); keymask: (G, n), nonzero = visible.
    """
    mask = np.ascontiguousarray(keymask, dtype=np.uint8)
    return _impl.attend(_f32(q), _f32(keys), _f32(values), mask, float(scale))


def gelu(x):
    """Tanh-approximate GELU of a 2-D float32 array."""
    return _impl.gelu(_f32(x))


def sqnorm_rows(x):
    """Squared L2 norm of every row, summed left to right in float32."""
    return _impl.sqnorm_rows(_f32(x))


def rvq_assign(residual, codebook):
    return _impl.rvq_assign(_f32(residual), _f32(codebook))


def levenshtein(a, b) -> int:
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if _impl is _Numpy:
        return _Numpy.levenshtein(a.tolist(), b.tolist())
    return _impl.levenshtein(a, b)
