# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Every reduction runs in a fixed sequential order so a
row's result never depends on how many other rows share the call."""

import numpy as np
cimport numpy as cnp
from libc.math cimport expf, sqrtf, tanhf

cnp.import_array()


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], kk = a.shape[1], m = b.shape[1]
    if b.shape[0] != kk:
        raise ValueError("inner dimensions differ")
    out_arr = np.zeros((n, m), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef float av
    with nogil:
        for i in range(n):
            for p in range(kk):
                av = a[i, p]
                for j in range(m):
                    out[i, j] = out[i, j] + av * b[p, j]
    return out_arr


def layer_norm(const float[:, ::1] x, const float[::1] gain, const float[::1] bias, float eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_arr = np.empty((n, d), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef float mean, var, c, inv
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean = mean + x[i, j]
            mean = mean / d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var = var + c * c
            var = var / d
            inv = 1.0 / sqrtf(var + eps)
            for j in range(d):
                out[i, j] = (x[i, j] - mean) * inv * gain[j] + bias[j]
    return out_arr


def attend(const float[:, ::1] q, const float[:, :, ::1] keys, const float[:, :, ::1] values,
           const unsigned char[:, ::1] keymask, float scale):
    """One query per group against ``n`` cached keys; ``keymask[g, j] == 0`` hides key j."""
    cdef Py_ssize_t g = q.shape[0], dh = q.shape[1], n = keys.shape[1]
    out_arr = np.zeros((g, dh), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    scores_arr = np.empty(n, dtype=np.float32)
    cdef float[::1] s = scores_arr
    cdef Py_ssize_t gi, j, d
    cdef float acc, mx, total, w
    with nogil:
        for gi in range(g):
            mx = -3.0e38
            for j in range(n):
                if keymask[gi, j] == 0:
                    continue
                acc = 0.0
                for d in range(dh):
                    acc = acc + q[gi, d] * keys[gi, j, d]
                acc = acc * scale
                s[j] = acc
                if acc > mx:
                    mx = acc
            total = 0.0
            for j in range(n):
                if keymask[gi, j] == 0:
                    s[j] = 0.0
                    continue
                s[j] = expf(s[j] - mx)
                total = total + s[j]
            for j in range(n):
                if s[j] == 0.0:
                    continue
                w = s[j] / total
                for d in range(dh):
                    out[gi, d] = out[gi, d] + w * values[gi, j, d]
    return out_arr


def gelu(const float[:, ::1] x):
    """Tanh-approximate GELU, elementwise in float32."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_arr = np.empty((n, d), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef float v, c = 0.7978845608028654
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = 0.5 * v * (1.0 + tanhf(c * (v + 0.044715 * v * v * v)))
    return out_arr


def sqnorm_rows(const float[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out_arr = np.empty(n, dtype=np.float32)
    cdef float[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef float acc, v
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                v = x[i, j] - 0.0
                acc = acc + v * v
            out[i] = acc
    return out_arr


def rvq_assign(const float[:, ::1] residual, const float[:, ::1] codebook):
    """Nearest codeword per row (lowest index on ties) and the updated residual."""
    cdef Py_ssize_t n = residual.shape[0], d = residual.shape[1], k = codebook.shape[0]
    if codebook.shape[1] != d:
        raise ValueError("codebook dimension differs from residual dimension")
    idx_arr = np.empty(n, dtype=np.int64)
    new_arr = np.empty((n, d), dtype=np.float32)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef float[:, ::1] new = new_arr
    cdef Py_ssize_t i, j, c, best
    cdef float acc, v, best_d
    with nogil:
        for i in range(n):
            best = 0
            best_d = 0.0
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    v = residual[i, j] - codebook[c, j]
                    acc = acc + v * v
                if c == 0 or acc < best_d:
                    best = c
                    best_d = acc
            idx[i] = best
            for j in range(d):
                new[i, j] = residual[i, j] - codebook[best, j]
    return idx_arr, new_arr


def levenshtein(const cnp.int64_t[::1] a, const cnp.int64_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev_arr = np.arange(m + 1, dtype=np.int64)
    cur_arr = np.empty(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev = prev_arr
    cdef cnp.int64_t[::1] cur = cur_arr
    cdef cnp.int64_t[::1] tmp
    cdef Py_ssize_t i, j
    cdef cnp.int64_t best, cand
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            cand = prev[j] + 1
            if cand < best:
                best = cand
            cand = cur[j - 1] + 1
            if cand < best:
                best = cand
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
