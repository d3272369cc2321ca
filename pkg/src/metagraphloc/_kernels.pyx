# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for dynamic KNN and fused EdgeConv aggregation.

Loop order mirrors ``_kernels_py`` so results are bit-identical.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

BACKEND = "cython"


def knn_indices(x, Py_ssize_t k):
    cdef double[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], M = xv.shape[1], C = xv.shape[2]
    out = np.empty((B, M, k), dtype=np.int64)
    cdef cnp.int64_t[:, :, ::1] ov = out
    cdef double[::1] bestd = np.empty(k + 1)
    cdef cnp.int64_t[::1] bestj = np.empty(k + 1, dtype=np.int64)
    cdef Py_ssize_t b, i, j, c, n, filled, pos
    cdef double d, diff
    with nogil:
        for b in range(B):
            for i in range(M):
                filled = 0
                for j in range(M):
                    if j == i:
                        continue
                    d = 0.0
                    for c in range(C):
                        diff = xv[b, i, c] - xv[b, j, c]
                        d = d + diff * diff
                    if filled == k and d >= bestd[k - 1]:
                        continue
                    # insertion keeps (distance, index) order; equal distance keeps earlier j first
                    pos = filled if filled < k else k - 1
                    while pos > 0 and bestd[pos - 1] > d:
                        bestd[pos] = bestd[pos - 1]
                        bestj[pos] = bestj[pos - 1]
                        pos -= 1
                    bestd[pos] = d
                    bestj[pos] = j
                    if filled < k:
                        filled += 1
                for n in range(k):
                    ov[b, i, n] = bestj[n]
    return out


def edge_aggregate_forward(p, q, idx, double eps, str kind):
    cdef double[:, :, ::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, :, ::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.int64_t[:, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t B = pv.shape[0], M = pv.shape[1], C = pv.shape[2], k = iv.shape[2]
    cdef int mode
    if kind == "max":
        mode = 0
    elif kind == "mean":
        mode = 1
    elif kind == "add":
        mode = 2
    else:
        raise ValueError(f"unknown aggregation {kind!r}")
    out = np.zeros((B, M, C))
    arg = np.zeros((B, M, C), dtype=np.int64) if mode == 0 else None
    cdef double[:, :, ::1] ov = out
    cdef cnp.int64_t[:, :, ::1] av
    if mode == 0:
        av = arg
    cdef Py_ssize_t b, i, n, c, j
    cdef double base, z, y
    with nogil:
        for b in range(B):
            for i in range(M):
                for n in range(k):
                    j = iv[b, i, n]
                    for c in range(C):
                        base = qv[b, i, c] - pv[b, i, c]
                        z = pv[b, j, c] + base
                        y = z if z >= 0 else eps * z
                        if mode == 0:
                            if n == 0 or y > ov[b, i, c]:
                                ov[b, i, c] = y
                                av[b, i, c] = n
                        else:
                            ov[b, i, c] = ov[b, i, c] + y
                if mode == 1:
                    for c in range(C):
                        ov[b, i, c] = ov[b, i, c] / k
    return out, arg


def edge_aggregate_backward(p, q, idx, double eps, str kind, arg, g):
    cdef double[:, :, ::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, :, ::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.int64_t[:, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t B = pv.shape[0], M = pv.shape[1], C = pv.shape[2], k = iv.shape[2]
    cdef int mode = 0 if kind == "max" else (1 if kind == "mean" else 2)
    gp = np.zeros((B, M, C))
    acc = np.zeros((B, M, C))
    cdef double[:, :, ::1] gpv = gp
    cdef double[:, :, ::1] accv = acc
    cdef cnp.int64_t[:, :, ::1] av
    if mode == 0:
        av = np.ascontiguousarray(arg, dtype=np.int64)
    cdef Py_ssize_t b, i, n, c, j
    cdef double base, z, s, gk
    with nogil:
        for b in range(B):
            for n in range(k):
                for i in range(M):
                    j = iv[b, i, n]
                    for c in range(C):
                        if mode == 0 and av[b, i, c] != n:
                            continue
                        gk = gv[b, i, c] / k if mode == 1 else gv[b, i, c]
                        base = qv[b, i, c] - pv[b, i, c]
                        z = pv[b, j, c] + base
                        s = gk * (1.0 if z >= 0 else eps)
                        gpv[b, j, c] = gpv[b, j, c] + s
                        accv[b, i, c] = accv[b, i, c] + s
        for b in range(B):
            for i in range(M):
                for c in range(C):
                    gpv[b, i, c] = gpv[b, i, c] - accv[b, i, c]
    return gp, acc
