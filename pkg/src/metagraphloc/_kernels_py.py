"""Numpy fallback for the compiled kernels in ``_kernels.pyx``.

Accumulation order matches the Cython loops exactly (sequential over the
feature axis for distances, over neighbour slots for aggregation), so both
backends produce bit-identical results.
"""
import numpy as np

BACKEND = "python"


def knn_indices(x, k):
    """k nearest neighbours of every node, per batch item.

    x: (B, M, C) float64. Returns (B, M, k) int64 ordered by (distance, index);
    a node is never its own neighbour. Requires 1 <= k <= M - 1.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    B, M, C = x.shape
    d = np.zeros((B, M, M))
    for c in range(C):
        diff = x[:, :, None, c] - x[:, None, :, c]
        d += diff * diff
    d[:, np.arange(M), np.arange(M)] = np.inf
    order = np.argsort(d, axis=-1, kind="stable")
    return np.ascontiguousarray(order[..., :k], dtype=np.int64)


def _leaky(z, eps):
    return np.where(z >= 0, z, eps * z)


def edge_aggregate_forward(p, q, idx, eps, kind):
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    B, M, C = p.shape
    k = idx.shape[2]
    bsel = np.arange(B)[:, None]
    base = q - p
    arg = None
    if kind == "max":
        out = None
        arg = np.zeros((B, M, C), dtype=np.int64)
        for n in range(k):
            y = _leaky(p[bsel, idx[:, :, n]] + base, eps)
            if out is None:
                out = y
            else:
                better = y > out
                out = np.where(better, y, out)
                arg[better] = n
    elif kind in ("mean", "add"):
        out = np.zeros((B, M, C))
        for n in range(k):
            out += _leaky(p[bsel, idx[:, :, n]] + base, eps)
        if kind == "mean":
            out = out / k
    else:
        raise ValueError(f"unknown aggregation {kind!r}")
    return out, arg


def edge_aggregate_backward(p, q, idx, eps, kind, arg, g):
    B, M, C = p.shape
    k = idx.shape[2]
    bsel = np.arange(B)[:, None]
    bfull = np.broadcast_to(bsel, (B, M))
    base = q - p
    gp = np.zeros((B, M, C))
    acc = np.zeros((B, M, C))
    gk = g / k if kind == "mean" else g
    for n in range(k):
        z = p[bsel, idx[:, :, n]] + base
        s = gk * np.where(z >= 0, 1.0, eps)
        if kind == "max":
            s = np.where(arg == n, s, 0.0)
        np.add.at(gp, (bfull, idx[:, :, n]), s)
        acc += s
    gp -= acc
    return gp, acc.copy()
