"""AP-graph adjacency builders and GCN normalization."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphSpec:
    adjacency: np.ndarray
    kind: str
    param: float | int | None = None

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


def _binarize(raw: np.ndarray, threshold: float, weighted: bool) -> np.ndarray:
    keep = np.abs(raw) >= threshold
    if weighted:
        return np.where(keep, raw, 0.0)
    return keep.astype(np.float64)


def pearson_matrix(rssi: np.ndarray) -> np.ndarray:
    """Pearson correlation between AP columns; zero-variance columns correlate 0, diagonal 1."""
    x = np.asarray(rssi, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("pearson adjacency needs at least two samples")
    xc = x - x.mean(axis=0)
    ss = (xc * xc).sum(axis=0)
    cov = xc.T @ xc
    denom = np.sqrt(np.outer(ss, ss))
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(denom > 0, cov / denom, 0.0)
    a = np.clip((a + a.T) / 2, -1.0, 1.0)
    np.fill_diagonal(a, 1.0)
    return a


def pearson_adjacency(dataset, threshold: float = 0.2, weighted: bool = False) -> GraphSpec:
    """Correlation graph: |a_ij| >= threshold becomes an edge (or keeps its weight)."""
    a = _binarize(pearson_matrix(dataset.rssi), threshold, weighted)
    np.fill_diagonal(a, 1.0)
    return GraphSpec(a, "corr", threshold)


def joint_appearance_matrix(mask: np.ndarray) -> np.ndarray:
    """Raw (asymmetric) a_ij = #(i and j detected) / #(i detected); rows of never-seen APs are 0."""
    det = np.asarray(mask, dtype=np.float64)
    both = det.T @ det
    seen = det.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(seen[:, None] > 0, both / seen[:, None], 0.0)


def joint_appearance_adjacency(dataset, threshold: float = 0.2, weighted: bool = False) -> GraphSpec:
    """Co-detection graph, symmetrized with max(a_ij, a_ji) before thresholding."""
    if dataset.n < 1:
        raise ValueError("joint appearance adjacency needs at least one sample")
    raw = joint_appearance_matrix(dataset.mask)
    sym = np.maximum(raw, raw.T)
    return GraphSpec(_binarize(sym, threshold, weighted), "prob", threshold)


def clamp_k(k: int, n_nodes: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_nodes < 2:
        raise ValueError("dynamic KNN needs at least two nodes")
    if k >= n_nodes:
        log.warning("k=%d >= n_nodes=%d; clamped to %d", k, n_nodes, n_nodes - 1)
        return n_nodes - 1
    return k


def knn_indices(features: np.ndarray, k: int) -> np.ndarray:
    """Neighbour indices, (M, k) for one graph or (B, M, k) for a batch.

    Ordered by (Euclidean distance, node index); self excluded.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim <= 2
    if x.ndim == 1:
        x = x[:, None]
    if single:
        x = x[None]
    k = clamp_k(k, x.shape[1])
    idx = kernels.knn_indices(x, k)
    return idx[0] if single else idx


def dynamic_knn_edges(node_features: np.ndarray, k: int) -> GraphSpec:
    """Directed KNN graph: a_ij = 1 iff j is among the k nearest neighbours of i."""
    idx = knn_indices(node_features, k)
    m = idx.shape[0]
    a = np.zeros((m, m))
    a[np.arange(m)[:, None], idx] = 1.0
    return GraphSpec(a, "dynamic_knn", idx.shape[1])


def normalize_adjacency(g: GraphSpec | np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2."""
    a = np.asarray(g.adjacency if isinstance(g, GraphSpec) else g, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if (a < 0).any():
        raise ValueError("adjacency entries must be non-negative")
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1)
    assert (deg > 0).all()
    inv = 1.0 / np.sqrt(deg)
    return inv[:, None] * a_hat * inv[None, :]


def build_static_graph(dataset, kind: str, threshold: float) -> GraphSpec:
    if kind == "corr":
        return pearson_adjacency(dataset, threshold)
    if kind == "prob":
        return joint_appearance_adjacency(dataset, threshold)
    raise ValueError(f"unknown static graph kind {kind!r}")


def export_adjacency(g: GraphSpec, path) -> None:
    """CSV dump of the M x M matrix, one row per line."""
    lines = [",".join(map(repr, row)) for row in np.asarray(g.adjacency, dtype=float).tolist()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# kind={g.kind},param={g.param}\n")
        fh.write("\n".join(lines) + "\n")
