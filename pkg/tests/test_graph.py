import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metagraphloc import graph as g
from metagraphloc.radio_sim import FingerprintDataset


def make_ds(rssi, mask=None):
    rssi = np.asarray(rssi, dtype=float)
    mask = rssi != -110.0 if mask is None else np.asarray(mask, bool)
    n = rssi.shape[0]
    return FingerprintDataset(np.zeros((n, 3)), rssi, np.zeros((n, 0)), mask)


def pearson_oracle(x):
    """Two-pass covariance, written independently of the library."""
    n, m = x.shape
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            mi = sum(x[:, i]) / n
            mj = sum(x[:, j]) / n
            cov = sum((x[t, i] - mi) * (x[t, j] - mj) for t in range(n))
            vi = sum((x[t, i] - mi) ** 2 for t in range(n))
            vj = sum((x[t, j] - mj) ** 2 for t in range(n))
            out[i, j] = 0.0 if vi == 0 or vj == 0 else cov / math.sqrt(vi * vj)
    np.fill_diagonal(out, 1.0)
    return out


def joint_oracle(mask):
    n, m = mask.shape
    out = np.zeros((m, m))
    for i in range(m):
        seen = [t for t in range(n) if mask[t, i]]
        for j in range(m):
            if seen:
                out[i, j] = sum(1 for t in seen if mask[t, j]) / len(seen)
    return out


# ---------------------------------------------------------------- Pearson


def test_identical_columns_correlate_one():
    x = np.random.default_rng(0).normal(size=(20, 1))
    assert g.pearson_matrix(np.hstack([x, x, -x]))[0, 1] == pytest.approx(1.0)


def test_anti_correlated_columns():
    a = g.pearson_matrix(np.array([[-40.0, -60.0], [-50.0, -50.0], [-60.0, -40.0]]))
    assert a[0, 1] == pytest.approx(-1.0)


def test_pearson_matches_oracle_small():
    x = np.random.default_rng(1).normal(-70, 8, size=(10, 4))
    assert np.max(np.abs(g.pearson_matrix(x) - pearson_oracle(x))) < 1e-12


def test_zero_variance_column_is_unrelated():
    x = np.random.default_rng(2).normal(size=(8, 3))
    x[:, 1] = -110.0
    a = g.pearson_matrix(x)
    assert a[1, 0] == 0.0 and a[0, 1] == 0.0 and a[1, 1] == 1.0


def test_pearson_properties():
    x = np.random.default_rng(3).normal(size=(30, 9))
    a = g.pearson_matrix(x)
    assert np.array_equal(a, a.T)
    assert np.all(np.diag(a) == 1.0)
    assert np.all(np.abs(a) <= 1.0)


def test_pearson_adjacency_binarizes():
    x = np.random.default_rng(4).normal(size=(30, 6))
    spec = g.pearson_adjacency(make_ds(x), 0.2)
    assert spec.kind == "corr" and spec.param == 0.2
    assert set(np.unique(spec.adjacency)) <= {0.0, 1.0}
    assert np.all(np.diag(spec.adjacency) == 1.0)
    raw = g.pearson_matrix(x)
    off = ~np.eye(6, dtype=bool)
    assert np.array_equal(spec.adjacency[off] == 1.0, np.abs(raw[off]) >= 0.2)


def test_pearson_needs_two_samples():
    with pytest.raises(ValueError):
        g.pearson_adjacency(make_ds(np.array([[-50.0, -60.0]])))


def test_weighted_mode_keeps_values():
    x = np.random.default_rng(5).normal(size=(30, 5))
    spec = g.pearson_adjacency(make_ds(x), 0.1, weighted=True)
    raw = g.pearson_matrix(x)
    keep = np.abs(raw) >= 0.1
    assert np.allclose(spec.adjacency[keep], raw[keep])


def test_threshold_monotone():
    x = np.random.default_rng(6).normal(size=(40, 8))
    ds = make_ds(x)
    prev = None
    for t in (0.0, 0.1, 0.2, 0.3, 0.5, 0.9):
        a = g.pearson_adjacency(ds, t).adjacency
        if prev is not None:
            assert np.all(a <= prev)
        prev = a


# ---------------------------------------------------------------- joint appearance


def test_conditional_certainty():
    mask = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], bool)
    assert g.joint_appearance_matrix(mask)[0, 1] == 1.0


def test_hand_counted_halves():
    # i detected at L1, L2; j detected at L2, L3
    mask = np.array([[1, 0], [1, 1], [0, 1]], bool)
    raw = g.joint_appearance_matrix(mask)
    assert raw[0, 1] == 0.5 and raw[1, 0] == 0.5


def test_never_detected_ap_row_and_column_zero():
    mask = np.array([[1, 0, 1], [1, 0, 0], [0, 0, 1]], bool)
    ds = make_ds(np.where(mask, -50.0, -110.0), mask)
    a = g.joint_appearance_adjacency(ds, 0.1).adjacency
    assert np.all(a[1] == 0) and np.all(a[:, 1] == 0)


def test_joint_symmetrized_with_max():
    mask = np.array([[1, 1], [1, 0], [1, 0], [1, 0]], bool)
    ds = make_ds(np.where(mask, -50.0, -110.0), mask)
    raw = g.joint_appearance_matrix(mask)
    assert raw[0, 1] == 0.25 and raw[1, 0] == 1.0
    a = g.joint_appearance_adjacency(ds, 0.5).adjacency
    assert a[0, 1] == 1.0 and a[1, 0] == 1.0


# ---------------------------------------------------------------- dynamic KNN


def test_scalar_features_knn():
    idx = g.knn_indices(np.array([0.0, 1.0, 2.0, 10.0]), 2)
    assert set(idx[0]) == {1, 2}
    assert idx[3].tolist() == [2, 1]


def test_identical_nodes_exact_k_and_index_ties():
    idx = g.knn_indices(np.zeros((5, 3)), 2)
    assert idx.shape == (5, 2)
    assert idx[0].tolist() == [1, 2] and idx[4].tolist() == [0, 1]
    assert np.array_equal(idx, g.knn_indices(np.zeros((5, 3)), 2))


def test_saturated_k_gives_complete_graph():
    a = g.dynamic_knn_edges(np.random.default_rng(0).normal(size=(6, 2)), 5).adjacency
    assert np.array_equal(a, 1.0 - np.eye(6))


def test_k_clamped_with_warning(caplog):
    idx = g.knn_indices(np.random.default_rng(0).normal(size=(4, 2)), 10)
    assert idx.shape == (4, 3)
    assert "clamped" in caplog.text


def test_knn_errors():
    with pytest.raises(ValueError):
        g.knn_indices(np.zeros((4, 2)), 0)
    with pytest.raises(ValueError):
        g.knn_indices(np.zeros((1, 2)), 1)


def test_dynamic_rows_have_exactly_k():
    a = g.dynamic_knn_edges(np.random.default_rng(1).normal(size=(12, 3)), 4).adjacency
    assert np.all(a.sum(axis=1) == 4) and np.all(np.diag(a) == 0)


# ---------------------------------------------------------------- normalization


def test_path_graph_normalization():
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
    n = g.normalize_adjacency(a)
    assert n[0, 0] == pytest.approx(0.5)
    assert n[0, 1] == pytest.approx(1 / math.sqrt(6))
    assert n[1, 1] == pytest.approx(1 / 3)


def test_empty_graph_normalizes_to_identity():
    assert np.array_equal(g.normalize_adjacency(np.zeros((4, 4))), np.eye(4))


def test_normalization_rejects_bad_input():
    with pytest.raises(ValueError):
        g.normalize_adjacency(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        g.normalize_adjacency(-np.ones((2, 2)))


@settings(max_examples=50, deadline=None)
@given(m=st.integers(2, 16), seed=st.integers(0, 10_000))
def test_normalization_symmetric_and_contractive(m, seed):
    rng = np.random.default_rng(seed)
    a = (rng.uniform(size=(m, m)) < 0.4).astype(float)
    a = np.triu(a, 1)
    a = a + a.T
    n = g.normalize_adjacency(a)
    assert np.max(np.abs(n - n.T)) < 1e-12
    assert np.max(np.abs(np.linalg.eigvalsh(n))) <= 1 + 1e-9


def test_export_adjacency(tmp_path):
    spec = g.pearson_adjacency(make_ds(np.random.default_rng(0).normal(size=(10, 3))), 0.2)
    p = tmp_path / "a.csv"
    g.export_adjacency(spec, p)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# kind=corr")
    assert np.array_equal(np.loadtxt(p, delimiter=",", comments="#"), spec.adjacency)


def test_build_static_graph_kinds():
    ds = make_ds(np.random.default_rng(0).normal(size=(10, 3)))
    assert g.build_static_graph(ds, "corr", 0.2).kind == "corr"
    assert g.build_static_graph(ds, "prob", 0.2).kind == "prob"
    with pytest.raises(ValueError):
        g.build_static_graph(ds, "geo", 0.2)
