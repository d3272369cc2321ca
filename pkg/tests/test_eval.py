import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from metagraphloc import config
from metagraphloc import eval as ev


def tiny_cfg(**extra):
    base = {
        "env.n_aps": 8, "env.samples": 80, "env.width": 15.0, "env.height": 10.0, "env.detection_range": 12.0,
        "model.h": 8, "model.fc": 16, "model.k_neigh": 3, "model.aggregation": "mean",
        "train.epochs": 2, "train.batch_size": 16, "train.lr": 0.001,
    }
    base.update(extra)
    return config.load(None, base)


# ---------------------------------------------------------------- metrics


def test_mde_examples():
    t = np.random.default_rng(0).normal(size=(7, 2))
    assert ev.mde(t, t) == 0.0
    assert ev.mde([[3.0, 4.0]], [[0.0, 0.0]]) == 5.0


def test_mde_matches_one_line_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(1, 50))
        p, t = rng.normal(size=(n, 2)) * 10, rng.normal(size=(n, 2)) * 10
        oracle = sum(math.hypot(a - c, b - d) for (a, b), (c, d) in zip(p, t)) / n
        assert abs(ev.mde(p, t) - oracle) < 1e-12


def test_mde_length_mismatch():
    with pytest.raises(ValueError):
        ev.mde(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        ev.mde(np.zeros((0, 2)), np.zeros((0, 2)))


def test_cdf_examples():
    assert ev.cdf(np.zeros(5), [0.0, 1.0, 2.0]).tolist() == [1.0, 1.0, 1.0]
    assert ev.cdf([1.0, 3.0], [0.0, 2.0, 4.0]).tolist() == [0.0, 0.5, 1.0]
    e = np.random.default_rng(2).exponential(size=30)
    assert ev.cdf(e, [e.max()])[0] == 1.0
    with pytest.raises(ValueError):
        ev.cdf([], [1.0])


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 50)))
def test_cdf_monotone_and_saturates(errors):
    grid = ev.default_grid(errors, 0.5, 10.0)
    c = ev.cdf(errors, grid)
    assert np.all(np.diff(c) >= 0)
    assert c[-1] == 1.0


def test_report_invariants_and_files(tmp_path):
    rng = np.random.default_rng(3)
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    pred = test.positions[:, :2] + rng.normal(size=(test.n, 2))
    r = ev.evaluate(pred, test, cfg, seed=4)
    assert r.mde == pytest.approx(np.mean(r.errors), abs=0)
    assert r.cdf[-1] == 1.0 and r.seed == 4
    err_path, cdf_path = r.write(tmp_path, "x")
    errors = np.loadtxt(err_path, delimiter=",", skiprows=1)
    assert np.array_equal(errors[:, 5], r.errors)
    assert np.loadtxt(cdf_path, delimiter=",", skiprows=1).shape == (r.grid.size, 2)


def test_centroid_predictor():
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    pred = ev.centroid_predictions(train, test)
    assert np.allclose(pred, train.positions[:, :2].mean(axis=0))


def test_split_is_seeded_and_disjoint():
    cfg = tiny_cfg()
    ds = ev.floor_dataset(cfg, 0)
    a = ev.split(ds, 0.25, 1)
    b = ev.split(ds, 0.25, 1)
    assert np.array_equal(a[0].positions, b[0].positions)
    assert a[0].n + a[1].n == ds.n and a[1].n == 20
    with pytest.raises(ValueError):
        ev.split(ds, 1.0, 0)


# ---------------------------------------------------------------- training harness


def test_dnn_arm_is_parameter_matched():
    cfg = tiny_cfg()
    train, _ = ev.load_split(cfg)
    dec = ev.build_from_config(ev.arm_config(cfg, "dec"), train, 0)
    dnn = ev.build_from_config(ev.arm_config(cfg, "dnn"), train, 0)
    a, b = (sum(v.size for v in m.params.values()) for m in (dec, dnn))
    assert abs(a - b) / a < 0.10


def test_identical_configs_identical_mde():
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    res = ev.compare({"a": ev.arm_config(cfg, "dec"), "b": ev.arm_config(cfg, "dec")}, train, test, seed=3)
    assert res[0].mde == res[1].mde
    assert res[0].history == res[1].history


def test_sweep_single_value():
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    res = ev.sweep("k_neigh", [3], cfg, train, test)
    assert len(res) == 1 and res[0].mde is not None


def test_sweep_validation():
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    with pytest.raises(ValueError):
        ev.sweep("k_neigh", [], cfg, train, test)
    with pytest.raises(ValueError):
        ev.sweep("threshold", [0.1], cfg, train, test)
    with pytest.raises(ValueError):
        ev.sweep("depth", [1], cfg, train, test)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_failed_cell_is_recorded_and_sweep_continues(tmp_path):
    cfg = tiny_cfg(**{"train.lr": 1e6, "train.optimizer": "sgd", "model.aggregation": "add"})
    train, test = ev.load_split(cfg)
    res = ev.sweep("k_neigh", [2, 3], cfg, train, test)
    assert len(res) == 2
    assert all(r.error for r in res) and all(r.mde is None for r in res)
    text = ev.write_sweep(res, tmp_path / "s.csv").read_text()
    assert "TrainingDiverged" in text


def test_threshold_sweep_rows(tmp_path):
    cfg = tiny_cfg(**{"model.kind": "gcn"})
    train, test = ev.load_split(cfg)
    res = ev.sweep("threshold", [0.1, 0.3], cfg, train, test)
    rows = ev.write_sweep(res, tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "dimension,value,mde_m,status" and len(rows) == 3
    assert ev.best(res).mde == min(r.mde for r in res)


def test_compare_writes_reports(tmp_path):
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    arms = {a: ev.arm_config(cfg, a) for a in ("dec", "dec_rssi", "dnn")}
    res = ev.compare(arms, train, test, tmp_path, seed=1)
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {"compare_mde.csv", "compare_cdf.csv", "compare_loss.csv", "summary.md"}
    header = (tmp_path / "compare_cdf.csv").read_text().splitlines()[0]
    assert header == "error_m,dec,dec_rssi,dnn"
    assert len((tmp_path / "compare_loss.csv").read_text().splitlines()) == 1 + cfg["train.epochs"]
    assert "Lowest MDE" in (tmp_path / "summary.md").read_text()
    assert len(res) == 3


def test_compare_needs_two_arms():
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    with pytest.raises(ValueError):
        ev.compare({"a": cfg}, train, test)


def test_unknown_arm():
    with pytest.raises(ValueError):
        ev.arm_config(tiny_cfg(), "gat")


def test_parallel_matches_serial():
    cfg = tiny_cfg()
    train, test = ev.load_split(cfg)
    serial = ev.sweep("k_neigh", [2, 3], cfg, train, test, jobs=1)
    parallel = ev.sweep("k_neigh", [2, 3], cfg, train, test, jobs=2)
    assert [r.mde for r in serial] == [r.mde for r in parallel]


# ---------------------------------------------------------------- meta helpers


def test_meta_floors_skip_held_out():
    cfg = tiny_cfg(**{"meta.test_floor": 0, "meta.tasks": 2})
    assert ev.meta_train_floors(cfg) == [1, 2]
    assert ev.meta_train_floors(tiny_cfg()) == [0, 1]


def test_held_out_task_respects_support_cap():
    cfg = tiny_cfg(**{"meta.m": 6, "meta.support_shots": 10})
    t = ev.held_out_task(cfg, 0)
    assert t.support.n == 10 and t.input_dim == 6
    other = ev.held_out_task(cfg, 1)
    assert not np.array_equal(t.support.positions, other.support.positions)
