import math

import numpy as np
import pytest

from metagraphloc import meta
from metagraphloc import model as mdl
from metagraphloc import radio_sim as rs


def floor_ds(m=8, n=60, seed=0, d=9):
    env = rs.random_environment(m, 15, 10, seed=seed, channel=rs.ChannelParams(sigma=2.0), detection_range=12)
    return rs.generate_dataset(env, n, "trajectory", rs.ImuModel(d=d), seed=seed)


def tiny_tasks(ms=(8, 10), n=60, dim=6):
    tasks = [meta.split_task(floor_ds(m, n, seed=i), f"t{i}", 0.7, seed=i) for i, m in enumerate(ms)]
    return meta.align_tasks(tasks, dim)


def dnn_meta(tasks, hidden=(8,), seed=0):
    return meta.init_meta_model(tasks, "dnn", fc_hidden=hidden, seed=seed)


FULL = 10**6  # batch size that always covers the whole set


# ---------------------------------------------------------------- inner loop


def test_inner_adapt_copy_semantics():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    before = {k: v.copy() for k, v in mm.params.items()}
    out = meta.inner_adapt(mm.params, mm, tasks[0], 0.05, 3)
    assert all(np.array_equal(mm.params[k], before[k]) for k in before)
    assert any(not np.array_equal(out[k], before[k]) for k in before)


def test_zero_lr_single_step_is_identity():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    out = meta.inner_adapt(mm.params, mm, tasks[0], 0.0, 1)
    assert all(np.array_equal(out[k], mm.params[k]) for k in out)


def test_zero_steps_rejected():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    with pytest.raises(ValueError):
        meta.inner_adapt(mm.params, mm, tasks[0], 0.1, 0)


def test_quadratic_surrogate():
    theta, _ = meta.sgd_steps({"t": np.array(0.0)}, lambda p, n: (float((p["t"] - 2) ** 2), {"t": 2 * (p["t"] - 2)}), 0.1, 1)
    assert theta["t"] == pytest.approx(0.4)


def test_nan_loss_aborts_inner_loop():
    with pytest.raises(mdl.TrainingDiverged):
        meta.sgd_steps({"t": np.array(0.0)}, lambda p, n: (math.nan, {"t": p["t"]}), 0.1, 2)


def test_five_steps_reduce_support_loss():
    wins = 0
    trials = 20
    for s in range(trials):
        tasks = [meta.split_task(floor_ds(6, 30, seed=s), "t", 0.7, seed=s)]
        tasks = meta.align_tasks(tasks, 5)
        mm = dnn_meta(tasks, seed=s)
        arr = meta._arrays(mm, tasks[0])
        before = mdl.mse(mm.spec, mm.params, arr.xs, arr.ys)
        after = mdl.mse(mm.spec, meta.inner_adapt(mm.params, mm, tasks[0], 0.01, 5), arr.xs, arr.ys)
        wins += after < before
    assert wins >= 0.95 * trials


# ---------------------------------------------------------------- outer loop


def test_zero_outer_lr_freezes_params():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    out, hist = meta.meta_train(tasks, meta.MetaConfig(inner_lr=0.01, outer_lr=0.0, iterations=3), mm)
    assert all(np.array_equal(out.params[k], mm.params[k]) for k in mm.params)
    assert len(hist) == 3


def test_single_task_meta_training_reduces_query_loss():
    tasks = tiny_tasks(ms=(8,))
    mm = dnn_meta(tasks)
    arr = meta._arrays(mm, tasks[0])
    before = mdl.mse(mm.spec, mm.params, arr.xq, arr.yq)
    out, _ = meta.meta_train(tasks, meta.MetaConfig(inner_lr=0.01, outer_lr=0.01, iterations=30, batch_size=FULL), mm)
    assert mdl.mse(out.spec, out.params, arr.xq, arr.yq) < before


def linear_step(w, b, x, y, lr):
    r = x @ w + b - y
    scale = 2.0 / r.size
    return w - lr * scale * x.T @ r, b - lr * scale * r.sum(axis=0, keepdims=True)


def test_one_outer_iteration_by_hand():
    tasks = tiny_tasks(dim=4)
    mm = dnn_meta(tasks, hidden=())
    mu, eta = 0.05, 0.1
    cfg = meta.MetaConfig(inner_lr=mu, outer_lr=eta, inner_steps=2, iterations=1, batch_size=FULL)
    out, _ = meta.meta_train(tasks, cfg, mm)
    w0, b0 = mm.params["fc0.W"], mm.params["fc0.b"]
    gw, gb = np.zeros_like(w0), np.zeros_like(b0)
    for t in tasks:
        xs, ys = mm.task_inputs(t, t.support), mm.task_targets(t.support)
        xq, yq = mm.task_inputs(t, t.query), mm.task_targets(t.query)
        w, b = w0, b0
        for _ in range(2):
            w, b = linear_step(w, b, xs, ys, mu)
        r = xq @ w + b - yq
        gw += 2.0 / r.size * xq.T @ r / 2
        gb += 2.0 / r.size * r.sum(axis=0, keepdims=True) / 2
    assert np.allclose(out.params["fc0.W"], w0 - eta * gw, atol=1e-12)
    assert np.allclose(out.params["fc0.b"], b0 - eta * gb, atol=1e-12)


@pytest.mark.parametrize("weighting", ["uniform", "abundance"])
def test_identical_tasks_match_single_task(weighting):
    (task,) = tiny_tasks(ms=(8,))
    mm = dnn_meta([task])
    cfg = meta.MetaConfig(inner_lr=0.01, outer_lr=0.01, iterations=4, weighting=weighting, batch_size=16)
    one, h1 = meta.meta_train([task], cfg, mm)
    three, h3 = meta.meta_train([task, task, task], cfg, mm)
    assert np.allclose(h1, h3, atol=1e-9, rtol=0)
    for k in one.params:
        assert np.max(np.abs(one.params[k] - three.params[k])) < 1e-9


def test_dimension_mismatch_fails_before_training():
    a, b = [meta.split_task(floor_ds(m, 40, seed=i), f"t{i}", seed=i) for i, m in enumerate((8, 10))]
    aligned = meta.align_tasks([a], 6)
    mm = dnn_meta(aligned)
    calls = []
    with pytest.raises(meta.TaskConfigError):
        meta.meta_train([aligned[0], b], meta.MetaConfig(iterations=2), mm, callback=lambda *a: calls.append(a))
    assert calls == []


def test_gcn_rejected_for_latent_inputs():
    with pytest.raises(meta.TaskConfigError):
        meta.init_meta_model(tiny_tasks(), "gcn")


def test_meta_config_validation():
    with pytest.raises(ValueError):
        meta.MetaConfig(inner_lr=0.0)
    with pytest.raises(ValueError):
        meta.MetaConfig(inner_steps=0)
    with pytest.raises(ValueError):
        meta.MetaConfig(weighting="size")


def test_dec_meta_model_trains():
    tasks = tiny_tasks()
    mm = meta.init_meta_model(tasks, "dec", graph_dims=(4,), fc_hidden=(8,), k=3, aggregation="mean")
    out, hist = meta.meta_train(tasks, meta.MetaConfig(inner_lr=0.01, outer_lr=0.001, iterations=3, outer_optimizer="adam"), mm)
    assert len(hist) == 3 and all(math.isfinite(h) for h in hist)
    assert set(out.projections) == {"t0", "t1"}


# ---------------------------------------------------------------- weights


def test_task_weights():
    def fake(n):
        return meta.Task("x", floor_ds(n=n + 1).subset(np.arange(n)), floor_ds(n=2).subset([0]))

    assert np.allclose(meta.task_weights([fake(30), fake(10)]), [0.75, 0.25])
    assert np.allclose(meta.task_weights([fake(5)] * 4), 0.25)
    rng = np.random.default_rng(0)
    assert meta.task_weights([fake(int(s)) for s in rng.integers(1, 40, size=5)]).sum() == pytest.approx(1.0)


def test_task_requires_both_sets():
    ds = floor_ds(n=10)
    with pytest.raises(ValueError):
        meta.Task("x", ds.subset([]), ds)


# ---------------------------------------------------------------- meta-testing


def test_infinite_threshold_gives_zero_steps():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    res = meta.meta_test_adapt(mm, tasks[0], 0.01, math.inf, 10, reference_loss=0.3)
    assert res.J == 0 and res.steps == [0]


def test_optimal_start_gives_zero_steps():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    arr = meta._arrays(mm, tasks[0])
    res = meta.meta_test_adapt(mm, tasks[0], 0.01, 1e-6, 10, reference_loss=mdl.mse(mm.spec, mm.params, arr.xq, arr.yq))
    assert res.J == 0


def test_j_matches_brute_force_scan():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    res = meta.meta_test_adapt(mm, tasks[0], 0.05, 0.01, 60, full_curve=True)
    assert all(q >= 0 for q in res.residual)
    hits = [j for j, q in zip(res.steps, res.residual) if q < 0.01]
    assert res.J == (hits[0] if hits else None)
    for j, q, l in zip(res.steps, res.residual, res.query_loss):
        assert q == (l - res.reference_loss) ** 2
    assert len(res.rows()) == len(res.steps) == 61


def test_unreached_threshold_reports_none():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    res = meta.meta_test_adapt(mm, tasks[0], 0.0, 1e-12, 5, reference_loss=-1.0)
    assert res.J is None and len(res.steps) == 6


def test_reference_loss_is_below_start():
    tasks = tiny_tasks()
    mm = dnn_meta(tasks)
    arr = meta._arrays(mm, tasks[0])
    assert meta.reference_query_loss(mm, tasks[0], max_steps=300) < mdl.mse(mm.spec, mm.params, arr.xq, arr.yq)


# ---------------------------------------------------------------- PCA


def test_line_data_direction():
    t = np.linspace(-3, 3, 11)
    p = meta.pca_fit(np.column_stack([t, 2 * t]), 2)
    assert p.eigenvalues[1] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(p.input_directions()[:, 0], np.array([1, 2]) / math.sqrt(5), atol=1e-9)
    # standardized space: both columns become identical
    assert np.allclose(p.v_m[:, 0], [1 / math.sqrt(2)] * 2, atol=1e-12)


def test_full_dimension_preserves_distances():
    x = np.random.default_rng(0).normal(size=(20, 5)) * [1, 2, 3, 4, 5]
    p = meta.pca_fit(x, 5)
    z = meta.pca_apply(p, x)
    xn = (x - p.mean) / p.scale
    d1 = np.linalg.norm(xn[:, None] - xn[None], axis=-1)
    d2 = np.linalg.norm(z[:, None] - z[None], axis=-1)
    assert np.max(np.abs(d1 - d2)) < 1e-9


def test_pca_properties():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 8))
    prev = math.inf
    for m in range(1, 9):
        p = meta.pca_fit(x, m)
        v = p.v_m
        assert np.max(np.abs(v.T @ v - np.eye(m))) < 1e-9
        assert np.all(np.diff(p.eigenvalues) <= 0) and p.eigenvalues.min() >= -1e-12
        z = meta.pca_apply(p, x)
        assert np.sum(z.var(axis=0)) == pytest.approx(p.eigenvalues[:m].sum(), abs=1e-8)
        xn = (x - p.mean) / p.scale
        err = np.sum((xn - z @ v.T) ** 2)
        assert err <= prev + 1e-9
        prev = err


def test_constant_feature_scale_clamped():
    x = np.column_stack([np.random.default_rng(2).normal(size=10), np.full(10, 4.0)])
    p = meta.pca_fit(x, 2)
    assert p.scale[1] == 1.0
    assert np.all(np.isfinite(meta.pca_apply(p, x)))


def test_pca_bad_arguments():
    with pytest.raises(ValueError):
        meta.pca_fit(np.ones((1, 3)), 1)
    with pytest.raises(ValueError):
        meta.pca_fit(np.ones((5, 3)), 4)


# ---------------------------------------------------------------- alignment


def test_align_tasks_common_dimension():
    tasks = tiny_tasks(ms=(20, 25), dim=12)
    for t in tasks:
        assert t.input_dim == 12
        assert t.features(t.support).shape == (t.support.n, 12)
        assert t.features(t.query).shape == (t.query.n, 12)


def test_align_full_dimension_is_invertible():
    (t,) = meta.align_tasks([meta.split_task(floor_ds(8, 40), "t")], 8 + 9)
    z = t.features(t.support)
    back = z @ t.projection.v_m.T * t.projection.scale + t.projection.mean
    norm = t.input_norm
    assert np.allclose(back, mdl.flat_features(t.support, norm), atol=1e-9)


def test_align_too_large_lists_maxima():
    tasks = [meta.split_task(floor_ds(m, 40, seed=i), f"t{i}", seed=i) for i, m in enumerate((8, 10))]
    with pytest.raises(meta.TaskConfigError, match=r"t0: 17.*t1: 19"):
        meta.align_tasks(tasks, 18)


def test_split_is_disjoint_and_seeded():
    ds = floor_ds(n=50)
    a = meta.split_task(ds, "t", 0.7, seed=3)
    b = meta.split_task(ds, "t", 0.7, seed=3)
    assert a.support.n == 35 and a.query.n == 15
    assert np.array_equal(a.support.positions, b.support.positions)
    s = {tuple(r) for r in a.support.positions}
    assert not s & {tuple(r) for r in a.query.positions}


def test_meta_checkpoint_roundtrip(tmp_path):
    tasks = tiny_tasks()
    mm = meta.init_meta_model(tasks, "dec", graph_dims=(4,), fc_hidden=(8,), k=3)
    mm, _ = meta.meta_train(tasks, meta.MetaConfig(inner_lr=0.01, iterations=1), mm)
    meta.save_meta(mm, tmp_path / "m.json")
    back = meta.load_meta(tmp_path / "m.json")
    assert back.spec == mm.spec and back.pos_scale == mm.pos_scale
    assert all(np.array_equal(back.params[k], mm.params[k]) for k in mm.params)
    for k, p in mm.projections.items():
        assert np.array_equal(back.projections[k].components, p.components)
    assert np.array_equal(back.predict(tasks[0], tasks[0].query), mm.predict(tasks[0], tasks[0].query))
