"""Metrics, the synthetic benchmark, sweeps and paired comparisons.

Every report is a pure function of (data, config, seed). CSV floats are
written with ``repr`` so reruns can be compared byte for byte.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from . import radio_sim as rs

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- metrics


def euclidean_errors(predictions, truths) -> np.ndarray:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.ndim != 2 or p.shape[1] < 2 or t.ndim != 2 or t.shape[1] < 2:
        raise ValueError("predictions and truths must be (N, 2) arrays")
    if p.shape[0] != t.shape[0]:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs {t.shape[0]} truths")
    if p.shape[0] == 0:
        raise ValueError("need at least one sample")
    return np.linalg.norm(p[:, :2] - t[:, :2], axis=1)


def mde(predictions, truths) -> float:
    """Mean 2-D Euclidean distance error in meters."""
    return float(euclidean_errors(predictions, truths).mean())


def cdf(errors, grid) -> np.ndarray:
    """Fraction of errors <= each grid point."""
    e = np.sort(np.asarray(errors, dtype=float))
    if e.size == 0:
        raise ValueError("errors must be nonempty")
    return np.searchsorted(e, np.asarray(grid, dtype=float), side="right") / e.size


def default_grid(errors, step: float = 0.25, upper: float = 20.0) -> np.ndarray:
    top = max(upper, float(np.max(errors)))
    return np.arange(0.0, top + step, step)


@dataclass
class EvalReport:
    errors: np.ndarray
    predictions: np.ndarray
    truths: np.ndarray
    grid: np.ndarray
    cdf: np.ndarray
    config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def mde(self) -> float:
        return float(self.errors.mean())

    def write(self, out_dir, prefix: str = "eval") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        err_path = out / f"{prefix}_errors.csv"
        with open(err_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "x_true", "y_true", "x_pred", "y_pred", "error_m"])
            for i, (t, p, e) in enumerate(zip(self.truths, self.predictions, self.errors)):
                w.writerow([i, repr(float(t[0])), repr(float(t[1])), repr(float(p[0])), repr(float(p[1])), repr(float(e))])
        cdf_path = out / f"{prefix}_cdf.csv"
        with open(cdf_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["error_m", "fraction"])
            for g, c in zip(self.grid, self.cdf):
                w.writerow([repr(float(g)), repr(float(c))])
        return [err_path, cdf_path]


def evaluate(model_or_predictions, ds, cfg: dict | None = None, seed: int = 0) -> EvalReport:
    """Score a model (anything with ``predict(ds)``) or a prediction array on ``ds``."""
    cfg = cfg or {}
    pred = model_or_predictions.predict(ds) if hasattr(model_or_predictions, "predict") else np.asarray(model_or_predictions)
    truth = ds.positions[:, :2]
    errors = euclidean_errors(pred, truth)
    grid = default_grid(errors, cfg.get("eval.grid_step", 0.25), cfg.get("eval.grid_max", 20.0))
    return EvalReport(errors, pred[:, :2], truth, grid, cdf(errors, grid), dict(cfg), seed)


def centroid_predictions(train_ds, test_ds) -> np.ndarray:
    """Predict the mean training position for every test sample."""
    return np.repeat(train_ds.positions[:, :2].mean(axis=0, keepdims=True), test_ds.n, axis=0)


# ---------------------------------------------------------------- benchmark data


def environment(cfg: dict, floor: int) -> rs.RadioEnvironment:
    channel = rs.ChannelParams(p_tx=cfg["env.p_tx"], pl0=cfg["env.pl0"], beta=cfg["env.beta"], sigma=cfg["env.sigma"])
    return rs.random_environment(
        cfg["env.n_aps"], cfg["env.width"], cfg["env.height"], seed=cfg["seed"], floor=floor,
        channel=channel, shadowing=cfg["env.shadowing"], corr_length=cfg["env.corr_length"],
        noise_sigma=cfg["env.noise_sigma"], detection_range=cfg["env.detection_range"],
        rssi_floor=cfg["env.rssi_floor"],
    )


def floor_dataset(cfg: dict, floor: int) -> rs.FingerprintDataset:
    env = environment(cfg, floor)
    imu = rs.ImuModel(d=cfg["env.imu_d"])
    return rs.generate_dataset(env, cfg["env.samples"], cfg["env.layout"], imu, seed=cfg["seed"], step=cfg["env.step"])


def split(ds, test_fraction: float, seed: int):
    """Seeded random (train, test) split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    perm = np.random.default_rng([seed, 55]).permutation(ds.n)
    n_test = min(max(int(round(test_fraction * ds.n)), 1), ds.n - 1)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def load_split(cfg: dict):
    """(train, test) from ``data.train``/``data.test`` or the synthetic floor ``env.floor``."""
    if cfg["data.train"]:
        train_ds = rs.read_dataset(cfg["data.train"])
        if cfg["data.test"]:
            return train_ds, rs.read_dataset(cfg["data.test"])
        return split(train_ds, cfg["env.test_fraction"], cfg["seed"])
    return split(floor_dataset(cfg, cfg["env.floor"]), cfg["env.test_fraction"], cfg["seed"])


# ---------------------------------------------------------------- training from config


def train_config(cfg: dict, seed: int) -> mdl.TrainConfig:
    return mdl.TrainConfig(cfg["train.epochs"], cfg["train.batch_size"], cfg["train.lr"], cfg["train.optimizer"], seed)


def graph_budget(cfg: dict, ds) -> int:
    """Parameter count of the DEC model described by ``cfg`` on ``ds``."""
    m = build_from_config(dict(cfg, **{"model.kind": "dec"}), ds, 0)
    return mdl.count_params(m.params)


def build_from_config(cfg: dict, ds, seed: int) -> mdl.GraphLocModel:
    kind = cfg["model.kind"]
    fc = [cfg["model.fc"]] * cfg["model.fc_layers"]
    if kind == "dnn":
        d = ds.d if cfg["model.use_imu"] else 0
        width = mdl.dnn_width_for_budget(graph_budget(cfg, ds), ds.m + d, cfg["model.dnn_layers"])
        return mdl.build_model(ds, "dnn", cfg["model.use_imu"], fc_hidden=[width] * cfg["model.dnn_layers"], seed=seed)
    return mdl.build_model(
        ds, kind, cfg["model.use_imu"], [cfg["model.h"]] * cfg["model.layers"], fc, cfg["model.k_neigh"],
        cfg["model.aggregation"], cfg["model.graph"], cfg["model.threshold"], cfg["model.edge_form"],
        cfg["model.leaky_eps"], seed,
    )


def train_from_config(cfg: dict, train_ds, seed: int | None = None):
    seed = cfg["seed"] if seed is None else seed
    model = build_from_config(cfg, train_ds, seed)
    return mdl.train(model, train_ds, train_config(cfg, seed))


ARM_PRESETS = {
    "dec": {"model.kind": "dec", "model.use_imu": True},
    "dec_rssi": {"model.kind": "dec", "model.use_imu": False},
    "gcn_corr": {"model.kind": "gcn", "model.graph": "corr"},
    "gcn_prob": {"model.kind": "gcn", "model.graph": "prob"},
    "dnn": {"model.kind": "dnn", "model.use_imu": True},
    "dnn_rssi": {"model.kind": "dnn", "model.use_imu": False},
}


def arm_config(cfg: dict, arm: str) -> dict:
    if arm == "current":
        return dict(cfg)
    if arm not in ARM_PRESETS:
        raise ValueError(f"unknown arm {arm!r}; choose from current, {', '.join(ARM_PRESETS)}")
    return dict(cfg, **ARM_PRESETS[arm])


@dataclass
class CellResult:
    name: str
    value: object
    report: EvalReport | None
    history: list
    error: str | None = None

    @property
    def mde(self):
        return None if self.report is None else self.report.mde


def run_cell(name, value, cfg, train_ds, test_ds, seed) -> CellResult:
    """Train and evaluate one configuration; failures are captured, not raised."""
    try:
        model, history = train_from_config(cfg, train_ds, seed)
        return CellResult(name, value, evaluate(model, test_ds, cfg, seed), history)
    except (mdl.TrainingDiverged, ValueError, FloatingPointError) as exc:
        log.warning("cell %s=%s failed: %s", name, value, exc)
        return CellResult(name, value, None, [], f"{type(exc).__name__}: {exc}")


def _run_all(cells, jobs: int):
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(*c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_cell, *c) for c in cells]
        return [f.result() for f in futures]


# ---------------------------------------------------------------- sweep


def sweep(dimension: str, values, cfg: dict, train_ds, test_ds, jobs: int = 1, seed: int | None = None) -> list[CellResult]:
    """One model per value, all with the same seed. Threshold sweeps need a GCN config."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    seed = cfg["seed"] if seed is None else seed
    cells = []
    for v in values:
        if dimension == "k_neigh":
            if cfg["model.kind"] != "dec":
                raise ValueError("k_neigh sweeps apply to the dec model")
            c = dict(cfg, **{"model.k_neigh": int(v)})
        elif dimension == "threshold":
            if cfg["model.kind"] != "gcn":
                raise ValueError("threshold sweeps apply to the gcn model")
            c = dict(cfg, **{"model.threshold": float(v)})
        else:
            raise ValueError(f"unknown sweep dimension {dimension!r}")
        cells.append((dimension, v, c, train_ds, test_ds, seed))
    return _run_all(cells, jobs)


def write_sweep(results: list[CellResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dimension", "value", "mde_m", "status"])
        for r in results:
            w.writerow([r.name, repr(r.value), "" if r.mde is None else repr(r.mde), r.error or "ok"])
    return path


def best(results: list[CellResult]):
    ok = [r for r in results if r.mde is not None]
    return min(ok, key=lambda r: r.mde) if ok else None


# ---------------------------------------------------------------- compare


def compare(arms: dict, train_ds, test_ds, out_dir=None, jobs: int = 1, seed: int = 0) -> list[CellResult]:
    """Train every named config on the same data with the same seed.

    ``arms`` maps a name to a resolved config dict. With ``out_dir`` it
    writes compare_mde.csv, compare_cdf.csv, compare_loss.csv and summary.md.
    """
    if len(arms) < 2:
        raise ValueError("compare needs at least two configurations")
    results = _run_all([(name, None, c, train_ds, test_ds, seed) for name, c in arms.items()], jobs)
    if out_dir is not None:
        write_comparison(results, out_dir)
    return results


def write_comparison(results: list[CellResult], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "compare_mde.csv", out / "compare_cdf.csv", out / "compare_loss.csv", out / "summary.md"]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "mde_m", "n_test", "status"])
        for r in results:
            n = "" if r.report is None else r.report.errors.size
            w.writerow([r.name, "" if r.mde is None else repr(r.mde), n, r.error or "ok"])
    ok = [r for r in results if r.report is not None]
    top = max([float(r.report.errors.max()) for r in ok] + [20.0])
    grid = np.arange(0.0, top + 0.25, 0.25)
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["error_m", *[r.name for r in ok]])
        curves = [cdf(r.report.errors, grid) for r in ok]
        for i, g in enumerate(grid):
            w.writerow([repr(float(g)), *[repr(float(c[i])) for c in curves]])
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *[r.name for r in results]])
        for e in range(max((len(r.history) for r in results), default=0)):
            w.writerow([e, *[repr(r.history[e]) if e < len(r.history) else "" for r in results]])
    lines = ["| arm | MDE (m) | status |", "|---|---|---|"]
    for r in results:
        lines.append(f"| {r.name} | {'-' if r.mde is None else f'{r.mde:.3f}'} | {r.error or 'ok'} |")
    if ok:
        b = min(ok, key=lambda r: r.mde)
        lines += ["", f"Lowest MDE: **{b.name}** ({b.mde:.3f} m)."]
    paths[3].write_text("\n".join(lines) + "\n", encoding="utf-8")
    return paths


# ---------------------------------------------------------------- meta-learning from config


def meta_config(cfg: dict, seed: int | None = None):
    from .meta import MetaConfig

    return MetaConfig(
        inner_lr=cfg["meta.inner_lr"], outer_lr=cfg["meta.outer_lr"], inner_steps=cfg["meta.inner_steps"],
        iterations=cfg["meta.iterations"], weighting=cfg["meta.weighting"], outer_set=cfg["meta.outer_set"],
        outer_optimizer=cfg["meta.outer_optimizer"], batch_size=cfg["meta.batch_size"],
        eps_acc=cfg["meta.eps_acc"], max_adapt_steps=cfg["meta.max_adapt_steps"],
        seed=cfg["seed"] if seed is None else seed,
    )


def meta_train_floors(cfg: dict) -> list[int]:
    """Floors used for meta-training: the first ``meta.tasks`` floors other than the held-out one."""
    floors = [f for f in range(cfg["env.floors"]) if f != cfg["meta.test_floor"]]
    if cfg["meta.test_floor"] >= cfg["env.floors"] or len(floors) < cfg["meta.tasks"]:
        raise ValueError("not enough floors for the requested meta-training tasks and held-out floor")
    return floors[: cfg["meta.tasks"]]


def meta_training_tasks(cfg: dict, datasets=None):
    """Aligned meta-training tasks, one per training floor."""
    from .meta import align_tasks, split_task

    datasets = datasets or {f: floor_dataset(cfg, f) for f in meta_train_floors(cfg)}
    tasks = [split_task(ds, f"floor{f}", 0.7, cfg["seed"]) for f, ds in datasets.items()]
    return align_tasks(tasks, cfg["meta.m"])


def held_out_task(cfg: dict, trial: int = 0, ds=None):
    """Aligned held-out task; ``trial`` reseeds the support/query split."""
    from .meta import align_tasks, split_task

    f = cfg["meta.test_floor"]
    ds = ds if ds is not None else floor_dataset(cfg, f)
    shots = cfg["meta.support_shots"] or None
    task = split_task(ds, f"floor{f}", 0.7, cfg["seed"] + 1000 * trial, max_support=shots)
    return align_tasks([task], cfg["meta.m"])[0]


def init_meta_from_config(cfg: dict, tasks, seed: int):
    from .meta import init_meta_model

    return init_meta_model(
        tasks, cfg["meta.kind"], [cfg["meta.h"]] * cfg["meta.layers"], [cfg["meta.fc"]],
        cfg["meta.k_neigh"], cfg["meta.aggregation"], seed,
    )
