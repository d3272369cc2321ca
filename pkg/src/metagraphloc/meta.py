"""Meta-learning over floor-level localization tasks.

First-order MAML: every task adapts a copy of the meta-parameters with a few
SGD steps on its support set, and the meta-parameters then move along the
average (or data-weighted) query-set gradient taken at the adapted
parameters. Second-order terms through the inner loop are dropped.

Environments with different AP counts are mapped to a shared m-dimensional
input by a per-task PCA fitted on the support set. The m latent features are
fed to graph models as m virtual nodes with one feature each.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as mdl
from .numeric.optim import OptimizerState, optimizer_step

META_VERSION = 1


class TaskConfigError(ValueError):
    pass


# ---------------------------------------------------------------- PCA


@dataclass
class PcaProjection:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # (D, D) eigenvectors as columns, descending eigenvalue
    eigenvalues: np.ndarray
    m: int

    @property
    def v_m(self) -> np.ndarray:
        return self.components[:, : self.m]

    def input_directions(self) -> np.ndarray:
        """Retained axes expressed in the original (unstandardized) input coordinates, unit length."""
        d = self.v_m * self.scale[:, None]
        return d / np.linalg.norm(d, axis=0)

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=float) for k in ("mean", "scale", "components", "eigenvalues")), int(d["m"]))


def pca_fit(x: np.ndarray, m: int) -> PcaProjection:
    """Standardize, take the 1/n covariance, eigendecompose, keep the top m directions.

    Each eigenvector is sign-normalized so its largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    if not 1 <= m <= dim:
        raise ValueError(f"m={m} must be in [1, {dim}]")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    xn = (x - mean) / std
    cov = xn.T @ xn / n
    cov = (cov + cov.T) / 2
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(dim)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    return PcaProjection(mean, std, vecs, vals, m)


def pca_apply(p: PcaProjection, x: np.ndarray) -> np.ndarray:
    return ((np.asarray(x, dtype=np.float64) - p.mean) / p.scale) @ p.v_m


# ---------------------------------------------------------------- tasks


@dataclass
class Task:
    """One floor: disjoint support and query sets, scored with MSE.

    After :func:`align_tasks` the task also carries its own input scaling and
    PCA projection.
    """

    id: str
    support: object
    query: object
    input_norm: mdl.NormalizationParams | None = None
    projection: PcaProjection | None = None

    def __post_init__(self):
        if self.support.n == 0 or self.query.n == 0:
            raise ValueError(f"task {self.id}: support and query sets must be nonempty")

    @property
    def input_dim(self) -> int:
        if self.projection is not None:
            return self.projection.m
        return flat_width(self.support)

    def features(self, ds) -> np.ndarray:
        """Flat model input (N, input_dim)."""
        norm = self.input_norm or mdl.fit_normalization(self.support)
        flat = mdl.flat_features(ds, norm)
        return pca_apply(self.projection, flat) if self.projection is not None else flat


def flat_width(ds) -> int:
    """Width of the flattened fused input: M RSSI values plus the d IMU channels once."""
    return ds.m + ds.d


def split_task(ds, task_id: str, support_fraction: float = 0.7, seed: int = 0, max_support=None, max_query=None) -> Task:
    """Seeded random support/query split of one floor's dataset."""
    perm = np.random.default_rng([seed, 101]).permutation(ds.n)
    n_s = int(round(support_fraction * ds.n))
    n_s = min(max(n_s, 1), ds.n - 1)
    s_idx, q_idx = perm[:n_s], perm[n_s:]
    if max_support is not None:
        s_idx = s_idx[:max_support]
    if max_query is not None:
        q_idx = q_idx[:max_query]
    return Task(task_id, ds.subset(s_idx), ds.subset(q_idx))


def align_tasks(tasks: list[Task], m: int) -> list[Task]:
    """Per-task PCA to a shared input dimension m, fitted on each support set."""
    limits = {t.id: flat_width(t.support) for t in tasks}
    if m > min(limits.values()):
        detail = ", ".join(f"{k}: {v}" for k, v in limits.items())
        raise TaskConfigError(f"m={m} exceeds the flattened input size of some task ({detail})")
    out = []
    for t in tasks:
        norm = mdl.fit_normalization(t.support)
        flat = mdl.flat_features(t.support, norm)
        out.append(replace(t, input_norm=norm, projection=pca_fit(flat, m)))
    return out


def task_weights(tasks: list[Task]) -> np.ndarray:
    """Data-abundance weights |D_k^s| / sum_k |D_k^s|."""
    sizes = np.array([t.support.n for t in tasks], dtype=float)
    if (sizes <= 0).any():
        raise ValueError("all support sets must be nonempty")
    return sizes / sizes.sum()


# ---------------------------------------------------------------- meta model


@dataclass
class MetaConfig:
    inner_lr: float = 0.0005
    outer_lr: float = 0.001
    inner_steps: int = 5
    iterations: int = 1500
    weighting: str = "uniform"  # uniform | abundance
    outer_set: str = "query"  # query | support
    outer_optimizer: str = "sgd"
    batch_size: int = 32
    eps_acc: float = 1e-3
    max_adapt_steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if not (self.inner_lr > 0 and self.outer_lr >= 0):
            raise ValueError("inner_lr must be > 0 and outer_lr >= 0")
        if self.inner_steps < 1 or self.iterations < 0:
            raise ValueError("inner_steps must be >= 1")
        if self.weighting not in ("uniform", "abundance"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.outer_set not in ("query", "support"):
            raise ValueError(f"unknown outer set {self.outer_set!r}")


@dataclass
class MetaModel:
    spec: mdl.ModelSpec
    params: dict
    pos_mean: np.ndarray
    pos_scale: float
    projections: dict = field(default_factory=dict)

    def task_inputs(self, task: Task, ds) -> np.ndarray:
        x = task.features(ds)
        return x if self.spec.kind == "dnn" else x[:, :, None]

    def task_targets(self, ds) -> np.ndarray:
        return (ds.positions[:, :2] - self.pos_mean) / self.pos_scale

    def predict(self, task: Task, ds, params=None) -> np.ndarray:
        z = mdl.predict_raw(self.spec, self.params if params is None else params, self.task_inputs(task, ds))
        return z * self.pos_scale + self.pos_mean


def init_meta_model(tasks: list[Task], kind="dec", graph_dims=(128, 128), fc_hidden=(128,), k=15, aggregation="max", seed=0) -> MetaModel:
    dims = {t.input_dim for t in tasks}
    if len(dims) != 1:
        raise TaskConfigError(f"tasks disagree on input dimension {sorted(dims)}; align them first")
    (dim,) = dims
    if kind == "gcn":
        raise TaskConfigError("latent virtual-node inputs have no static graph; use dec or dnn")
    if kind == "dnn":
        spec = mdl.ModelSpec("dnn", dim, dim, [], list(fc_hidden))
    else:
        from .graph import clamp_k
        spec = mdl.ModelSpec(kind, dim, 1, list(graph_dims), list(fc_hidden), 2, clamp_k(k, dim), aggregation)
    xy = np.concatenate([t.support.positions[:, :2] for t in tasks])
    mean = xy.mean(axis=0)
    scale = float(np.sqrt(((xy - mean) ** 2).sum(axis=1).mean())) or 1.0
    return MetaModel(spec, mdl.init_params(spec, seed), mean, scale)


@dataclass
class _TaskArrays:
    xs: np.ndarray
    ys: np.ndarray
    xq: np.ndarray
    yq: np.ndarray


def _arrays(mm: MetaModel, task: Task) -> _TaskArrays:
    return _TaskArrays(
        mm.task_inputs(task, task.support), mm.task_targets(task.support),
        mm.task_inputs(task, task.query), mm.task_targets(task.query),
    )


def _batch(n: int, size: int | None, rng) -> np.ndarray:
    if size is None or size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def sgd_steps(params: dict, loss_grad, lr: float, n_steps: int) -> tuple[dict, list]:
    """``n_steps`` plain gradient steps; ``loss_grad(params, step) -> (loss, grads)``."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    theta = {k: v.copy() for k, v in params.items()}
    losses = []
    for n in range(n_steps):
        loss, grads = loss_grad(theta, n)
        if not math.isfinite(loss):
            raise mdl.TrainingDiverged(f"inner loss became {loss} at step {n}")
        losses.append(loss)
        theta = {k: v - lr * grads[k] for k, v in theta.items()}
    return theta, losses


def inner_adapt(theta: dict, mm: MetaModel, task: Task, mu: float, n_steps: int, batch_size=None, seed=(0,)) -> dict:
    """Task-specific parameters after ``n_steps`` SGD steps on the support set.

    ``theta`` is never modified. Minibatches are drawn from a generator seeded
    by ``seed`` and the step number only, so identical tasks see identical
    batches.
    """
    arr = _arrays(mm, task)
    return _inner(theta, mm.spec, arr, mu, n_steps, batch_size, seed)[0]


def _inner(theta, spec, arr: _TaskArrays, mu, n_steps, batch_size, seed):
    def loss_grad(p, n):
        b = _batch(arr.xs.shape[0], batch_size, np.random.default_rng([*seed, n, 7]))
        return mdl.loss_and_grad(spec, p, arr.xs[b], arr.ys[b])

    return sgd_steps(theta, loss_grad, mu, n_steps)


def meta_train(tasks: list[Task], cfg: MetaConfig, mm: MetaModel, callback=None) -> tuple[MetaModel, list]:
    """Run ``cfg.iterations`` outer iterations; returns the meta-model and per-iteration mean outer loss."""
    if not tasks:
        raise TaskConfigError("need at least one task")
    dims = {t.input_dim for t in tasks}
    if len(dims) != 1 or next(iter(dims)) != (mm.spec.n_nodes if mm.spec.kind != "dnn" else mm.spec.in_features):
        raise TaskConfigError(f"task input dimensions {sorted(dims)} do not match the meta-model; align tasks first")
    arrays = [_arrays(mm, t) for t in tasks]
    weights = task_weights(tasks) if cfg.weighting == "abundance" else np.full(len(tasks), 1.0 / len(tasks))
    theta = {k: v.copy() for k, v in mm.params.items()}
    opt = OptimizerState(kind=cfg.outer_optimizer, lr=cfg.outer_lr)
    history = []
    for i in range(cfg.iterations):
        total = {k: np.zeros_like(v) for k, v in theta.items()}
        losses = []
        for w, arr in zip(weights, arrays):
            theta_k, _ = _inner(theta, mm.spec, arr, cfg.inner_lr, cfg.inner_steps, cfg.batch_size, (cfg.seed, i))
            if cfg.outer_set == "query":
                x, y = arr.xq, arr.yq
            else:
                x, y = arr.xs, arr.ys
            b = _batch(x.shape[0], cfg.batch_size, np.random.default_rng([cfg.seed, i, 9]))
            loss, g = mdl.loss_and_grad(mm.spec, theta_k, x[b], y[b])
            if not math.isfinite(loss):
                raise mdl.TrainingDiverged(f"outer loss became {loss} at iteration {i}")
            losses.append(loss)
            for k in total:
                total[k] += w * g[k]
        theta = optimizer_step(opt, theta, total)
        history.append(float(np.mean(losses)))
        if callback is not None:
            callback(i, history[-1])
    projections = {t.id: t.projection for t in tasks if t.projection is not None}
    return replace(mm, params=theta, projections=projections), history


# ---------------------------------------------------------------- meta-testing


@dataclass
class AdaptationResult:
    params: dict
    J: int | None  # None: never epsilon-accurate within the step cap
    steps: list
    support_loss: list
    query_loss: list
    residual: list
    mde: list
    reference_loss: float

    def rows(self):
        return list(zip(self.steps, self.support_loss, self.query_loss, self.residual, self.mde))


def first_accurate_step(residuals, eps_acc: float):
    """min{j : Q(j) < eps_acc}, or None."""
    for j, q in enumerate(residuals):
        if q < eps_acc:
            return j
    return None


def reference_query_loss(mm: MetaModel, task: Task, lr: float = 0.005, tol: float = 1e-6, window: int = 50, max_steps: int = 2000) -> float:
    """Query loss of an approximate task optimum.

    Full-batch Adam on the support set from the meta-parameters until the
    support loss moves less than ``tol`` over ``window`` steps (or the cap).
    """
    arr = _arrays(mm, task)
    params = {k: v.copy() for k, v in mm.params.items()}
    opt = OptimizerState(kind="adam", lr=lr)
    recent = []
    for _ in range(max_steps):
        loss, g = mdl.loss_and_grad(mm.spec, params, arr.xs, arr.ys)
        recent.append(loss)
        if len(recent) > window and abs(recent[-window - 1] - loss) < tol:
            break
        params = optimizer_step(opt, params, g)
    return mdl.mse(mm.spec, params, arr.xq, arr.yq)


def meta_test_adapt(mm: MetaModel, task: Task, mu_t: float, eps_acc: float, max_steps: int, reference_loss=None, full_curve: bool = False, params=None) -> AdaptationResult:
    """Gradient steps on the support set starting from the meta-parameters (or ``params``).

    After each step j the query loss is recorded along with
    Q(j) = (L(theta_j, Dq) - L(theta*, Dq))^2. Stops at the first
    epsilon-accurate step unless ``full_curve``; J is None if never reached.
    """
    if task.support.n == 0:
        raise ValueError("empty support set")
    arr = _arrays(mm, task)
    if reference_loss is None:
        reference_loss = reference_query_loss(mm, task)
    theta = {k: v.copy() for k, v in (mm.params if params is None else params).items()}
    res = AdaptationResult(theta, None, [], [], [], [], [], float(reference_loss))
    truth = task.query.positions[:, :2]
    j = 0
    while True:
        s_loss, grads = mdl.loss_and_grad(mm.spec, theta, arr.xs, arr.ys)
        pred = mdl.predict_raw(mm.spec, theta, arr.xq)
        q_loss = float(((pred - arr.yq) ** 2).mean())
        q_res = (q_loss - reference_loss) ** 2
        err = float(np.linalg.norm(pred * mm.pos_scale + mm.pos_mean - truth, axis=1).mean())
        res.steps.append(j)
        res.support_loss.append(s_loss)
        res.query_loss.append(q_loss)
        res.residual.append(q_res)
        res.mde.append(err)
        if res.J is None and q_res < eps_acc:
            res.J = j
            res.params = {k: v.copy() for k, v in theta.items()}
            if not full_curve:
                break
        if j >= max_steps:
            break
        theta = {k: v - mu_t * grads[k] for k, v in theta.items()}
        j += 1
    if res.J is None or full_curve:
        res.params = theta
    return res


# ---------------------------------------------------------------- checkpoints


def meta_to_dict(mm: MetaModel) -> dict:
    return {
        "format": "metagraphloc-meta",
        "version": META_VERSION,
        "spec": asdict(mm.spec),
        "pos_mean": mm.pos_mean.tolist(),
        "pos_scale": mm.pos_scale,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in mm.params.items()},
        "projections": {k: p.to_dict() for k, p in mm.projections.items()},
    }


def meta_from_dict(d: dict) -> MetaModel:
    if d.get("format") != "metagraphloc-meta" or d.get("version") != META_VERSION:
        raise ValueError("not a metagraphloc meta-model checkpoint (or unsupported version)")
    params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
    proj = {k: PcaProjection.from_dict(v) for k, v in d["projections"].items()}
    return MetaModel(mdl.ModelSpec(**d["spec"]), params, np.array(d["pos_mean"], dtype=float), float(d["pos_scale"]), proj)


def save_meta(mm: MetaModel, path) -> None:
    Path(path).write_text(json.dumps(meta_to_dict(mm)), encoding="utf-8")


def load_meta(path) -> MetaModel:
    return meta_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
