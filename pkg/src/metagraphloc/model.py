"""Graph localization networks (GCN, dynamic EdgeConv) and a flat DNN baseline.

Every model maps an input batch to 2-D coordinates. Graph models take node
features of shape (B, n_nodes, F); the DNN takes flat vectors (B, D).
Training minimizes mean squared error in normalized coordinates; predictions
are returned in meters.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import graph as graphs
from .numeric import DimensionError, Tape, backward, optimizer_step
from .numeric.optim import OptimizerState

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- inputs


@dataclass
class NormalizationParams:
    """Input and target scaling fitted on training data.

    RSSI is min-max scaled with the missing-AP placeholder mapped to 0 and
    clipped to [0, 1]; IMU channels are centred and divided by one pooled
    standard deviation (per-channel z-scoring would blow near-constant sensor
    channels up to unit-variance noise); coordinates are centred and divided
    by one shared scale.
    """

    rssi_min: float
    rssi_max: float
    imu_mean: np.ndarray
    imu_std: np.ndarray
    pos_mean: np.ndarray
    pos_scale: float

    @property
    def d(self) -> int:
        return self.imu_mean.shape[0]

    def to_dict(self):
        return {
            "rssi_min": self.rssi_min,
            "rssi_max": self.rssi_max,
            "imu_mean": self.imu_mean.tolist(),
            "imu_std": self.imu_std.tolist(),
            "pos_mean": self.pos_mean.tolist(),
            "pos_scale": self.pos_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            float(d["rssi_min"]),
            float(d["rssi_max"]),
            np.array(d["imu_mean"], dtype=float),
            np.array(d["imu_std"], dtype=float),
            np.array(d["pos_mean"], dtype=float),
            float(d["pos_scale"]),
        )


def fit_normalization(ds, use_imu: bool = True) -> NormalizationParams:
    detected = ds.rssi[ds.mask]
    rmax = float(detected.max()) if detected.size else ds.rssi_floor + 1.0
    if rmax <= ds.rssi_floor:
        rmax = ds.rssi_floor + 1.0
    if use_imu and ds.d:
        mean = ds.imu.mean(axis=0)
        pooled = float(np.sqrt(ds.imu.var(axis=0).mean()))
        std = np.full(ds.d, pooled if pooled > 1e-12 else 1.0)
    else:
        mean = std = np.zeros(0)
    xy = ds.positions[:, :2]
    pos_mean = xy.mean(axis=0)
    scale = float(np.sqrt(((xy - pos_mean) ** 2).sum(axis=1).mean()))
    return NormalizationParams(float(ds.rssi_floor), rmax, mean, std, pos_mean, scale if scale > 1e-12 else 1.0)


def normalize_rssi(rssi: np.ndarray, norm: NormalizationParams) -> np.ndarray:
    r = (np.asarray(rssi, dtype=float) - norm.rssi_min) / (norm.rssi_max - norm.rssi_min)
    return np.clip(r, 0.0, 1.0)


def normalize_imu(imu: np.ndarray, norm: NormalizationParams) -> np.ndarray:
    return (np.asarray(imu, dtype=float)[..., : norm.d] - norm.imu_mean) / norm.imu_std


def build_node_features(fp, norm: NormalizationParams) -> np.ndarray:
    """(M, 1 + d) node features of one fingerprint; the IMU vector is repeated on every node."""
    rssi = np.asarray(fp.rssi, dtype=float)
    imu = np.asarray(fp.imu, dtype=float)
    if imu.shape[0] < norm.d:
        raise DimensionError(f"fingerprint has {imu.shape[0]} IMU values, normalization expects {norm.d}")
    r = normalize_rssi(rssi, norm)[:, None]
    if norm.d == 0:
        return r
    i = normalize_imu(imu, norm)
    return np.hstack([r, np.broadcast_to(i, (rssi.shape[0], norm.d))])


def node_features(ds, norm: NormalizationParams) -> np.ndarray:
    """Batched :func:`build_node_features`: (N, M, 1 + d)."""
    r = normalize_rssi(ds.rssi, norm)[:, :, None]
    if norm.d == 0:
        return r
    i = normalize_imu(ds.imu, norm)
    return np.concatenate([r, np.broadcast_to(i[:, None, :], (ds.n, ds.m, norm.d))], axis=2)


def flat_features(ds, norm: NormalizationParams) -> np.ndarray:
    """[rssi || imu] per sample, (N, M + d)."""
    r = normalize_rssi(ds.rssi, norm)
    if norm.d == 0:
        return r
    return np.hstack([r, normalize_imu(ds.imu, norm)])


def targets(ds, norm: NormalizationParams) -> np.ndarray:
    return (ds.positions[:, :2] - norm.pos_mean) / norm.pos_scale


# ---------------------------------------------------------------- architecture


@dataclass
class ModelSpec:
    kind: str = "dec"  # dec | gcn | dnn
    n_nodes: int = 30
    in_features: int = 10
    graph_dims: list = field(default_factory=lambda: [128, 128])
    fc_hidden: list = field(default_factory=lambda: [128])
    out_dim: int = 2
    k: int = 15
    aggregation: str = "max"
    edge_form: str = "diff"  # diff | concat
    leaky_eps: float = 0.01

    def __post_init__(self):
        if self.kind not in ("dec", "gcn", "dnn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.aggregation not in ("max", "mean", "add"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.edge_form not in ("diff", "concat"):
            raise ValueError(f"unknown edge form {self.edge_form!r}")

    @property
    def flat_width(self) -> int:
        if self.kind == "dnn":
            return self.in_features
        return self.n_nodes * (self.graph_dims[-1] if self.graph_dims else self.in_features)


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_params(spec: ModelSpec, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 17])
    params = {}
    if spec.kind != "dnn":
        c_in = spec.in_features
        for l, c_out in enumerate(spec.graph_dims):
            if spec.kind == "gcn":
                params[f"g{l}.W"] = _glorot(rng, c_in, c_out)
            else:
                params[f"g{l}.Omega"] = _glorot(rng, c_in, c_out)
                if spec.edge_form == "concat":
                    params[f"g{l}.Omega_self"] = _glorot(rng, c_in, c_out)
                params[f"g{l}.Phi"] = _glorot(rng, c_in, c_out)
            c_in = c_out
    widths = [spec.flat_width, *spec.fc_hidden, spec.out_dim]
    for l, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"fc{l}.W"] = _glorot(rng, a, b)
        params[f"fc{l}.b"] = np.zeros((1, b))
    return params


def count_params(params: dict) -> int:
    return int(sum(np.size(v) for v in params.values()))


# ---------------------------------------------------------------- layers


def gcn_layer(tape: Tape, h, adj_norm, w, activation: str = "relu"):
    z = tape.matmul(tape.matmul(tape.const(adj_norm), h), w)
    return tape.relu(z) if activation == "relu" else z


def gcn_forward(tape: Tape, x, adj_norm: np.ndarray, weights: list):
    """Stacked ReLU(Norm . H . W) layers. ``x`` is (M, F) or (B, M, F)."""
    h = tape._lift(x)
    if adj_norm.shape[0] != h.value.shape[-2]:
        raise DimensionError(f"adjacency {adj_norm.shape} vs {h.value.shape[-2]} nodes")
    for w in weights:
        h = gcn_layer(tape, h, adj_norm, w)
    return h


def neighbour_sets(h: np.ndarray, k: int) -> np.ndarray:
    # ascending node index fixes the aggregation order independently of distance rank
    return np.sort(graphs.knn_indices(h, k), axis=-1)


def edgeconv_layer(tape: Tape, h, omega, phi, k: int, aggregation="max", eps=0.01, omega_self=None):
    """h_i' = AGG_{j in knn(i)} leaky(Omega (h_j - h_i) + Phi h_i).

    With ``omega_self`` the message is Omega h_j + Omega_self h_i + Phi h_i
    (concatenation form). Neighbours come from the current features.
    """
    h = tape._lift(h)
    if h.value.ndim != 3 or h.value.shape[1] < 2:
        raise DimensionError("edgeconv needs (B, M, C) input with M >= 2")
    idx = neighbour_sets(h.value, k)
    p = tape.matmul(h, omega)
    q = tape.matmul(h, phi)
    if omega_self is not None:
        q = tape.add(tape.add(q, tape.matmul(h, omega_self)), p)
    return tape.edge_aggregate(p, q, idx, eps, aggregation)


def edgeconv_forward(tape: Tape, x, layers: list, k: int, aggregation="max", eps=0.01):
    """``layers`` is a list of (Omega, Phi) or (Omega, Phi, Omega_self) nodes."""
    h = tape._lift(x)
    if h.value.ndim == 2:
        h = tape.reshape(h, (1,) + h.value.shape)
    if h.value.shape[1] < 2:
        raise DimensionError("edgeconv needs at least two nodes")
    for layer in layers:
        omega, phi = layer[0], layer[1]
        extra = layer[2] if len(layer) > 2 else None
        h = edgeconv_layer(tape, h, omega, phi, k, aggregation, eps, extra)
    return h


def edge_embedding(h_i, h_j) -> np.ndarray:
    """Edge representation h_i || h_j."""
    h_i, h_j = np.atleast_1d(np.asarray(h_i, float)), np.atleast_1d(np.asarray(h_j, float))
    if h_i.shape != h_j.shape:
        raise DimensionError(f"edge_embedding: widths {h_i.shape} and {h_j.shape}")
    return np.concatenate([h_i, h_j])


def fc_head(tape: Tape, z, layers: list, hidden_activation: str = "relu"):
    """Dense stack over flattened input; the last layer is linear."""
    z = tape._lift(z)
    if z.value.ndim > 2:
        z = tape.reshape(z, (z.value.shape[0], -1))
    for i, (w, b) in enumerate(layers):
        if z.value.shape[-1] != w.value.shape[0]:
            raise DimensionError(f"fc layer {i}: input width {z.value.shape[-1]} vs {w.value.shape[0]}")
        z = tape.add_row(tape.matmul(z, w), b)
        if i < len(layers) - 1 and hidden_activation == "relu":
            z = tape.relu(z)
    return z


def forward(tape: Tape, spec: ModelSpec, p: dict, x, adj_norm=None):
    """Full network on a batch; ``p`` maps parameter names to tape nodes."""
    n_fc = len(spec.fc_hidden) + 1
    fc = [(p[f"fc{l}.W"], p[f"fc{l}.b"]) for l in range(n_fc)]
    if spec.kind == "dnn":
        return fc_head(tape, x, fc)
    if spec.kind == "gcn":
        h = gcn_forward(tape, x, adj_norm, [p[f"g{l}.W"] for l in range(len(spec.graph_dims))])
    else:
        layers = []
        for l in range(len(spec.graph_dims)):
            layer = [p[f"g{l}.Omega"], p[f"g{l}.Phi"]]
            if spec.edge_form == "concat":
                layer.append(p[f"g{l}.Omega_self"])
            layers.append(layer)
        h = edgeconv_forward(tape, x, layers, spec.k, spec.aggregation, spec.leaky_eps)
    return fc_head(tape, h, fc)


def loss_and_grad(spec: ModelSpec, params: dict, x: np.ndarray, y: np.ndarray, adj_norm=None):
    """MSE over batch and coordinates, with gradients for every parameter."""
    tape = Tape()
    p = {k: tape.param(v, name=k) for k, v in params.items()}
    pred = forward(tape, spec, p, tape.const(x), adj_norm)
    loss = tape.mean(tape.square(tape.sub(pred, tape.const(y))))
    grads = backward(tape, loss)
    return float(loss.value.reshape(())), grads


def predict_raw(spec: ModelSpec, params: dict, x: np.ndarray, adj_norm=None, chunk: int = 256) -> np.ndarray:
    out = []
    for s in range(0, x.shape[0], chunk):
        tape = Tape()
        p = {k: tape.const(v) for k, v in params.items()}
        out.append(forward(tape, spec, p, tape.const(x[s:s + chunk]), adj_norm).value)
    return np.vstack(out) if out else np.zeros((0, spec.out_dim))


def mse(spec, params, x, y, adj_norm=None) -> float:
    pred = predict_raw(spec, params, x, adj_norm)
    return float(((pred - y) ** 2).mean())


# ---------------------------------------------------------------- model object


@dataclass
class GraphLocModel:
    spec: ModelSpec
    params: dict
    norm: NormalizationParams
    adj_norm: np.ndarray | None = None
    graph_kind: str = "dynamic_knn"
    graph_param: float | None = None
    use_imu: bool = True

    def inputs(self, ds) -> np.ndarray:
        if self.spec.kind == "dnn":
            return flat_features(ds, self.norm)
        return node_features(ds, self.norm)

    def predict(self, ds) -> np.ndarray:
        """Predicted (x, y) in meters, shape (N, 2)."""
        z = predict_raw(self.spec, self.params, self.inputs(ds), self.adj_norm)
        return z * self.norm.pos_scale + self.norm.pos_mean


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 0.0005
    optimizer: str = "adam"
    seed: int = 0


def build_model(
    ds,
    kind: str = "dec",
    use_imu: bool = True,
    graph_dims=(128, 128),
    fc_hidden=(128,),
    k: int = 15,
    aggregation: str = "max",
    graph_kind: str = "corr",
    threshold: float = 0.2,
    edge_form: str = "diff",
    leaky_eps: float = 0.01,
    seed: int = 0,
) -> GraphLocModel:
    """Fresh model sized for ``ds``; static graphs and normalization are fitted on ``ds``."""
    norm = fit_normalization(ds, use_imu)
    if kind == "dnn":
        spec = ModelSpec("dnn", ds.m, ds.m + norm.d, [], list(fc_hidden))
        return GraphLocModel(spec, init_params(spec, seed), norm, None, "none", None, use_imu)
    spec = ModelSpec(kind, ds.m, 1 + norm.d, list(graph_dims), list(fc_hidden), 2, graphs.clamp_k(k, ds.m), aggregation, edge_form, leaky_eps)
    adj = None
    gparam = spec.k
    if kind == "gcn":
        g = graphs.build_static_graph(ds, graph_kind, threshold)
        adj = graphs.normalize_adjacency(g)
        gparam = threshold
    else:
        graph_kind = "dynamic_knn"
    return GraphLocModel(spec, init_params(spec, seed), norm, adj, graph_kind, gparam, use_imu)


def dnn_width_for_budget(budget: int, in_dim: int, n_hidden: int = 2, out_dim: int = 2) -> int:
    """Hidden width w so that an in_dim -> w x n_hidden -> out_dim MLP has about ``budget`` parameters."""
    best, best_err = 1, None
    for w in range(1, 4096):
        n = in_dim * w + w + (n_hidden - 1) * (w * w + w) + w * out_dim + out_dim
        err = abs(n - budget)
        if best_err is None or err < best_err:
            best, best_err = w, err
        if n > budget:
            break
    return best


def train(model: GraphLocModel, ds, config: TrainConfig, callback=None):
    """Minibatch training of ``model`` on ``ds``.

    Returns (trained model, per-epoch mean loss). The input model is not
    modified. Batch order comes from ``config.seed`` only.
    """
    if ds.n == 0:
        raise ValueError("empty training set")
    x = model.inputs(ds)
    y = targets(ds, model.norm)
    params = {k: v.copy() for k, v in model.params.items()}
    opt = OptimizerState(kind=config.optimizer, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch, 3]).permutation(ds.n)
        losses = []
        for s in range(0, ds.n, config.batch_size):
            b = order[s:s + config.batch_size]
            loss, grads = loss_and_grad(model.spec, params, x[b], y[b], model.adj_norm)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch starting {s}")
            params = optimizer_step(opt, params, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, history[-1], params)
    return replace(model, params=params), history


def dnn_baseline_train(ds, config: TrainConfig, width: int = 128, n_hidden: int = 2, use_imu: bool = True):
    model = build_model(ds, "dnn", use_imu, fc_hidden=[width] * n_hidden, seed=config.seed)
    return train(model, ds, config)


# ---------------------------------------------------------------- checkpoints


def model_to_dict(model: GraphLocModel) -> dict:
    return {
        "format": "metagraphloc-model",
        "version": CHECKPOINT_VERSION,
        "spec": asdict(model.spec),
        "norm": model.norm.to_dict(),
        "graph_kind": model.graph_kind,
        "graph_param": model.graph_param,
        "use_imu": model.use_imu,
        "adj_norm": None if model.adj_norm is None else model.adj_norm.tolist(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.params.items()},
    }


def model_from_dict(d: dict) -> GraphLocModel:
    if d.get("format") != "metagraphloc-model" or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a metagraphloc model checkpoint (or unsupported version)")
    params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
    adj = None if d["adj_norm"] is None else np.array(d["adj_norm"], dtype=float)
    return GraphLocModel(ModelSpec(**d["spec"]), params, NormalizationParams.from_dict(d["norm"]), adj, d["graph_kind"], d["graph_param"], d["use_imu"])


def save_model(model: GraphLocModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path) -> GraphLocModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
