"""Flat ``key = value`` run configuration with dotted section names.

Lines are ``key = value``; ``#`` starts a comment. Types come from the
default table below. Lists are comma separated. Unknown keys and values that
do not parse raise :class:`ConfigError` carrying the key and line number.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = f" (key {key!r}" + (f", line {line})" if line is not None else ")") if key else ""
        super().__init__(message + where)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class Key:
    default: object
    kind: type
    is_list: bool = False
    help: str = ""


_KEYS: dict[str, Key] = {
    "seed": Key(42, int, help="master seed"),
    # data: empty paths mean the synthetic benchmark is generated
    "data.train": Key("", str, help="training dataset CSV"),
    "data.test": Key("", str, help="test dataset CSV"),
    # synthetic environment
    "env.n_aps": Key(30, int),
    "env.floors": Key(3, int),
    "env.samples": Key(800, int),
    "env.width": Key(40.0, float),
    "env.height": Key(30.0, float),
    "env.p_tx": Key(20.0, float),
    "env.pl0": Key(40.0, float),
    "env.beta": Key(3.0, float),
    "env.sigma": Key(3.0, float),
    "env.shadowing": Key("correlated", str),
    "env.corr_length": Key(4.0, float),
    "env.noise_sigma": Key(1.0, float),
    "env.detection_range": Key(20.0, float),
    "env.rssi_floor": Key(-110.0, float),
    "env.imu_d": Key(9, int),
    "env.layout": Key("trajectory", str),
    "env.step": Key(1.0, float),
    "env.floor": Key(0, int, help="floor used by single-floor commands"),
    "env.test_fraction": Key(0.3, float),
    # model
    "model.kind": Key("dec", str),
    "model.h": Key(128, int),
    "model.layers": Key(2, int),
    "model.fc": Key(128, int),
    "model.fc_layers": Key(1, int),
    "model.k_neigh": Key(15, int),
    "model.aggregation": Key("max", str),
    "model.edge_form": Key("diff", str),
    "model.graph": Key("corr", str),
    "model.threshold": Key(0.2, float),
    "model.use_imu": Key(True, bool),
    "model.leaky_eps": Key(0.01, float),
    "model.dnn_layers": Key(2, int),
    # training
    "train.epochs": Key(50, int),
    "train.batch_size": Key(8, int),
    "train.lr": Key(0.0005, float),
    "train.optimizer": Key("adam", str),
    # meta-learning
    "meta.inner_lr": Key(0.0005, float),
    "meta.outer_lr": Key(0.001, float),
    "meta.inner_steps": Key(5, int),
    "meta.iterations": Key(1500, int),
    "meta.tasks": Key(2, int),
    "meta.m": Key(120, int),
    "meta.weighting": Key("uniform", str),
    "meta.outer_set": Key("query", str),
    "meta.outer_optimizer": Key("sgd", str),
    "meta.batch_size": Key(32, int),
    "meta.eps_acc": Key(1e-3, float),
    "meta.max_adapt_steps": Key(500, int),
    "meta.adapt_lr": Key(0.0005, float),
    "meta.test_floor": Key(2, int),
    "meta.support_shots": Key(0, int, help="cap on held-out support size, 0 = no cap"),
    "meta.h": Key(128, int),
    "meta.layers": Key(2, int),
    "meta.fc": Key(128, int),
    "meta.k_neigh": Key(15, int),
    "meta.aggregation": Key("max", str),
    "meta.kind": Key("dec", str),
    # evaluation
    "eval.grid_max": Key(20.0, float),
    "eval.grid_step": Key(0.25, float),
    "eval.ml_grid_step": Key(0.5, float),
    "sweep.dimension": Key("k_neigh", str),
    "sweep.values": Key([5.0, 10.0, 15.0, 20.0, 25.0], float, is_list=True),
    "compare.arms": Key(["dec", "dec_rssi", "dnn"], str, is_list=True),
}

CHOICES = {
    "env.shadowing": ("iid", "correlated"),
    "env.layout": ("grid", "trajectory"),
    "model.kind": ("dec", "gcn", "dnn"),
    "model.aggregation": ("max", "mean", "add"),
    "model.edge_form": ("diff", "concat"),
    "model.graph": ("corr", "prob"),
    "train.optimizer": ("adam", "sgd"),
    "meta.weighting": ("uniform", "abundance"),
    "meta.outer_set": ("query", "support"),
    "meta.outer_optimizer": ("adam", "sgd"),
    "meta.kind": ("dec", "dnn"),
    "meta.aggregation": ("max", "mean", "add"),
    "sweep.dimension": ("threshold", "k_neigh"),
}


def defaults() -> dict:
    return {k: (list(v.default) if v.is_list else v.default) for k, v in _KEYS.items()}


def known_keys() -> list[str]:
    return list(_KEYS)


def _parse_scalar(text: str, kind: type, key: str, line):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {kind.__name__}", key, line) from None


def parse_value(key: str, text: str, line=None):
    if key not in _KEYS:
        raise ConfigError("unknown configuration key", key, line)
    spec = _KEYS[key]
    if spec.is_list:
        items = [t for t in text.split(",") if t.strip()]
        if not items:
            raise ConfigError("list value is empty", key, line)
        value = [_parse_scalar(t, spec.kind, key, line) for t in items]
    else:
        value = _parse_scalar(text, spec.kind, key, line)
    allowed = CHOICES.get(key)
    if allowed is not None and value not in allowed:
        raise ConfigError(f"{value!r} is not one of {', '.join(allowed)}", key, line)
    return value


def parse_text(text: str) -> dict:
    """Only the keys set in ``text``."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", body, n)
        key, value = (s.strip() for s in body.split("=", 1))
        out[key] = parse_value(key, value, n)
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file, then ``overrides`` (already typed or raw strings)."""
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {str(p)!r} not found")
        cfg.update(parse_text(p.read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if key not in _KEYS:
            raise ConfigError("unknown configuration key", key)
        cfg[key] = parse_value(key, value) if isinstance(value, str) else value
    return cfg


def dump(cfg: dict) -> str:
    lines = []
    for key in _KEYS:
        v = cfg[key]
        if isinstance(v, list):
            text = ",".join(map(str, v))
        elif isinstance(v, bool):
            text = "true" if v else "false"
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def standard_benchmark_path() -> Path:
    return Path(str(resources.files("metagraphloc") / "configs" / "standard.cfg"))


def standard_benchmark(**overrides) -> dict:
    """The versioned standard synthetic benchmark configuration."""
    return load(standard_benchmark_path(), overrides)
