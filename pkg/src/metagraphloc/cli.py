"""``metagraphloc`` command-line entry point.

Every command resolves a configuration (defaults, then ``--config``, then
``--set`` and ``--seed``), writes its outputs under the output directory and
records a ``manifest.json`` from which ``metagraphloc replay`` can reproduce
the run. Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import eval as ev
from . import graph as graphs
from . import kernels
from . import meta
from . import model as mdl
from . import radio_sim as rs

log = logging.getLogger("metagraphloc")

COMMANDS = ("gen-data", "train", "sweep", "meta-train", "meta-test", "eval", "compare", "graph-export")


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------- commands


def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v):
    return repr(float(v)) if v is not None else ""


def cmd_gen_data(cfg, out: Path, args) -> list[Path]:
    paths = []
    for f in range(cfg["env.floors"]):
        p = out / f"floor{f}.csv"
        rs.write_dataset(ev.floor_dataset(cfg, f), p)
        paths.append(p)
    train_ds, test_ds = ev.split(ev.floor_dataset(cfg, cfg["env.floor"]), cfg["env.test_fraction"], cfg["seed"])
    for name, ds in (("train.csv", train_ds), ("test.csv", test_ds)):
        rs.write_dataset(ds, out / name)
        paths.append(out / name)
    return paths


def cmd_train(cfg, out: Path, args) -> list[Path]:
    train_ds, _ = ev.load_split(cfg)
    model, history = ev.train_from_config(cfg, train_ds)
    ckpt = out / "model.json"
    mdl.save_model(model, ckpt)
    loss = _write_rows(out / "train_loss.csv", ["epoch", "loss"], [(e, repr(v)) for e, v in enumerate(history)])
    return [ckpt, loss]


def cmd_eval(cfg, out: Path, args) -> list[Path]:
    if not args.model:
        raise cfgmod.ConfigError("eval needs --model PATH", "model")
    model = mdl.load_model(args.model)
    train_ds, test_ds = ev.load_split(cfg)
    report = ev.evaluate(model, test_ds, cfg, cfg["seed"])
    paths = report.write(out, "eval")
    rows = [("model", repr(report.mde)), ("centroid", repr(ev.mde(ev.centroid_predictions(train_ds, test_ds), test_ds.positions)))]
    if not cfg["data.train"]:
        env = ev.environment(cfg, cfg["env.floor"])
        ml = rs.ml_baseline_locate_many(env, list(test_ds), cfg["eval.ml_grid_step"])
        rows.append(("ml_baseline", repr(ev.mde(ml, test_ds.positions))))
    paths.append(_write_rows(out / "eval_summary.csv", ["predictor", "mde_m"], rows))
    return paths


def cmd_sweep(cfg, out: Path, args) -> list[Path]:
    train_ds, test_ds = ev.load_split(cfg)
    dim = cfg["sweep.dimension"]
    if dim == "threshold" and cfg["model.kind"] != "gcn":
        cfg = dict(cfg, **{"model.kind": "gcn"})
    if dim == "k_neigh" and cfg["model.kind"] != "dec":
        cfg = dict(cfg, **{"model.kind": "dec"})
    results = ev.sweep(dim, cfg["sweep.values"], cfg, train_ds, test_ds, args.jobs)
    return [ev.write_sweep(results, out / "sweep.csv")]


def cmd_compare(cfg, out: Path, args) -> list[Path]:
    train_ds, test_ds = ev.load_split(cfg)
    arms = {a: ev.arm_config(cfg, a) for a in cfg["compare.arms"]}
    results = ev.compare(arms, train_ds, test_ds, None, args.jobs, cfg["seed"])
    return ev.write_comparison(results, out)


def cmd_meta_train(cfg, out: Path, args) -> list[Path]:
    tasks = ev.meta_training_tasks(cfg)
    mm = ev.init_meta_from_config(cfg, tasks, cfg["seed"])
    mm, history = meta.meta_train(tasks, ev.meta_config(cfg), mm)
    ckpt = out / "meta_model.json"
    meta.save_meta(mm, ckpt)
    loss = _write_rows(out / "meta_loss.csv", ["iteration", "outer_loss"], [(i, repr(v)) for i, v in enumerate(history)])
    return [ckpt, loss]


def cmd_meta_test(cfg, out: Path, args) -> list[Path]:
    if not args.model:
        raise cfgmod.ConfigError("meta-test needs --model PATH (a meta-train checkpoint)", "model")
    mm = meta.load_meta(args.model)
    task = ev.held_out_task(cfg)
    if task.input_dim != mm.spec.n_nodes:
        raise cfgmod.ConfigError(f"meta.m={cfg['meta.m']} does not match the checkpoint input width {mm.spec.n_nodes}", "meta.m")
    reference = meta.reference_query_loss(mm, task)
    start = None
    if args.init == "random":
        start = mdl.init_params(mm.spec, cfg["seed"] + 1)
    res = meta.meta_test_adapt(mm, task, cfg["meta.adapt_lr"], cfg["meta.eps_acc"], cfg["meta.max_adapt_steps"], reference, full_curve=True, params=start)
    report = _write_rows(
        out / "adaptation_report.csv",
        ["step", "support_loss", "query_loss", "residual_q", "mde_m"],
        [(j, repr(s), repr(q), repr(r), repr(m)) for j, s, q, r, m in res.rows()],
    )
    summary = _write_rows(
        out / "adaptation_summary.csv",
        ["init", "J", "reference_query_loss", "final_mde_m"],
        [(args.init, "not reached" if res.J is None else res.J, repr(reference), repr(res.mde[-1]))],
    )
    return [report, summary]


def cmd_graph_export(cfg, out: Path, args) -> list[Path]:
    train_ds, _ = ev.load_split(cfg)
    g = graphs.build_static_graph(train_ds, cfg["model.graph"], cfg["model.threshold"])
    p = out / "adjacency.csv"
    graphs.export_adjacency(g, p)
    return [p]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "meta-train": cmd_meta_train,
    "meta-test": cmd_meta_test,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "graph-export": cmd_graph_export,
}


# ---------------------------------------------------------------- plumbing


def versions() -> dict:
    return {
        "metagraphloc": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "kernels": kernels.BACKEND,
    }


def resolve_config(args) -> dict:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects key=value, got {item!r}", item)
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfgmod.load(args.config, overrides)
    for key in ("data.train", "data.test"):
        if cfg[key] and not Path(cfg[key]).is_file():
            raise cfgmod.ConfigError(f"file {cfg[key]!r} not found", key)
    if args.model and not Path(args.model).is_file():
        raise cfgmod.ConfigError(f"file {args.model!r} not found", "model")
    return cfg


def output_dir(args) -> Path:
    base = args.out or os.environ.get("METAGRAPHLOC_OUT") or os.path.join("runs", args.command)
    return Path(base)


def execute(command: str, cfg: dict, out: Path, args) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfgmod.dump(cfg), encoding="utf-8")
    outputs = HANDLERS[command](cfg, out, args)
    manifest = {
        "command": command,
        "seed": cfg["seed"],
        "config": cfgmod.dump(cfg),
        "model": str(Path(args.model).resolve()) if getattr(args, "model", None) else None,
        "init": getattr(args, "init", None),
        "jobs": args.jobs,
        "versions": versions(),
        "outputs": sorted(p.name for p in outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return outputs


def replay(manifest_path, out=None) -> list[Path]:
    """Re-run a recorded command from its manifest into ``out``."""
    m = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if m.get("command") not in HANDLERS:
        raise cfgmod.ConfigError(f"manifest names unknown command {m.get('command')!r}", "command")
    cfg = cfgmod.load(None, cfgmod.parse_text(m["config"]))
    args = argparse.Namespace(command=m["command"], model=m.get("model"), init=m.get("init") or "meta", jobs=m.get("jobs", 1))
    target = Path(out) if out else Path(manifest_path).parent / "replay"
    return execute(m["command"], cfg, target, args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metagraphloc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the seed from the config file")
    common.add_argument("--out", help="output directory (default: $METAGRAPHLOC_OUT or runs/<command>)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweep and compare")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--model", help="model checkpoint (eval, meta-test)")
        if name == "meta-test":
            p.add_argument("--init", choices=("meta", "random"), default="meta", help="adapt from the meta-parameters or a random init")
    r = sub.add_parser("replay", help="re-run a command from its manifest.json")
    r.add_argument("manifest")
    r.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            outputs = replay(args.manifest, args.out)
        else:
            if args.jobs < 1:
                raise cfgmod.ConfigError("--jobs must be >= 1", "jobs")
            cfg = resolve_config(args)
            outputs = execute(args.command, cfg, output_dir(args), args)
    except (cfgmod.ConfigError, meta.TaskConfigError) as exc:
        print(f"metagraphloc: configuration error: {exc}", file=sys.stderr)
        return 2
    except (RunError, ValueError, RuntimeError, OSError, rs.DatasetFormatError) as exc:
        print(f"metagraphloc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for p in outputs:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
