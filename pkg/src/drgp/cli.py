"""Command-line interface: ``drgp {train, simulate, validate-stats, bench, make-toy}``.

Configuration comes from an optional JSON file (``--config``) with flag
overrides on top. Every run writes its resolved configuration and the
package version next to its outputs; files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .dataset_io import Normalization, load_csv, make_toy, manifest_entry, normalize, write_csv, write_manifest
from .recurrent_state import ModelConfig, load_model
from .trainer import TrainConfig

WORKERS_ENV = "DRGP_WORKERS"


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Fully resolved settings of one run."""

    subcommand: str
    data: str | None = None
    inputs: list = field(default_factory=lambda: ["x"])
    output: str = "y"
    name: str | None = None
    n_train: int | None = None
    n_test: int | None = None
    normalize: str = "sd"
    out: str = "drgp_out"
    seed: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": self.seed})

    def to_dict(self) -> dict:
        return {**asdict(self), "version": __version__}


def _atomic_write(path, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


_MODEL_FLAGS = {f.name for f in fields(ModelConfig)}
_TRAIN_FLAGS = {f.name for f in fields(TrainConfig)} - {"seed", "checkpoint_dir", "log_csv"}


def resolve_config(args) -> RunConfig:
    """Merge the JSON config file (if any) with command-line overrides."""
    base = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    base.pop("version", None)
    base["subcommand"] = args.command
    model = dict(base.get("model", {}))
    train = dict(base.get("train", {}))
    for key in ("data", "name", "n_train", "n_test", "normalize", "out", "seed", "output"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    if getattr(args, "inputs", None):
        base["inputs"] = args.inputs.split(",")
    H = getattr(args, "H", None)
    if H is not None:
        model["H_x"] = model["H_h"] = H
    for key in _MODEL_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            model[key] = v
    for key in _TRAIN_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            train[key] = v
    for key in ("freeze", "stage1_freeze"):
        if isinstance(train.get(key), str):
            train[key] = tuple(g for g in train[key].split(",") if g)
    base["model"], base["train"] = model, train
    unknown = set(base) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**base)
    try:
        cfg.model_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    if cfg.normalize not in ("sd", "var", "none"):
        raise UsageError("normalize must be 'sd', 'var' or 'none'")
    return cfg


def _load_dataset(cfg: RunConfig):
    if not cfg.data:
        raise UsageError("no dataset given (--data)")
    split = None
    if cfg.n_train is not None:
        split = (cfg.n_train, cfg.n_test if cfg.n_test is not None else 0)
    ds = load_csv(cfg.data, cfg.inputs, cfg.output, cfg.name, split)
    if cfg.n_train is not None and cfg.n_test is None:
        ds.split = (cfg.n_train, ds.N - cfg.n_train)
    return ds


def cmd_train(args) -> int:
    from .trainer import train, write_trace_csv

    cfg = resolve_config(args)
    if args.validate_only:
        print(json.dumps(cfg.to_dict(), indent=1))
        return 0
    ds, norm = normalize(_load_dataset(cfg), cfg.normalize)
    Xtr, ytr = ds.train
    log_buf = io.StringIO()
    handler = logging.StreamHandler(log_buf)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("drgp")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        result = train(ytr, Xtr, cfg.model_config(), cfg.train_config())
    finally:
        root.removeHandler(handler)
    model = result.model
    model.meta.update(
        {
            "normalization": norm.to_dict(),
            "dataset": {"name": ds.name, "split": list(ds.split), "columns": ds.columns},
            "run_config": cfg.to_dict(),
            "version": __version__,
            "best_restart": result.best_index,
        }
    )
    for rec in result.restarts:
        log_buf.write(f"restart {rec.index} seed {rec.seed}: {rec.status} {rec.initial_bound!r} -> {rec.final_bound!r} {rec.message}\n")
    os.makedirs(cfg.out, exist_ok=True)
    tmp_trace = os.path.join(cfg.out, ".trace.tmp")
    write_trace_csv(tmp_trace, result.trace)
    with open(tmp_trace) as fh:
        trace_text = fh.read()
    os.unlink(tmp_trace)
    _atomic_write(os.path.join(cfg.out, "model.json"), model.to_json())
    _atomic_write(os.path.join(cfg.out, "trace.csv"), trace_text)
    _atomic_write(os.path.join(cfg.out, "train.log"), log_buf.getvalue())
    _atomic_write(os.path.join(cfg.out, "config.json"), json.dumps(cfg.to_dict(), indent=1))
    print(f"best restart {result.best_index}: bound {result.restarts[result.best_index].final_bound:.6g}")
    return 0


def cmd_simulate(args) -> int:
    from .simulator import free_simulate, rmse

    if not os.path.exists(args.model):
        raise UsageError(f"model file not found: {args.model}")
    model = load_model(args.model)
    meta = model.meta
    run = meta.get("run_config", {})
    data = args.data or run.get("data")
    inputs = args.inputs.split(",") if args.inputs else run.get("inputs", ["x"])
    output = args.output or run.get("output", "y")
    ds = load_csv(data, inputs, output, args.name or run.get("name"))
    if ds.Q_x != model.Q_x:
        raise UsageError(f"input dimension mismatch: model Q_x={model.Q_x}, data Q_x={ds.Q_x}")
    n_train = args.n_train if args.n_train is not None else meta.get("dataset", {}).get("split", [ds.split[0]])[0]
    n_test = args.n_test if args.n_test is not None else ds.N - n_train
    if n_test <= 0:
        raise UsageError("dataset has no test rows after the training split")
    if n_train != model.N:
        raise UsageError(f"training length mismatch: model N={model.N}, data n_train={n_train}")
    norm = Normalization.from_dict(meta["normalization"]) if "normalization" in meta else Normalization.identity(ds.Q_x)
    X_te = norm.apply_x(ds.X[n_train : n_train + n_test])
    y_te = ds.y[n_train : n_train + n_test]
    trace = free_simulate(model, X_te, warm_start=args.warm_start)
    metrics = {
        "rmse_original": rmse(norm.invert_y(trace.y_mean), y_te),
        "rmse_normalized": rmse(trace.y_mean, norm.apply_y(y_te)),
        "normalization": norm.mode,
        "n_test": int(n_test),
        "warm_start": args.warm_start,
        "clamp_rate": trace.clamp_rate,
        "version": __version__,
    }
    os.makedirs(args.out, exist_ok=True)
    tmp = os.path.join(args.out, ".sim.tmp")
    trace.to_csv(tmp, y_true=y_te, denormalize=norm.invert_y_moments)
    with open(tmp) as fh:
        text = fh.read()
    os.unlink(tmp)
    _atomic_write(os.path.join(args.out, "simulation.csv"), text)
    _atomic_write(os.path.join(args.out, "metrics.json"), json.dumps(metrics, indent=1))
    _atomic_write(
        os.path.join(args.out, "config.json"),
        json.dumps({"subcommand": "simulate", **{k: v for k, v in vars(args).items() if k != "func"}, "version": __version__}, indent=1),
    )
    print(json.dumps(metrics))
    return 0


def cmd_validate_stats(args) -> int:
    from . import psi_statistics

    if args.instances < 1:
        raise UsageError("instances must be >= 1")
    report = psi_statistics.validation_battery(args.seed, args.instances, args.samples)
    report["version"] = __version__
    text = json.dumps(report, indent=1)
    if args.out:
        _atomic_write(args.out, text)
    print(json.dumps({"max_abs_z": report["max_abs_z"], "passed": report["passed"]}))
    return 0 if report["passed"] else 1


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_bench(args) -> int:
    from .parallel_bound import benchmark

    workers = _int_list(os.environ.get(WORKERS_ENV) or args.workers)
    rows = benchmark(workers, _int_list(args.n), M=args.M, seed=args.seed, repeats=args.repeats)
    text = _csv_text(
        ["workers", "n_hat", "shard_ms", "finish_ms"],
        [[r["workers"], r["n_hat"], f"{r['shard_ms']:.3f}", f"{r['finish_ms']:.3f}"] for r in rows],
    )
    if args.out:
        _atomic_write(args.out, text)
        _atomic_write(
            os.path.splitext(args.out)[0] + "_config.json",
            json.dumps({"subcommand": "bench", "workers": workers, "n": _int_list(args.n), "M": args.M, "seed": args.seed, "version": __version__}),
        )
    sys.stdout.write(text)
    return 0


def cmd_make_toy(args) -> int:
    ds = make_toy(args.kind, args.N, args.seed, args.noise)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    tmp = args.out + ".tmp"
    write_csv(ds, tmp)
    os.replace(tmp, args.out)
    manifest = os.path.splitext(args.out)[0] + "_manifest.json"
    entry = manifest_entry(ds, args.out)
    entry.update({"kind": args.kind, "seed": args.seed, "noise": args.noise, "version": __version__})
    write_manifest(manifest, [entry])
    print(json.dumps(entry))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drgp", description="Deep recurrent sparse-spectrum GP toolkit")
    p.add_argument("--version", action="version", version=f"drgp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write model.json, trace.csv, train.log")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--inputs", help="comma-separated input column names")
    t.add_argument("--output")
    t.add_argument("--name", help="benchmark name, enables canonical split and shape checks")
    t.add_argument("--n-train", dest="n_train", type=int)
    t.add_argument("--n-test", dest="n_test", type=int)
    t.add_argument("--normalize", choices=("sd", "var", "none"))
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--variant")
    t.add_argument("--L", type=int)
    t.add_argument("--M", type=int)
    t.add_argument("--H", type=int, help="sets both H_x and H_h")
    t.add_argument("--H-x", dest="H_x", type=int)
    t.add_argument("--H-h", dest="H_h", type=int)
    t.add_argument("--max-iters", dest="max_iters", type=int)
    t.add_argument("--restarts", type=int)
    t.add_argument("--stage1-iters", dest="stage1_iters", type=int)
    t.add_argument("--optimizer", choices=("quasi-newton", "adam"))
    t.add_argument("--freeze", help="comma-separated groups frozen throughout")
    t.add_argument("--validate-only", action="store_true", help="check and print the resolved config")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="free-simulate the test split of a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data")
    s.add_argument("--inputs")
    s.add_argument("--output")
    s.add_argument("--name")
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)
    s.add_argument("--warm-start", dest="warm_start", choices=("train_tail", "zeros"), default="train_tail")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate-stats", help="closed-form statistics against Monte Carlo")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--instances", type=int, default=20)
    v.add_argument("--samples", type=int, default=1_000_000)
    v.add_argument("--out")
    v.set_defaults(func=cmd_validate_stats)

    b = sub.add_parser("bench", help="time shard and finish phases of the sharded bound")
    b.add_argument("--workers", default="1,2")
    b.add_argument("--n", default="1000,10000")
    b.add_argument("--M", type=int, default=50)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("make-toy", help="write a synthetic dataset CSV and manifest")
    m.add_argument("--kind", required=True)
    m.add_argument("--N", type=int, default=200)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--noise", type=float)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"drgp {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"drgp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
