"""Command-line front end.

Subcommands: ``run``, ``ablate``, ``calibrate`` and ``partition``. Settings
resolve in order: built-in defaults, ``--config`` JSON file (flat keys named
like the flags with dashes turned into underscores), ``LIVAR_SEED`` (seed
only, when neither file nor flag sets it), then explicit flags.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .calibration import (
    DegenerateCalibrationError,
    ProxyConfig,
    fit_table,
    run_proxy,
    validate_trend,
    write_report,
    write_trend,
)
from .data import class_histogram
from .errors import ConfigError, ConvergenceError, NumericalError, PartitionError
from .experiment import ExperimentConfig, ablate, build_federation, run_experiment
from .fed import STRATEGIES, RoundMetrics, default_table, save_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# config field -> (flag, type)
FLAGS = {
    "num_clients": ("--clients", int),
    "beta": ("--beta", float),
    "rounds": ("--rounds", int),
    "local_epochs": ("--local-epochs", int),
    "lr": ("--lr", float),
    "batch_size": ("--batch-size", int),
    "seed": ("--seed", int),
    "strategy": ("--strategy", str),
    "num_layers": ("--layers", int),
    "width": ("--width", int),
    "rank": ("--rank", int),
    "num_classes": ("--classes", int),
    "input_dim": ("--input-dim", int),
    "per_class": ("--per-class", int),
    "test_per_class": ("--test-per-class", int),
    "spread": ("--spread", float),
    "table": ("--table", str),
}


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="JSON file of flat configuration keys")
    p.add_argument("--out-dir", default="out", help="directory for artifacts (default: out)")
    for name, (flag, typ) in FLAGS.items():
        if name in skip:
            continue
        kw = {"choices": STRATEGIES} if name == "strategy" else {}
        p.add_argument(flag, dest=name, type=typ, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="livar", description="Federated LoRA merging simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a federated experiment")
    _add_config_flags(p)
    p.add_argument("--parallel-clients", action="store_true")
    p.add_argument("--dump-alphas", action="store_true",
                   help="add one alpha_m{m}_l{l} column per client/layer to the metrics CSV")

    p = sub.add_parser("ablate", help="alpha x sigma component ablation over seeds")
    _add_config_flags(p, skip=("strategy",))
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--parallel-clients", action="store_true")

    p = sub.add_parser("calibrate", help="fit a coefficient table on a proxy federation")
    _add_config_flags(p, skip=("strategy", "rounds", "test_per_class", "table"))
    p.add_argument("--force", action="store_true", help="overwrite an existing table")
    p.add_argument("--a-thresholds", default="25,50")
    p.add_argument("--b-thresholds", default="60,80")

    p = sub.add_parser("partition", help="dump per-client class histograms")
    _add_config_flags(p, skip=("strategy", "table"))
    return parser


def resolve(args: argparse.Namespace, cls=ExperimentConfig):
    """Merge defaults, config file, LIVAR_SEED and flags into ``cls``."""
    values: dict = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {args.config}: {exc}") from exc
    if "seed" not in values and getattr(args, "seed", None) is None and "LIVAR_SEED" in os.environ:
        try:
            values["seed"] = int(os.environ["LIVAR_SEED"])
        except ValueError as exc:
            raise ConfigError("seed", "LIVAR_SEED must be an integer") from exc
    for name in FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(unknown[0], "not a setting of this command")
    for name, v in values.items():
        if name in FLAGS and v is not None:
            values[name] = _coerce(name, v)
    return cls(**values)


def _coerce(name: str, v):
    typ = FLAGS[name][1]
    if typ is int and isinstance(v, float) and not v.is_integer():
        raise ConfigError(name, f"expected an integer, got {v!r}")
    if isinstance(v, bool) or (typ is not str and isinstance(v, str)):
        raise ConfigError(name, f"expected {typ.__name__}, got {v!r}")
    try:
        return typ(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"expected {typ.__name__}, got {v!r}") from exc


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_row(m: RoundMetrics, dump_alphas: bool) -> list[str]:
    row = [str(m.round), m.strategy, _fmt(m.test_accuracy), _fmt(m.mean_client_loss)]
    if dump_alphas:
        row += [_fmt(v) for v in np.asarray(m.alphas).ravel()]
    return row


def metrics_header(num_clients: int, num_layers: int, dump_alphas: bool) -> list[str]:
    head = ["round", "strategy", "test_accuracy", "mean_client_loss"]
    if dump_alphas:
        head += [f"alpha_m{m}_l{l + 1}" for m in range(num_clients) for l in range(num_layers)]
    return head


def cmd_run(args) -> int:
    cfg = resolve(args).validate()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, history = run_experiment(cfg, parallel=args.parallel_clients)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(cfg.num_clients, cfg.num_layers, args.dump_alphas))
        for m in history:
            w.writerow(metrics_row(m, args.dump_alphas))
    summary = {
        "final_accuracy": history[-1].test_accuracy,
        "per_round_accuracies": [m.test_accuracy for m in history],
        "config": cfg.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{cfg.strategy}: final accuracy {history[-1].test_accuracy:.4f} "
          f"after {cfg.rounds} rounds -> {out}")
    return EXIT_OK


def _parse_ints(text: str, field: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(field, f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise ConfigError(field, "must not be empty")
    return vals


def cmd_ablate(args) -> int:
    cfg = resolve(args).validate()
    seeds = _parse_ints(args.seeds, "seeds")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablate(cfg, seeds, parallel=args.parallel_clients)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "sigma", "mean_acc", "std_acc"])
        for r in rows:
            w.writerow([int(r.alpha), int(r.sigma), _fmt(r.mean), _fmt(r.std)])
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "sigma", "strategy", "seed", "accuracy"])
        for r in rows:
            for s, acc in zip(seeds, r.accuracies):
                w.writerow([int(r.alpha), int(r.sigma), r.strategy, s, _fmt(acc)])
    for r in rows:
        print(f"alpha={'on ' if r.alpha else 'off'} sigma={'on ' if r.sigma else 'off'} "
              f"{r.mean:.4f} ({r.std:.4f})")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = resolve(args, ProxyConfig)
    a_th = tuple(float(v) for v in args.a_thresholds.split(","))
    b_th = tuple(float(v) for v in args.b_thresholds.split(","))
    out = Path(args.out_dir)
    table_path = out / "gshap_table.json"
    if table_path.exists() and not args.force:
        raise ConfigError("out_dir", f"{table_path} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    run = run_proxy(cfg)
    try:
        table = fit_table(run, a_th, b_th)
    except ValueError as exc:
        if isinstance(exc, DegenerateCalibrationError):
            raise
        raise ConfigError("thresholds", str(exc)) from exc
    save_table(table_path, table)
    write_report(out / "calibration_report.csv", run)
    reports = {"fitted": validate_trend(table), "default": validate_trend(default_table())}
    write_trend(out / "calibration_trend.csv", reports)
    for name, rep in reports.items():
        print(f"{name} table: b-trend {'pass' if rep.b_trend else 'FAIL'}, "
              f"a-trend {'pass' if rep.a_trend else 'FAIL'}")
    print(f"table -> {table_path}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = resolve(args).validate()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fed = build_federation(cfg)
    hist = class_histogram(fed.partition, fed.train.labels, cfg.num_classes)
    with open(out / "partition.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client"] + [f"class_{c}" for c in range(cfg.num_classes)])
        for m, row in enumerate(hist):
            w.writerow([m] + [int(v) for v in row])
    print(f"partition of {len(fed.train)} samples over {cfg.num_clients} clients -> "
          f"{out / 'partition.csv'}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "calibrate": cmd_calibrate,
            "partition": cmd_partition}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PartitionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, ConvergenceError, DegenerateCalibrationError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
