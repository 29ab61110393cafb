"""Command-line entry point: ``norin <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 run failure.
Any flag may also come from ``--config file.json|file.toml``; flags given on
the command line win over file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backbone import TrainConfig, TrainingError, save_checkpoint, train
from .harness import (
    ArtifactError,
    ExperimentConfig,
    atomic_write,
    compare,
    degeneration_run,
    grid_sweep,
    load_data,
    parse_range,
    report,
    sensitivity_sweep,
    significance,
    write_json,
    write_jsonl,
)
from .normalizers import ShapeParams
from .search import SearchError, SearchSpace, TpeConfig, search, write_history
from .series import DataError, SplitSpec
from .shape_fit import warm_start

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUN = 0, 1, 2, 3

DEFAULTS = {
    "data": "synth:benchmark",
    "timestamp_column": "date",
    "split": "0.7,0.1,0.2",
    "horizon": 24,
    "lookback": 96,
    "epochs": TrainConfig.epochs,
    "batch_size": TrainConfig.batch_size,
    "lr": TrainConfig.lr,
    "weight_decay": TrainConfig.weight_decay,
    "patience": TrainConfig.early_stop_patience,
    "hidden": 0,
    "revin_affine": False,
    "z": 0.524,
    "mode": "shared",
    "trials": 60,
    "n_startup": 10,
    "tpe_seed": 0,
    "hpo_seed": 42,
    "trial_seeds": 1,
    "seed": 42,
    "seeds": "1,2,3",
    "normalizer": "norin",
    "normalizers": "none,revin,norin",
    "shape_source": "warm-start",
    "shape_lr": 1e-2,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data and training")
    g.add_argument("--config", help="JSON or TOML file with default values for any flag")
    g.add_argument("--data", help="CSV path, 'synth:benchmark' or 'synth:key=value,...'")
    g.add_argument("--timestamp-column", dest="timestamp_column")
    g.add_argument("--split", help="train,val,test fractions (default 0.7,0.1,0.2)")
    g.add_argument("--horizon", "-H", type=int)
    g.add_argument("--lookback", "-T", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--patience", type=int, help="early-stopping patience; <= 0 disables")
    g.add_argument("--hidden", type=int, help="hidden units (0 = linear backbone)")
    g.add_argument("--revin-affine", dest="revin_affine", action="store_const", const=True)


def _shape_flags(p, with_range=False):
    if with_range:
        p.add_argument("--delta", help="delta range lo:hi")
        p.add_argument("--epsilon", help="epsilon range lo:hi")
    else:
        p.add_argument("--shape", help="shape JSON file")
        p.add_argument("--delta", type=float)
        p.add_argument("--epsilon", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="norin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit-shape", help="closed-form warm-start shape")
    _common(p)
    p.add_argument("--z", type=float)
    p.add_argument("--mode", choices=["shared", "per-channel"])
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="also write the per-channel fit report JSON here")

    p = sub.add_parser("search", help="warm start + TPE over validation MSE")
    _common(p)
    _shape_flags(p, with_range=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--n-startup", dest="n_startup", type=int)
    p.add_argument("--tpe-seed", dest="tpe_seed", type=int)
    p.add_argument("--hpo-seed", dest="hpo_seed", type=int)
    p.add_argument("--trial-seeds", dest="trial_seeds", type=int, help="average each trial over this many seeds")
    p.add_argument("--z", type=float)
    p.add_argument("--mode", choices=["shared", "per-channel"])
    p.add_argument("--out", required=True)
    p.add_argument("--history")

    p = sub.add_parser("train", help="one training run")
    _common(p)
    _shape_flags(p)
    p.add_argument("--normalizer", choices=["none", "revin", "norin"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")

    p = sub.add_parser("compare", help="normalizer comparison over seeds")
    _common(p)
    p.add_argument("--normalizers")
    p.add_argument("--seeds")
    p.add_argument("--horizons", help="comma-separated horizons (default: --horizon)")
    p.add_argument("--shape-source", dest="shape_source", choices=["warm-start", "search", "explicit"])
    p.add_argument("--delta", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--hpo-seed", dest="hpo_seed", type=int)
    p.add_argument("--trial-seeds", dest="trial_seeds", type=int, help="average each trial over this many seeds")
    p.add_argument("--out", required=True)

    p = sub.add_parser("grid", help="delta x epsilon grid of test MSE")
    _common(p)
    p.add_argument("--delta", required=False, help="lo:hi:step")
    p.add_argument("--epsilon", required=False, help="lo:hi:step")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("degenerate", help="joint shape training (degeneration experiment)")
    _common(p)
    _shape_flags(p)
    p.add_argument("--shape-lr", dest="shape_lr", type=float)
    p.add_argument("--seeds")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="one-at-a-time sensitivity sweep")
    _common(p)
    _shape_flags(p)
    p.add_argument("--axis", choices=["lr", "batch", "epochs", "T", "seed"], required=False)
    p.add_argument("--values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render artifacts as CSV and text tables")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_config_file(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        doc = tomllib.loads(text)
    else:
        doc = json.loads(text)
    return {k.replace("-", "_"): v for k, v in doc.items()}


def _resolve(args) -> dict:
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        opts.update(_load_config_file(args.config))
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _split(opts) -> SplitSpec:
    parts = opts["split"]
    if isinstance(parts, str):
        parts = [float(p) for p in parts.split(",")]
    try:
        return SplitSpec(*parts)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad --split: {exc}") from exc


def _ints(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _train_config(opts, seed=None) -> TrainConfig:
    return TrainConfig(
        epochs=int(opts["epochs"]),
        batch_size=int(opts["batch_size"]),
        lr=float(opts["lr"]),
        weight_decay=float(opts["weight_decay"]),
        early_stop_patience=int(opts["patience"]),
        lookback=int(opts["lookback"]),
        horizon=int(opts["horizon"]),
        hidden=int(opts["hidden"]),
        revin_affine=bool(opts["revin_affine"]),
        seed=int(opts["seed"] if seed is None else seed),
        shape_lr=float(opts["shape_lr"]),
    )


def _tpe_config(opts) -> TpeConfig:
    trials = int(opts["trials"])
    n_startup = min(int(opts["n_startup"]), max(trials - 1, 1))
    return TpeConfig(n_trials=trials, n_startup=n_startup, seed=int(opts["tpe_seed"]))


def _space(opts, n_channels) -> SearchSpace:
    d = parse_range(opts["delta"]) if isinstance(opts.get("delta"), str) else [0.8, 5.0]
    e = parse_range(opts["epsilon"]) if isinstance(opts.get("epsilon"), str) else [-1.0, 1.0]
    return SearchSpace(d[0], d[-1], e[0], e[-1], n_channels, opts["mode"] == "shared")


def _experiment(opts, series_name=None) -> ExperimentConfig:
    horizons = _ints(opts["horizons"]) if opts.get("horizons") else (int(opts["horizon"]),)
    return ExperimentConfig(
        data=opts["data"],
        horizons=horizons,
        lookback=int(opts["lookback"]),
        normalizers=tuple(s.strip() for s in str(opts["normalizers"]).split(",") if s.strip()),
        shape_source=opts["shape_source"],
        delta=opts.get("delta") if isinstance(opts.get("delta"), float) else None,
        epsilon=opts.get("epsilon") if isinstance(opts.get("epsilon"), float) else None,
        shape_mode=opts["mode"],
        z=float(opts["z"]),
        seeds=_ints(opts["seeds"]),
        train=_train_config(opts),
        tpe=_tpe_config(opts),
        hpo_seed=int(opts["hpo_seed"]),
        trial_seeds=int(opts["trial_seeds"]),
        split=_split(opts),
    )


def _explicit_shape(opts, series):
    if opts.get("shape"):
        path = Path(opts["shape"])
        if not path.is_file():
            raise DataError(f"shape file not found: {path}")
        shape = ShapeParams.from_json(path.read_text())
        if shape.n_channels != series.n_channels:
            raise DataError(f"shape file has {shape.n_channels} channels, data has {series.n_channels}")
        return shape
    if opts.get("delta") is not None and opts.get("epsilon") is not None:
        return ShapeParams.uniform(float(opts["delta"]), float(opts["epsilon"]), series.n_channels)
    return None


def _sibling(out, name) -> Path:
    return Path(out).parent / name


def _cmd_fit_shape(opts):
    series = load_data(opts["data"], opts["timestamp_column"])
    ws = warm_start(series, _split(opts), opts["mode"], float(opts["z"]))
    atomic_write(opts["out"], ws.shape.to_json(series.channel_names) + "\n")
    if opts.get("report"):
        atomic_write(opts["report"], ws.report_json() + "\n")
    print(json.dumps(ws.shape.to_dict(series.channel_names)))


def _cmd_search(opts):
    series = load_data(opts["data"], opts["timestamp_column"])
    space = _space(opts, series.n_channels)
    result = search(
        series,
        _split(opts),
        _train_config(opts, seed=opts["hpo_seed"]),
        _tpe_config(opts),
        space,
        hpo_seed=int(opts["hpo_seed"]),
        z=float(opts["z"]),
        trial_seeds=int(opts["trial_seeds"]),
    )
    atomic_write(opts["out"], result.best_json(series.channel_names) + "\n")
    write_history(opts.get("history") or _sibling(opts["out"], "trials.jsonl"), result.history)
    print(f"best trial {result.best_trial.index}: val MSE {result.best_trial.objective:.6f}")


def _cmd_train(opts):
    series = load_data(opts["data"], opts["timestamp_column"])
    shape = _explicit_shape(opts, series)
    if opts["normalizer"] == "norin" and shape is None:
        shape = warm_start(series, _split(opts), opts["mode"], float(opts["z"])).shape
    run = train(series, _split(opts), opts["normalizer"], shape, _train_config(opts))
    atomic_write(opts["out"], run.to_json() + "\n")
    if opts.get("checkpoint"):
        save_checkpoint(opts["checkpoint"], run.model, run.seed, run.fingerprint)
    print(f"test MSE {run.metrics['test']['mse']:.6f}")


def _cmd_compare(opts):
    cfg = _experiment(opts)
    series = load_data(cfg.data, opts["timestamp_column"])
    table = compare(cfg, series)
    atomic_write(opts["out"], table.to_csv())
    write_json(_sibling(opts["out"], "comparison.json"), table.to_dict())
    if "norin" in table.columns and len(table.columns) > 1:
        write_json(_sibling(opts["out"], "significance.json"), significance(table, "norin"))
    sys.stdout.write(table.to_csv())


def _cmd_grid(opts):
    cfg = _experiment(opts)
    deltas = parse_range(opts.get("delta") or "3.0:5.0:0.2")
    epsilons = parse_range(opts.get("epsilon") or "-1.0:0.0:0.1")
    series = load_data(cfg.data, opts["timestamp_column"])
    grid = grid_sweep(cfg, deltas, epsilons, seed=int(opts["seed"]), series=series)
    atomic_write(opts["out"], grid.to_csv())
    write_json(_sibling(opts["out"], "grid.json"), grid.to_dict())
    a = grid.to_dict()["argmin"]
    print(f"argmin delta={a['delta']} epsilon={a['epsilon']} test MSE {a['mse']:.6f}")


def _cmd_degenerate(opts):
    cfg = _experiment(opts)
    series = load_data(cfg.data, opts["timestamp_column"])
    shape = _explicit_shape(opts, series)
    if shape is None:
        shape = warm_start(series, cfg.split, opts["mode"], cfg.z).shape
    runs = degeneration_run(cfg, shape, float(opts["shape_lr"]), series=series)
    records = [
        {"seed": run.seed, "fingerprint": run.fingerprint, "summary": summary, "trajectory": run.shape_trajectory}
        for run, summary in runs
    ]
    write_jsonl(opts["out"], records)
    if Path(opts["out"]).name != "degeneration.jsonl":
        write_jsonl(_sibling(opts["out"], "degeneration.jsonl"), records)
    up = sum(1 for _, s in runs if s["drift"] > 0)
    print(f"delta increased in {up}/{len(runs)} seeds")


def _cmd_sweep(opts):
    if not opts.get("axis") or not opts.get("values"):
        raise UsageError("sweep needs --axis and --values")
    cfg = _experiment(opts)
    series = load_data(cfg.data, opts["timestamp_column"])
    values = [v for v in str(opts["values"]).split(",") if v.strip()]
    shape = _explicit_shape(opts, series)
    result = sensitivity_sweep(
        cfg, opts["axis"], values, shape=shape, normalizer=opts["normalizer"], seed=int(opts["seed"]), series=series
    )
    atomic_write(opts["out"], result.to_csv())
    write_json(_sibling(opts["out"], "sweep.json"), result.to_dict())
    sys.stdout.write(result.to_csv())


def _cmd_report(opts):
    for path in report(opts["dir"], opts["out"]):
        print(path)


COMMANDS = {
    "fit-shape": _cmd_fit_shape,
    "search": _cmd_search,
    "train": _cmd_train,
    "compare": _cmd_compare,
    "grid": _cmd_grid,
    "degenerate": _cmd_degenerate,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a rejected flag
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        opts = _resolve(args)
        COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"norin: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArtifactError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"norin: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, SearchError) as exc:
        print(f"norin: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except ValueError as exc:
        print(f"norin: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
