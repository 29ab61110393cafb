"""Experiment orchestration: normalizer comparisons, significance, grids, sweeps, degeneration runs, reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import RunResult, TrainConfig, TrainingError, train
from .normalizers import ShapeParams
from .search import HPO_SEED, SearchSpace, TpeConfig, search
from .series import DataError, GeneratorParams, MultiSeries, SplitSpec, ingest_csv, synth_heavy_tailed
from .shape_fit import DEFAULT_Z, warm_start
from .significance import wilcoxon_signed_rank

__all__ = [
    "BENCHMARK",
    "ArtifactError",
    "ExperimentConfig",
    "Cell",
    "ComparisonTable",
    "GridResult",
    "SweepResult",
    "benchmark_series",
    "load_data",
    "parse_range",
    "resolve_shape",
    "compare",
    "significance",
    "grid_sweep",
    "degeneration_run",
    "sensitivity_sweep",
    "degeneration_summary",
    "report",
    "atomic_write",
    "write_json",
    "write_jsonl",
]

# Desk-scale heavy-tailed benchmark: 3 channels of S_U(1, eps) noise on a
# slow trend plus daily-period seasonality.
BENCHMARK = {
    "seed": 0,
    "L": 8000,
    "C": 3,
    "params": GeneratorParams(
        delta=1.0, epsilon=(0.0, 0.5, -0.5), loc=0.0, scale=1.0, trend=1.0, season_amplitude=1.0, season_period=24.0
    ),
}

ARTIFACTS = {
    "comparison.json": "normalizer comparison table",
    "significance.json": "Wilcoxon significance report",
    "grid.json": "delta x epsilon grid sweep",
    "sweep.json": "sensitivity sweep",
    "trials.jsonl": "search trial history",
    "degeneration.jsonl": "joint-training shape trajectories",
}


class ArtifactError(RuntimeError):
    pass


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# data sources
# --------------------------------------------------------------------------


def benchmark_series() -> MultiSeries:
    return synth_heavy_tailed(BENCHMARK["seed"], BENCHMARK["L"], BENCHMARK["C"], BENCHMARK["params"])


def _parse_number_list(text):
    parts = [float(p) for p in text.split("|")]
    return parts[0] if len(parts) == 1 else tuple(parts)


def load_data(source: str, timestamp_column: str = "date") -> MultiSeries:
    """``synth:benchmark``, ``synth:key=value,...`` or a CSV path.

    Synthetic keys: seed, L, C and any :class:`GeneratorParams` field; per-channel
    values are separated by ``|`` (e.g. ``epsilon=0|0.5|-0.5``).
    """
    if not source.startswith("synth:"):
        return ingest_csv(source, timestamp_column)
    body = source[len("synth:") :]
    if body in ("", "benchmark"):
        return benchmark_series()
    seed, L, C = BENCHMARK["seed"], BENCHMARK["L"], BENCHMARK["C"]
    kwargs = {}
    fields = set(GeneratorParams.__dataclass_fields__)
    for item in body.split(","):
        if "=" not in item:
            raise DataError(f"bad synthetic spec item {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        try:
            if key == "seed":
                seed = int(value)
            elif key == "L":
                L = int(value)
            elif key == "C":
                C = int(value)
            elif key in fields:
                kwargs[key] = _parse_number_list(value)
            else:
                raise DataError(f"unknown synthetic key {key!r}")
        except ValueError as exc:
            raise DataError(f"bad value for {key!r}: {value!r}") from exc
    try:
        return synth_heavy_tailed(seed, L, C, GeneratorParams(**kwargs))
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def parse_range(spec: str):
    """Inclusive ``lo:hi:step`` range (``lo:hi`` gives the two endpoints)."""
    parts = [float(p) for p in spec.split(":")]
    if len(parts) == 2:
        return [parts[0], parts[1]]
    if len(parts) != 3:
        raise ValueError(f"range must be lo:hi[:step], got {spec!r}")
    lo, hi, step = parts
    if step <= 0 or hi < lo:
        raise ValueError(f"invalid range {spec!r}: need step > 0 and hi >= lo")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = "synth:benchmark"
    dataset_name: Optional[str] = None
    horizons: tuple = (24,)
    lookback: int = 96
    normalizers: tuple = ("none", "revin", "norin")
    shape_source: str = "warm-start"  # warm-start | search | explicit
    delta: Optional[float] = None
    epsilon: Optional[float] = None
    shape_mode: str = "shared"
    z: float = DEFAULT_Z
    seeds: tuple = (1, 2, 3)
    train: TrainConfig = TrainConfig()
    tpe: TpeConfig = TpeConfig()
    space: SearchSpace = SearchSpace()
    hpo_seed: int = HPO_SEED
    trial_seeds: int = 1
    split: SplitSpec = SplitSpec()
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not self.normalizers:
            raise ValueError("need at least one normalizer")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if not self.horizons:
            raise ValueError("need at least one horizon")
        if self.shape_source not in ("warm-start", "search", "explicit"):
            raise ValueError(f"unknown shape source {self.shape_source!r}")
        if self.shape_source == "explicit" and (self.delta is None or self.epsilon is None):
            raise ValueError("explicit shape source needs delta and epsilon")

    @property
    def name(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        if self.data.startswith("synth:"):
            return self.data
        return Path(self.data).stem

    def train_config(self, H: int, seed: int) -> TrainConfig:
        return replace(self.train, lookback=self.lookback, horizon=H, seed=seed)


def resolve_shape(config: ExperimentConfig, series: MultiSeries, H: int):
    """Frozen NoRIN shape for one horizon, plus a small provenance dict."""
    space = replace(config.space, n_channels=series.n_channels, shared=config.shape_mode == "shared")
    if config.shape_source == "explicit":
        return ShapeParams.uniform(config.delta, config.epsilon, series.n_channels), {"source": "explicit"}
    ws = warm_start(
        series,
        config.split,
        config.shape_mode,
        config.z,
        (space.delta_lo, space.delta_hi),
        (space.eps_lo, space.eps_hi),
    )
    if config.shape_source == "warm-start":
        return ws.shape, {"source": "warm-start", "fit": ws.report()}
    result = search(
        series,
        config.split,
        config.train_config(H, config.hpo_seed),
        config.tpe,
        space,
        ws.shape,
        config.hpo_seed,
        trial_seeds=config.trial_seeds,
    )
    info = {
        "source": "search",
        "warm_start": ws.shape.to_dict(series.channel_names),
        "best_trial": result.best_trial.index,
        "best_objective": result.best_trial.objective,
        "boundary_contact": result.boundary,
    }
    return result.best, info


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------


@dataclass
class Cell:
    test_mse: list  # per seed, None for failed runs
    val_mse: list

    @property
    def ok(self):
        return [v for v in self.test_mse if v is not None]

    @property
    def failed(self) -> bool:
        return not self.ok

    @property
    def mean(self) -> float:
        return float(np.mean(self.ok)) if self.ok else float("nan")

    @property
    def std(self) -> Optional[float]:
        """Sample standard deviation (ddof=1); ``None`` with fewer than 2 runs."""
        return float(np.std(self.ok, ddof=1)) if len(self.ok) >= 2 else None

    @property
    def val_mean(self) -> float:
        ok = [v for v in self.val_mse if v is not None]
        return float(np.mean(ok)) if ok else float("nan")


@dataclass
class ComparisonTable:
    columns: list
    rows: list  # [{"dataset", "H", "cells": [Cell, ...]}]
    shapes: dict = field(default_factory=dict)  # "dataset/H" -> shape info

    def winner(self, row) -> Optional[int]:
        """Column index with the lowest mean; ties go to the earlier column."""
        best, idx = math.inf, None
        for j, cell in enumerate(row["cells"]):
            if not cell.failed and cell.mean < best:
                best, idx = cell.mean, j
        return idx

    def to_dict(self) -> dict:
        rows = []
        for row in self.rows:
            cells = []
            for cell in row["cells"]:
                cells.append(
                    {
                        "test_mse": cell.test_mse,
                        "val_mse": cell.val_mse,
                        "mean": None if cell.failed else cell.mean,
                        "std": cell.std,
                        "val_mean": None if cell.failed else cell.val_mean,
                        "failed": cell.failed,
                    }
                )
            rows.append({"dataset": row["dataset"], "H": row["H"], "cells": cells, "winner": self.winner(row)})
        return {"columns": list(self.columns), "rows": rows, "shapes": self.shapes, "tie_rule": "column order"}

    @classmethod
    def from_dict(cls, doc: dict) -> "ComparisonTable":
        rows = [
            {
                "dataset": r["dataset"],
                "H": r["H"],
                "cells": [Cell(c["test_mse"], c["val_mse"]) for c in r["cells"]],
            }
            for r in doc["rows"]
        ]
        return cls(list(doc["columns"]), rows, doc.get("shapes", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["dataset", "H"]
        for c in self.columns:
            header += [f"{c}_mean", f"{c}_std"]
        w.writerow(header + ["winner"])
        for row in self.rows:
            line = [row["dataset"], row["H"]]
            for cell in row["cells"]:
                line += [_fmt(None if cell.failed else cell.mean), _fmt(cell.std)]
            win = self.winner(row)
            w.writerow(line + ["" if win is None else self.columns[win]])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))


def compare(config: ExperimentConfig, series: Optional[MultiSeries] = None) -> ComparisonTable:
    """Train every listed normalizer once per seed and tabulate test MSE per horizon."""
    series = load_data(config.data) if series is None else series
    table = ComparisonTable(list(config.normalizers), [])
    for H in config.horizons:
        shape, info = None, None
        if "norin" in config.normalizers:
            shape, info = resolve_shape(config, series, H)
            table.shapes[f"{config.name}/{H}"] = dict(info, shape=shape.to_dict(series.channel_names))
        cells = []
        for kind in config.normalizers:
            tests, vals = [], []
            for seed in config.seeds:
                try:
                    run = train(series, config.split, kind, shape, config.train_config(H, seed))
                except TrainingError:
                    tests.append(None)
                    vals.append(None)
                    continue
                tests.append(run.metrics["test"]["mse"])
                vals.append(run.metrics["val"]["mse"])
            cells.append(Cell(tests, vals))
        table.rows.append({"dataset": config.name, "H": H, "cells": cells})
    return table


def significance(table: ComparisonTable, reference: str = "norin") -> dict:
    """Wilcoxon test of each other column's row means against the reference column's.

    Differences are baseline minus reference, so positive mean differences and
    ``wins`` favour the reference.
    """
    if reference not in table.columns:
        raise ValueError(f"reference column {reference!r} not in table")
    ref = table.columns.index(reference)
    out = {}
    for j, name in enumerate(table.columns):
        if j == ref or name in out:
            continue
        pairs = [
            (row["cells"][j].mean, row["cells"][ref].mean)
            for row in table.rows
            if not row["cells"][j].failed and not row["cells"][ref].failed
        ]
        if not pairs:
            continue
        base, mine = zip(*pairs)
        res = wilcoxon_signed_rank(base, mine)
        out[name] = {
            "wins": res.wins,
            "n_pairs": len(pairs),
            "mean_delta": res.mean_diff,
            "W": res.statistic,
            "p": res.p_value,
            "method": res.method,
        }
    return out


# --------------------------------------------------------------------------
# grid, degeneration, sensitivity
# --------------------------------------------------------------------------


@dataclass
class GridResult:
    deltas: list
    epsilons: list
    mse: list  # rows follow deltas, columns follow epsilons
    seed: int

    @property
    def argmin(self):
        arr = np.asarray(self.mse, dtype=np.float64)
        i, j = np.unravel_index(int(np.nanargmin(arr)), arr.shape)
        return int(i), int(j)

    def to_dict(self) -> dict:
        i, j = self.argmin
        return {
            "deltas": self.deltas,
            "epsilons": self.epsilons,
            "mse": self.mse,
            "seed": self.seed,
            "argmin": {"delta": self.deltas[i], "epsilon": self.epsilons[j], "mse": self.mse[i][j]},
        }

    @classmethod
    def from_dict(cls, doc) -> "GridResult":
        return cls(doc["deltas"], doc["epsilons"], doc["mse"], doc["seed"])

    def to_csv(self) -> str:
        """delta rows x epsilon columns; the argmin cell carries a trailing ``*``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["delta\\epsilon"] + [f"{e:.1f}" if round(e, 1) == e else repr(e) for e in self.epsilons])
        ai, aj = self.argmin
        for i, d in enumerate(self.deltas):
            line = [f"{d:.1f}" if round(d, 1) == d else repr(d)]
            for j in range(len(self.epsilons)):
                v = self.mse[i][j]
                s = "" if v is None else f"{v:.6f}"
                line.append(s + "*" if (i, j) == (ai, aj) else s)
            w.writerow(line)
        return buf.getvalue()


def grid_sweep(
    config: ExperimentConfig,
    deltas: Sequence[float],
    epsilons: Sequence[float],
    seed: int = HPO_SEED,
    H: Optional[int] = None,
    series: Optional[MultiSeries] = None,
) -> GridResult:
    """One NoRIN run per (delta, epsilon) point at a fixed seed; cells hold test MSE."""
    if not deltas or not epsilons:
        raise ValueError("grid ranges must be non-empty")
    if min(deltas) <= 0:
        raise ValueError("grid deltas must be positive")
    series = load_data(config.data) if series is None else series
    H = config.horizons[0] if H is None else H
    cfg = config.train_config(H, seed)
    mse = []
    for d in deltas:
        row = []
        for e in epsilons:
            shape = ShapeParams.uniform(d, e, series.n_channels)
            try:
                row.append(train(series, config.split, "norin", shape, cfg).metrics["test"]["mse"])
            except TrainingError:
                row.append(None)
        mse.append(row)
    return GridResult(list(map(float, deltas)), list(map(float, epsilons)), mse, seed)


def degeneration_summary(run: RunResult) -> dict:
    init = run.initial_shape["delta"]
    traj = [step["delta"] for step in run.shape_trajectory]
    final = traj[-1] if traj else init
    first_up = None
    prev = init
    for k, cur in enumerate(traj, start=1):
        if np.mean(cur) > np.mean(prev):
            first_up = k
            break
        prev = cur
    drift = float(np.mean(final) - np.mean(init))
    return {
        "seed": run.seed,
        "initial_delta": init,
        "final_delta": final,
        "drift": drift,
        "drift_sign": int(np.sign(drift)),
        "epochs_to_first_increase": first_up,
    }


def degeneration_run(
    config: ExperimentConfig,
    shape: ShapeParams,
    shape_lr: float,
    seeds: Optional[Sequence[int]] = None,
    H: Optional[int] = None,
    series: Optional[MultiSeries] = None,
):
    """Joint (delta, epsilon) training per seed; returns ``[(RunResult, summary), ...]``."""
    series = load_data(config.data) if series is None else series
    H = config.horizons[0] if H is None else H
    out = []
    for seed in config.seeds if seeds is None else seeds:
        cfg = replace(config.train_config(H, seed), joint_shape_training=True, shape_lr=shape_lr)
        run = train(series, config.split, "norin", shape, cfg)
        out.append((run, degeneration_summary(run)))
    return out


SWEEP_AXES = {"lr": "lr", "batch": "batch_size", "epochs": "epochs", "T": "lookback", "seed": "seed"}


@dataclass
class SweepResult:
    axis: str
    values: list
    test_mse: list
    summary: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"axis": self.axis, "values": self.values, "test_mse": self.test_mse, "summary": self.summary}

    @classmethod
    def from_dict(cls, doc) -> "SweepResult":
        return cls(doc["axis"], doc["values"], doc["test_mse"], doc.get("summary"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, "test_mse"])
        for v, m in zip(self.values, self.test_mse):
            w.writerow([v, _fmt(m)])
        if self.summary:
            for key in ("mean", "std", "cv"):
                w.writerow([key, _fmt(self.summary[key])])
        return buf.getvalue()


def sensitivity_sweep(
    config: ExperimentConfig,
    axis: str,
    values: Sequence,
    shape: Optional[ShapeParams] = None,
    normalizer: str = "norin",
    seed: int = HPO_SEED,
    H: Optional[int] = None,
    series: Optional[MultiSeries] = None,
) -> SweepResult:
    """Vary one training setting with the shape frozen.

    For the seed axis the summary reports mean, sample std and their ratio
    (coefficient of variation).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ValueError("need at least one sweep value")
    series = load_data(config.data) if series is None else series
    H = config.horizons[0] if H is None else H
    if normalizer == "norin" and shape is None:
        shape, _ = resolve_shape(config, series, H)
    name = SWEEP_AXES[axis]
    cast = float if axis == "lr" else int
    results = []
    for v in values:
        cfg = replace(config.train_config(H, seed), **{name: cast(v)})
        try:
            results.append(train(series, config.split, normalizer, shape, cfg).metrics["test"]["mse"])
        except TrainingError:
            results.append(None)
    summary = None
    if axis == "seed":
        ok = [r for r in results if r is not None]
        mean = float(np.mean(ok)) if ok else float("nan")
        std = float(np.std(ok, ddof=1)) if len(ok) >= 2 else 0.0
        summary = {"mean": mean, "std": std, "cv": std / mean if mean else float("nan")}
    return SweepResult(axis, [cast(v) for v in values], results, summary)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def _text_table(header, rows) -> str:
    cols = [header] + rows
    widths = [max(len(str(r[i])) for r in cols) for i in range(len(header))]

    def fmt(r):
        return "| " + " | ".join(str(c).ljust(w) for c, w in zip(r, widths)) + " |"

    lines = [fmt(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def _render_comparison(doc):
    table = ComparisonTable.from_dict(doc)
    rows = []
    for row in table.rows:
        win = table.winner(row)
        line = [row["dataset"], row["H"]]
        for j, cell in enumerate(row["cells"]):
            if cell.failed:
                s = "failed"
            else:
                s = f"{cell.mean:.4f}" + ("" if cell.std is None else f" ± {cell.std:.4f}")
            line.append(f"**{s}**" if j == win else s)
        rows.append(line)
    return table.to_csv(), _text_table(["dataset", "H"] + table.columns, rows)


def _render_significance(doc):
    header = ["baseline", "wins", "mean_delta", "W", "p", "method"]
    rows = [
        [k, f"{v['wins']}/{v['n_pairs']}", f"{v['mean_delta']:+.4f}", f"{v['W']:g}", f"{v['p']:.3g}", v["method"]]
        for k, v in sorted(doc.items())
    ]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    return buf.getvalue(), _text_table(header, rows)


def _render_grid(doc):
    grid = GridResult.from_dict(doc)
    text_csv = grid.to_csv()
    rows = list(csv.reader(io.StringIO(text_csv)))
    return text_csv, _text_table(rows[0], rows[1:])


def _render_sweep(doc):
    sweep = SweepResult.from_dict(doc)
    text_csv = sweep.to_csv()
    rows = list(csv.reader(io.StringIO(text_csv)))
    return text_csv, _text_table(rows[0], rows[1:])


def _render_trials(lines):
    header = ["trial", "delta", "epsilon", "objective", "status"]
    rows = []
    for rec in lines:
        rows.append(
            [
                rec["index"],
                "|".join(f"{v:.3f}" for v in rec["delta"]),
                "|".join(f"{v:+.3f}" for v in rec["epsilon"]),
                f"{rec['objective']:.6f}" if rec["status"] == "complete" else "-",
                rec["status"],
            ]
        )
    complete = [r for r in lines if r["status"] == "complete"]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    text = _text_table(header, rows)
    if complete:
        best = min(complete, key=lambda r: (r["objective"], r["index"]))
        text += f"\nbest trial {best['index']}: objective {best['objective']:.6f}\n"
    return buf.getvalue(), text


def _render_degeneration(lines):
    header = ["seed", "initial_delta", "final_delta", "drift", "epochs_to_first_increase"]
    rows = []
    for rec in lines:
        s = rec["summary"]
        rows.append(
            [
                s["seed"],
                "|".join(f"{v:.3f}" for v in s["initial_delta"]),
                "|".join(f"{v:.3f}" for v in s["final_delta"]),
                f"{s['drift']:+.4f}",
                "-" if s["epochs_to_first_increase"] is None else s["epochs_to_first_increase"],
            ]
        )
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    return buf.getvalue(), _text_table(header, rows)


_RENDERERS = {
    "comparison.json": _render_comparison,
    "significance.json": _render_significance,
    "grid.json": _render_grid,
    "sweep.json": _render_sweep,
    "trials.jsonl": _render_trials,
    "degeneration.jsonl": _render_degeneration,
}


def report(artifact_dir, out_dir) -> list:
    """Render every known artifact in ``artifact_dir`` as ``<stem>.csv`` and ``<stem>.md``.

    Returns the written paths. Raises :class:`ArtifactError` when no known
    artifact is present or one cannot be parsed.
    """
    artifact_dir, out_dir = Path(artifact_dir), Path(out_dir)
    if not artifact_dir.is_dir():
        raise ArtifactError(f"artifact directory not found: {artifact_dir}")
    present = [name for name in ARTIFACTS if (artifact_dir / name).is_file()]
    if not present:
        expected = ", ".join(ARTIFACTS)
        raise ArtifactError(f"no artifacts in {artifact_dir}; expected one of: {expected}")
    written = []
    for name in present:
        path = artifact_dir / name
        try:
            text = path.read_text()
            if name.endswith(".jsonl"):
                doc = [json.loads(line) for line in text.splitlines() if line.strip()]
            else:
                doc = json.loads(text)
            csv_text, md_text = _RENDERERS[name](doc)
        except (ValueError, KeyError, TypeError) as exc:
            raise ArtifactError(f"corrupt artifact {path}: {exc}") from exc
        stem = name.split(".")[0]
        for suffix, body in ((".csv", csv_text), (".md", md_text)):
            target = out_dir / (stem + suffix)
            atomic_write(target, body)
            written.append(target)
    return written


def write_json(path, obj) -> None:
    atomic_write(path, _dumps(obj))


def write_jsonl(path, records) -> None:
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
