"""Multi-seed experiment runner: per-seed CSVs, per-cell aggregates, plots.

Artifact layout under the manifest's output directory::

    <env>/<shield>/seed_<n>.csv       one row per episode
    <env>/<shield>/seed_<n>.params    final policy checkpoint
    <env>/<shield>/seed_<n>.json      run counters and wall time
    <env>/<shield>/aggregate.csv      smoothed mean/std across seeds
    <env>/plots/<metric>.svg          one figure per metric, shields overlaid

A manifest is a JSON object::

    {"out": "runs", "window": 20, "workers": 1,
     "cells": [{"env": "cartpole", "shield": "savmpc", "seeds": [0, 1, 2],
                "overrides": {"train.episodes": 100}}]}

``seeds`` may be omitted (3 seeds, or 10 in full-fidelity mode) and
``overrides`` takes ``section.key`` config entries.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ENVS, SHIELDS, ConfigError, apply_overrides, default_config
from .policy import save_params
from .trainer import RunMetrics, Trainer

log = logging.getLogger(__name__)

SEED_COLUMNS = ("episode", "steps", "reward", "violated", "aborted", "cum_violations", "cum_aborts")
METRICS = ("reward", "cum_violations", "cum_aborts")
DEFAULT_SEEDS = 3
FULL_SEEDS = 10


@dataclass
class Cell:
    env: str
    shield: str
    seeds: tuple
    overrides: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.env}/{self.shield}"


@dataclass
class Manifest:
    cells: list
    out: Path
    window: int = 20
    workers: int | None = None


def parse_manifest(data: dict, base_dir=".", full: bool = False) -> Manifest:
    if not isinstance(data, dict) or not data.get("cells"):
        raise ConfigError("manifest needs a non-empty 'cells' list")
    default_seeds = tuple(range(FULL_SEEDS if full else DEFAULT_SEEDS))
    cells, seen = [], set()
    for raw in data["cells"]:
        env, shield = raw.get("env"), raw.get("shield")
        if env not in ENVS:
            raise ConfigError(f"invalid cell env {env!r}; expected one of {ENVS}")
        if shield not in SHIELDS:
            raise ConfigError(f"invalid cell shield {shield!r}; expected one of {SHIELDS}")
        seeds = tuple(int(s) for s in raw.get("seeds", default_seeds))
        if not seeds or len(set(seeds)) != len(seeds):
            raise ConfigError(f"cell {env}/{shield}: seeds must be non-empty and distinct")
        if (env, shield) in seen:
            raise ConfigError(f"duplicate cell {env}/{shield}")
        seen.add((env, shield))
        cells.append(Cell(env, shield, seeds, dict(raw.get("overrides", {}))))
    window = int(data.get("window", 20))
    if window < 1:
        raise ConfigError("window must be >= 1")
    out = Path(data.get("out", "runs"))
    if not out.is_absolute():
        out = Path(base_dir) / out
    workers = data.get("workers")
    return Manifest(cells, out, window, None if workers is None else int(workers))


def load_manifest(path, full: bool = False) -> Manifest:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return parse_manifest(json.load(f), path.parent, full)


def cell_config(cell: Cell, seed: int):
    overrides = {}
    for key, value in cell.overrides.items():
        if "." not in key:
            raise ConfigError(f"override {key!r} needs a 'section.' prefix")
        section, name = key.split(".", 1)
        overrides[(section, name)] = value
    return apply_overrides(default_config(cell.env, cell.shield, seed), overrides)


def metrics_csv(metrics: RunMetrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEED_COLUMNS)
    for r, cv, ca in metrics.rows():
        w.writerow([r.episode, r.steps, repr(float(r.reward)), int(r.violated), int(r.aborted), cv, ca])
    return buf.getvalue()


def write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def seed_path(cell_dir: Path, seed: int) -> Path:
    return cell_dir / f"seed_{seed}.csv"


def summary_path(cell_dir: Path, seed: int) -> Path:
    return cell_dir / f"seed_{seed}.json"


def run_summary(metrics: RunMetrics, wall_time: float) -> dict:
    return {
        "episodes": len(metrics.episodes),
        "env_steps": metrics.env_steps,
        "violations": metrics.cum_violations,
        "aborts": metrics.cum_aborts,
        "planner_calls": metrics.planner_calls,
        "plans_returned": metrics.plans_returned,
        "plan_failures": metrics.plan_failures,
        "shield_oracle_calls": metrics.shield_oracle_calls,
        "updates": metrics.updates,
        "wall_time": wall_time,
    }


def run_seed(cfg, cell_dir: Path) -> Path:
    """Train one seed and write its CSV, checkpoint and summary; returns the CSV path."""
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    trainer = Trainer(cfg)
    params, metrics = trainer.run()
    wall = time.perf_counter() - start
    save_params(params, cell_dir / f"seed_{cfg.seed}.params")
    path = seed_path(cell_dir, cfg.seed)
    write_atomic(path, metrics_csv(metrics))
    # written last: its presence marks the seed as complete
    write_atomic(summary_path(cell_dir, cfg.seed), json.dumps(run_summary(metrics, wall), indent=1) + "\n")
    log.info(
        "%s/%s seed %d: %d episodes, %d violations, %d aborts, %d plan failures",
        cfg.env, cfg.shield, cfg.seed, len(metrics.episodes), metrics.cum_violations,
        metrics.cum_aborts, metrics.plan_failures,
    )
    return path


def _run_job(job):
    cfg, cell_dir = job
    return str(run_seed(cfg, Path(cell_dir)))


def read_summary(cell_dir, seed: int) -> dict:
    with open(summary_path(Path(cell_dir), seed), encoding="utf-8") as f:
        return json.load(f)


def read_seed_csv(path) -> dict:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != SEED_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(SEED_COLUMNS))
    return {name: rows[:, i] for i, name in enumerate(SEED_COLUMNS)}


@dataclass
class AggregateSeries:
    mean: np.ndarray
    std: np.ndarray

    def __len__(self):
        return len(self.mean)


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    # direct sums rather than cumsum differences, so window 1 is exact
    return np.array([x[max(i + 1 - window, 0) : i + 1].mean() for i in range(len(x))])


def aggregate(series: list, window: int) -> AggregateSeries:
    """Smooth each series, then take the pointwise mean and population std.

    Shorter series are padded with their last value so every episode index
    is covered.
    """
    if not series:
        raise ValueError("aggregate needs at least one series")
    if window < 1:
        raise ValueError("window must be >= 1")
    n = max(len(s) for s in series)
    if n == 0:
        raise ValueError("aggregate needs non-empty series")
    rows = []
    for s in series:
        s = np.asarray(s, dtype=float)
        if len(s) == 0:
            raise ValueError("aggregate needs non-empty series")
        s = np.concatenate([s, np.full(n - len(s), s[-1])])
        rows.append(moving_average(s, window))
    rows = np.array(rows)
    return AggregateSeries(rows.mean(axis=0), rows.std(axis=0))


def aggregate_cell(cell_dir, window: int, seeds=None) -> Path:
    """Write ``aggregate.csv`` for the seed CSVs found in ``cell_dir``.

    Columns: episode, env_steps_mean (mean cumulative environment steps at
    that episode, for step-indexed plots), n_seeds, then mean/std per metric.
    """
    cell_dir = Path(cell_dir)
    if seeds is None:
        paths = sorted(cell_dir.glob("seed_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    else:
        paths = [seed_path(cell_dir, s) for s in seeds]
    if not paths:
        raise ValueError(f"no seed CSVs in {cell_dir}")
    data = [read_seed_csv(p) for p in paths]
    steps = aggregate([np.cumsum(d["steps"]) for d in data], 1)
    aggs = {m: aggregate([d[m] for d in data], window) for m in METRICS}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["episode", "env_steps_mean", "n_seeds"]
    for m in METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    w.writerow(header)
    for i in range(len(steps)):
        row = [i, repr(float(steps.mean[i])), len(data)]
        for m in METRICS:
            row += [repr(float(aggs[m].mean[i])), repr(float(aggs[m].std[i]))]
        w.writerow(row)
    path = cell_dir / "aggregate.csv"
    write_atomic(path, buf.getvalue())
    return path


def read_aggregate(path) -> dict:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader]).reshape(-1, len(header))
    return {name: rows[:, i] for i, name in enumerate(header)}


def run_experiment(manifest: Manifest, force: bool = False, plot: bool = True) -> Path:
    """Train every missing (cell, seed), then aggregate and plot.

    Seeds with a summary file are kept unless ``force`` is set.
    """
    out = manifest.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")

    jobs = []
    for cell in manifest.cells:
        cell_dir = out / cell.env / cell.shield
        for seed in cell.seeds:
            cfg = cell_config(cell, seed)  # validate everything before training
            if force or not summary_path(cell_dir, seed).exists():
                jobs.append((cfg, str(cell_dir)))
            else:
                log.info("%s seed %d: kept existing results", cell.name, seed)

    workers = manifest.workers or os.cpu_count() or 1
    if jobs:
        if workers == 1 or len(jobs) == 1:
            for job in jobs:
                _run_job(job)
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
                list(pool.map(_run_job, jobs))

    for cell in manifest.cells:
        aggregate_cell(out / cell.env / cell.shield, manifest.window, cell.seeds)
    if plot:
        from .plotting import plot_environment

        for env in sorted({c.env for c in manifest.cells}):
            shields = [c.shield for c in manifest.cells if c.env == env]
            plot_environment(out, env, shields)
    return out
