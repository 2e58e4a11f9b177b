"""Replicated runs, population sweeps and the CSV files they produce."""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SimConfig
from .fsm import FsmController
from .qnet import RlController, load_checkpoint
from .scenarios import ScenarioSpec
from .sim import init_world, tick

RUN_COLUMNS = ["step", "coverage_a", "coverage_b", "mixing"]
SNAP_COLUMNS = ["id", "swarm", "x", "y", "fsm_state"]
METRICS = ["coverage_a", "coverage_b", "mixing"]
AGG_COLUMNS = ["step"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "min", "max")]
SWEEP_COLUMNS = ["n_a", "n_b", "coverage_a", "coverage_b", "mixing"]


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: ScenarioSpec
    controller: str = "fsm"
    walling_timer_s: float = 0.0
    replications: int = 100
    steps: int = 5000
    base_seed: int = 0
    checkpoint: str | None = None
    sim_config: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        if self.controller not in ("fsm", "rl"):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.replications < 1 or self.steps < 1:
            raise ValueError("replications and steps must be >= 1")
        if self.walling_timer_s < 0:
            raise ValueError("walling timer must be non-negative")
        if self.controller == "rl":
            if self.checkpoint is None or not os.access(self.checkpoint, os.R_OK):
                raise ValueError("the rl controller needs a readable checkpoint")


def make_controller(spec: ExperimentSpec, seed: int, net=None):
    ticks = spec.sim_config.seconds_to_ticks(spec.walling_timer_s)
    if spec.controller == "fsm":
        return FsmController(ticks)
    if net is None:
        net = load_checkpoint(spec.checkpoint)
    return RlController(net, hold_ticks=ticks, epsilon=0.0, rng=np.random.default_rng([seed, 7]))


def run_single(spec: ExperimentSpec, seed: int, snapshot_at=(), net=None):
    """One simulation. Returns ``(metrics, snapshots)``.

    ``metrics`` is a ``(steps, 4)`` array with rows ``step, coverage_a,
    coverage_b, mixing`` measured after each tick; ``snapshots`` maps a step
    (ticks completed, 0 is the initial placement) to an ``(N, 5)`` array.
    """
    world = init_world(spec.scenario, spec.sim_config, seed=seed)
    ctrl = make_controller(spec, seed, net)
    wanted = set(int(s) for s in snapshot_at)
    bad = [s for s in wanted if s < 0 or s > spec.steps]
    if bad:
        raise ValueError(f"snapshot steps outside 0..{spec.steps}: {sorted(bad)}")
    snaps = {}

    def snap():
        if world.step in wanted:
            snaps[world.step] = np.column_stack([np.arange(world.n), world.swarm, world.positions, world.mode])

    snap()
    out = np.empty((spec.steps, 4))
    for i in range(spec.steps):
        _, m = tick(world, ctrl)
        out[i] = (m.step, m.coverage_a, m.coverage_b, m.mixing)
        snap()
    return out, snaps


def _metrics_only(args):
    spec, seed = args
    return run_single(spec, seed)[0]


def run_replications(spec: ExperimentSpec, workers: int | None = None) -> np.ndarray:
    """Runs ``replications`` seeds ``base_seed + i``; returns ``(reps, steps, 4)`` in replication order."""
    jobs = [(spec, spec.base_seed + i) for i in range(spec.replications)]
    workers = _workers(workers, len(jobs))
    if workers == 1:
        results = [_metrics_only(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_metrics_only, jobs))
    return np.stack(results)


def _workers(workers, n_jobs):
    if workers is None:
        workers = os.cpu_count() or 1
    return max(1, min(int(workers), n_jobs))


def aggregate(runs: np.ndarray) -> np.ndarray:
    """Per-step mean/min/max of each metric; columns follow :data:`AGG_COLUMNS`."""
    cols = [runs[0, :, 0]]
    for j in range(1, 4):
        v = runs[:, :, j]
        cols += [v.mean(axis=0), v.min(axis=0), v.max(axis=0)]
    return np.column_stack(cols)


def first_step_below(steps, values, threshold) -> int | None:
    below = np.flatnonzero(np.asarray(values) < threshold)
    return int(steps[below[0]]) if below.size else None


def sweep(spec: ExperimentSpec, sizes_a, sizes_b, workers: int | None = None) -> np.ndarray:
    """Final-step means over ``replications`` for every ``(n_a, n_b)`` pair."""
    grid = [(a, b) for a in sizes_a for b in sizes_b]
    jobs = []
    for a, b in grid:
        sc = ScenarioSpec(**{**spec.scenario.__dict__, "n_a": int(a), "n_b": int(b)})
        s = ExperimentSpec(**{**spec.__dict__, "scenario": sc})
        jobs += [(s, spec.base_seed + i) for i in range(spec.replications)]
    workers = _workers(workers, len(jobs))
    if workers == 1:
        finals = [_metrics_only(j)[-1] for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            finals = [r[-1] for r in pool.map(_metrics_only, jobs)]
    finals = np.array(finals).reshape(len(grid), spec.replications, 4)
    means = finals[:, :, 1:].mean(axis=1)
    return np.column_stack([np.array(grid, float), means])


# ---- CSV i/o ------------------------------------------------------------------------------------

def _fmt(v):
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def write_csv(path, columns, rows, int_cols=()):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) if c in int_cols else repr(float(v)) for c, v in zip(columns, r)])
    os.replace(tmp, path)
    return path


def write_run(path, metrics):
    return write_csv(path, RUN_COLUMNS, metrics, int_cols={"step"})


def write_snapshot(path, snap):
    return write_csv(path, SNAP_COLUMNS, snap, int_cols={"id", "swarm", "fsm_state"})


def write_agg(path, agg):
    return write_csv(path, AGG_COLUMNS, agg, int_cols={"step"})


def write_sweep(path, table):
    return write_csv(path, SWEEP_COLUMNS, table, int_cols={"n_a", "n_b"})


class CsvFormatError(ValueError):
    pass


def read_csv(path, columns=None):
    """Parse a numeric CSV into ``(header, array)``; errors name the file and row."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    header = rows[0]
    if columns is not None and header != list(columns):
        raise CsvFormatError(f"{path}: row 1: expected header {','.join(columns)}")
    data = []
    for lineno, r in enumerate(rows[1:], 2):
        if len(r) != len(header):
            raise CsvFormatError(f"{path}: row {lineno}: expected {len(header)} fields, got {len(r)}")
        try:
            data.append([float(x) for x in r])
        except ValueError:
            raise CsvFormatError(f"{path}: row {lineno}: non-numeric value") from None
    if not data:
        raise CsvFormatError(f"{path}: no data rows")
    return header, np.array(data)
