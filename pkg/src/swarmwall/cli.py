"""Command line: ``swarmwall {run,experiment,sweep,train,plot}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, SimConfig, TrainingConfig, read_config_file, split_overrides, with_overrides
from .scenarios import ScenarioSpec

log = logging.getLogger("swarmwall")


class UsageError(Exception):
    pass


def _int_list(text):
    """``"1,1000"`` or ``"10:100:10"`` (inclusive range)."""
    try:
        if ":" in text:
            lo, hi, step = (int(x) for x in text.split(":"))
            return list(range(lo, hi + 1, step))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list: {text!r}") from None


def _shared(p, steps=5000, reps=None, controller=True):
    p.add_argument("--case", type=int, choices=range(1, 6), default=1)
    if controller:
        p.add_argument("--controller", choices=("fsm", "rl"), default="fsm")
        p.add_argument("--checkpoint", help="trained network for --controller rl")
    p.add_argument("--timer", type=float, default=0.0, help="walling timer in seconds")
    p.add_argument("--swarm-size-a", type=int, default=30)
    p.add_argument("--swarm-size-b", type=int, default=30)
    p.add_argument("--steps", type=int, default=steps)
    if reps is not None:
        p.add_argument("--reps", type=int, default=reps)
        p.add_argument("--workers", type=int, default=None, help="process pool size (default: cpu count)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key = value or JSON file overriding simulation/training parameters")
    p.add_argument("--out", default=".")


def build_parser():
    ap = argparse.ArgumentParser(prog="swarmwall", description="Two-swarm walling simulator and experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one simulation -> run.csv")
    _shared(p)
    p.add_argument("--snapshot-at", type=_int_list, default=[], help="comma-separated steps to dump positions")

    p = sub.add_parser("experiment", help="replicated runs -> agg.csv")
    _shared(p, reps=100)
    p.add_argument("--keep-runs", action="store_true", help="also write run_<i>.csv per replication")

    p = sub.add_parser("sweep", help="population grid -> sweep.csv")
    _shared(p, reps=2)
    p.add_argument("--sizes", type=_int_list, default=list(range(10, 101, 10)),
                   help="sizes for both swarms, e.g. 5,10,15 or 10:100:10")
    p.add_argument("--sizes-b", type=_int_list, default=None, help="sizes for swarm B (default: --sizes)")

    p = sub.add_parser("train", help="DQN training -> checkpoints + train_log.csv")
    p.add_argument("--case", type=int, choices=range(1, 6), default=3)
    p.add_argument("--swarm-size", type=int, default=None, help="robots per swarm (sets both sizes)")
    p.add_argument("--swarm-size-a", type=int, default=10)
    p.add_argument("--swarm-size-b", type=int, default=10)
    p.add_argument("--steps", type=int, default=None, help="total training steps")
    p.add_argument("--timer", type=float, default=0.0, help="Standstill hold in seconds")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", default="train_out")

    p = sub.add_parser("plot", help="render agg.csv / sweep.csv")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default=None, help="output directory (default: next to each CSV)")
    p.add_argument("--format", default="png", choices=("png", "pdf", "svg"))
    return ap


def _configs(args):
    sim, tr = SimConfig(), TrainingConfig()
    if getattr(args, "config", None):
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        s_over, t_over = split_overrides(values, SimConfig, TrainingConfig)
        sim, tr = with_overrides(sim, s_over), with_overrides(tr, t_over)
    return sim, tr


def _spec(args, sim, reps=1):
    scenario = ScenarioSpec(case_id=args.case, n_a=args.swarm_size_a, n_b=args.swarm_size_b)
    return harness.ExperimentSpec(scenario=scenario, controller=args.controller, walling_timer_s=args.timer,
                                  replications=reps, steps=args.steps, base_seed=args.seed,
                                  checkpoint=args.checkpoint, sim_config=sim)


def cmd_run(args):
    sim, _ = _configs(args)
    spec = _spec(args, sim)
    metrics, snaps = harness.run_single(spec, args.seed, snapshot_at=args.snapshot_at)
    out = Path(args.out)
    harness.write_run(out / "run.csv", metrics)
    for step, snap in sorted(snaps.items()):
        harness.write_snapshot(out / f"snap_{step}.csv", snap)
    log.info("wrote %s", out / "run.csv")


def cmd_experiment(args):
    sim, _ = _configs(args)
    spec = _spec(args, sim, args.reps)
    runs = harness.run_replications(spec, args.workers)
    out = Path(args.out)
    harness.write_agg(out / "agg.csv", harness.aggregate(runs))
    if args.keep_runs:
        for i, r in enumerate(runs):
            harness.write_run(out / f"run_{i}.csv", r)
    log.info("wrote %s", out / "agg.csv")


def cmd_sweep(args):
    sim, _ = _configs(args)
    spec = _spec(args, sim, args.reps)
    sizes_b = args.sizes_b if args.sizes_b is not None else args.sizes
    table = harness.sweep(spec, args.sizes, sizes_b, args.workers)
    harness.write_sweep(Path(args.out) / "sweep.csv", table)


def cmd_train(args):
    from .training import train

    sim, tr = _configs(args)
    over = {}
    if args.steps is not None:
        over["total_steps"] = args.steps
    if args.checkpoint_every is not None:
        over["checkpoint_interval"] = args.checkpoint_every
    tr = with_overrides(tr, over)
    n_a = n_b = args.swarm_size
    if n_a is None:
        n_a, n_b = args.swarm_size_a, args.swarm_size_b
    scenario = ScenarioSpec(case_id=args.case, n_a=n_a, n_b=n_b)
    final, _ = train(scenario, sim, tr, args.seed, args.out, resume=args.resume,
                     hold_ticks=sim.seconds_to_ticks(args.timer))
    print(final)


def cmd_plot(args):
    from .plotting import plot_csv

    for path in args.csv:
        out = args.out if args.out is not None else Path(path).parent
        for f in plot_csv(path, out, args.format):
            print(f)


COMMANDS = {"run": cmd_run, "experiment": cmd_experiment, "sweep": cmd_sweep, "train": cmd_train, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except harness.CsvFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
