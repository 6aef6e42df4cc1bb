"""Command line entry point: ``embp {sweep,iters,train,eval-schedule,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .algorithm import InitStrategy
from .em import Schedule, make_schedule
from .model import get_constellation
from .selftest import CHECKS, run_selftest
from .training import TrainConfig, TrainingSet, train_schedule, write_train_log

# flag -> ExperimentConfig field
EXPERIMENT_FLAGS = {
    "N": "N", "L": "L", "constellation": "constellation", "snr": "snr_db", "blocks": "blocks",
    "detectors": "detectors", "schedule": "schedule", "T": "T", "beta_bp": "beta_bp", "bp_iterations": "bp_iterations",
    "init": "init", "seed": "seed", "workers": "workers", "chunk_size": "chunk_size",
}


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--N", help="symbols per block")
    p.add_argument("--L", help="channel memory")
    p.add_argument("--constellation", help="bpsk or qpsk")
    p.add_argument("--snr", help="comma separated SNR grid in dB")
    p.add_argument("--blocks", help="blocks per SNR point")
    p.add_argument("--detectors", help="comma separated detector list")
    p.add_argument("--schedule", help="serial, parallel or a schedule file")
    p.add_argument("--T", help="EMBP iterations for named schedules")
    p.add_argument("--beta-bp", dest="beta_bp", help="constant BP momentum, a schedule file, or 'schedule'")
    p.add_argument("--bp-iterations", dest="bp_iterations", help="iterations of the coherent BP detectors")
    p.add_argument("--init", help="impulse_power[:alpha] or genie_perturbed[:scale]")
    p.add_argument("--seed", help="master seed (64-bit unsigned)")
    p.add_argument("--workers", help="worker processes")
    p.add_argument("--chunk-size", dest="chunk_size", help="blocks per work unit")
    p.add_argument("--out", help="CSV output path (default stdout)")


def _resolve(args, **extra) -> harness.ExperimentConfig:
    overrides = {field: getattr(args, flag) for flag, field in EXPERIMENT_FLAGS.items() if getattr(args, flag, None) is not None}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    config = harness.load_config(args.config, overrides)
    print(f"# config {json.dumps(config.to_dict(), sort_keys=True)}", file=sys.stderr)
    print(f"# master seed {config.seed}", file=sys.stderr)
    return config


def _emit(text: str, path) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _write_meta(path, config: harness.ExperimentConfig, wall: float, **more) -> None:
    meta = {"config": config.to_dict(), "wall_time_s": wall, "scale": harness.scale_note(config), **more}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cmd_sweep(args) -> int:
    extra = {"schedule": args.schedule_file} if getattr(args, "schedule_file", None) else {}
    config = _resolve(args, **extra)
    t0 = time.perf_counter()
    rows = harness.run_ber_sweep(config, dump_blocks=bool(args.dump_blocks))
    wall = time.perf_counter() - t0
    _emit(harness.sweep_csv(rows, config.detectors), args.out)
    if args.dump_blocks:
        harness.dump_records(rows, args.dump_blocks)
    print(f"# {harness.scale_note(config)}; wall time {wall:.1f} s", file=sys.stderr)
    for r in rows:
        if r.failures:
            print(f"# snr {r.snr_db:g} dB: {r.failures} failed blocks", file=sys.stderr)
    if args.out:
        _write_meta(args.out, config, wall, point_wall_time_s={f"{r.snr_db:g}": r.wall_time for r in rows})
    return 0


def _schedule_list(specs, config: harness.ExperimentConfig) -> dict:
    out = {}
    for spec in specs:
        if spec in ("serial", "parallel"):
            out[spec] = make_schedule(spec, config.T_resolved, config.L)
        else:
            out[Path(spec).stem] = Schedule.load(spec)
    return out


def cmd_iters(args) -> int:
    config = _resolve(args)
    specs = [s for s in (args.schedules or "serial,parallel").split(",") if s]
    schedules = _schedule_list(specs, config)
    t0 = time.perf_counter()
    errors = harness.run_mse_over_iters(config, schedules, snr_index=args.snr_index)
    wall = time.perf_counter() - t0
    _emit(harness.iters_csv(errors), args.out)
    print(f"# {harness.scale_note(config)}; wall time {wall:.1f} s", file=sys.stderr)
    if args.out:
        _write_meta(args.out, config, wall)
    return 0


def cmd_eval_schedule(args) -> int:
    schedule = Schedule.load(args.schedule_file)
    if args.iters:
        config = _resolve(args, L=str(schedule.L), schedule=args.schedule_file)
        errors = harness.run_mse_over_iters(config, {Path(args.schedule_file).stem: schedule})
        _emit(harness.iters_csv(errors), args.out)
        return 0
    if args.detectors is None:
        args.detectors = "embp,bp_with_embp_estimate"
    args.L = args.L or str(schedule.L)
    args.beta_bp = args.beta_bp or "schedule"
    return cmd_sweep(args)


def cmd_train(args) -> int:
    lo, hi = (float(v) for v in args.snr_range.split(","))
    constellation = get_constellation(args.constellation)
    channels = harness.load_channels(args.channels) if args.channels else None
    L = channels.shape[-1] - 1 if channels is not None else args.L
    train = TrainingSet(args.N, L, (lo, hi), constellation, seed=args.seed, channels=channels)
    which = {"em": (True, False), "bp": (False, True), "both": (True, True)}[args.train]
    config = TrainConfig(
        objective=args.objective, batches=args.batches, batch_size=args.batch_size, step_size=args.lr,
        k_em_target=args.kem, lambda_l1=args.lambda_l1, gradient_mode=args.gradient_mode,
        train_beta_em=which[0], train_beta_bp=which[1], init=InitStrategy.parse(args.init),
        val_batches=args.val_batches, log_every=args.log_every, seed=args.seed,
    )
    if args.start in ("serial", "parallel"):
        initial = make_schedule(args.start, args.T, L)
    elif args.start == "frozen":
        initial = make_schedule("custom", args.T, L, beta_em=np.zeros((args.T, L + 2)))
    else:
        initial = Schedule.load(args.start)
    shown = {k: v for k, v in vars(args).items() if k != "func"}
    print(f"# config {json.dumps(shown, sort_keys=True)}", file=sys.stderr)
    print(f"# master seed {args.seed}", file=sys.stderr)
    log = []
    t0 = time.perf_counter()
    learned = train_schedule(train, config, initial, log=log)
    print(f"# trained in {time.perf_counter() - t0:.1f} s; {learned.n_updates} raw updates per block", file=sys.stderr)
    learned.save(args.out)
    if args.log:
        write_train_log(log, args.log)
    return 0


def cmd_selftest(args) -> int:
    if args.select_adversarial:
        print(f"# master seed {args.seed}", file=sys.stderr)
        h = harness.select_oscillating_channels(args.L, args.snr, args.count, N=args.N, seed=args.seed,
                                                T=args.T, tol=args.tol)
        harness.save_channels(args.select_adversarial, h)
        print(f"selected {len(h)} channels with non-converged BP beliefs at T={args.T}")
        return 0
    names = args.only.split(",") if args.only else None
    if names:
        unknown = set(names) - set(CHECKS)
        if unknown:
            raise ValueError(f"unknown checks {sorted(unknown)}; available: {sorted(CHECKS)}")
    return 0 if run_selftest(names) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embp", description="Blind joint channel estimation and detection with EMBP.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="BER, BMI and channel MSE over an SNR grid")
    _experiment_args(p)
    p.add_argument("--dump-blocks", dest="dump_blocks", help="write per-block JSON lines here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("iters", help="channel MSE after every EMBP iteration")
    _experiment_args(p)
    p.add_argument("--schedules", help="comma separated: serial, parallel or schedule files")
    p.add_argument("--snr-index", dest="snr_index", type=int, default=0, help="which SNR of the grid to use")
    p.set_defaults(func=cmd_iters)

    p = sub.add_parser("train", help="learn a momentum schedule by unrolled gradient descent")
    p.add_argument("--objective", choices=("mse_h", "neg_bmi"), default="mse_h")
    p.add_argument("--T", type=int, default=3)
    p.add_argument("--L", type=int, default=5)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--constellation", default="bpsk")
    p.add_argument("--kem", type=int, default=None, help="raw update budget after pruning")
    p.add_argument("--batches", type=int, default=250)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--lambda-l1", dest="lambda_l1", type=float, default=0.1)
    p.add_argument("--snr-range", dest="snr_range", default="0,12", help="lo,hi in dB")
    p.add_argument("--init", default="impulse_power")
    p.add_argument("--train", choices=("em", "bp", "both"), default="em", help="which weights to learn")
    p.add_argument("--start", default="parallel", help="serial, parallel, frozen (beta_EM = 0) or a schedule file")
    p.add_argument("--gradient-mode", dest="gradient_mode", default="exact_unrolled",
                   choices=("exact_unrolled", "stochastic_perturbation"))
    p.add_argument("--channels", help="fixed channel set file (overrides --L)")
    p.add_argument("--val-batches", dest="val_batches", type=int, default=0)
    p.add_argument("--log-every", dest="log_every", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--out", required=True, help="schedule file to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-schedule", help="run a sweep (or --iters trace) with a schedule file")
    p.add_argument("schedule_file")
    _experiment_args(p)
    p.add_argument("--iters", action="store_true", help="emit the MSE-over-iterations trace instead")
    p.add_argument("--dump-blocks", dest="dump_blocks")
    p.set_defaults(func=cmd_eval_schedule)

    p = sub.add_parser("selftest", help="run the small-instance oracle battery")
    p.add_argument("--only", help="comma separated subset of checks")
    p.add_argument("--select-adversarial", dest="select_adversarial", metavar="OUT",
                   help="instead write channels on which coherent BP oscillates")
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--snr", type=float, default=12.0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"embp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
