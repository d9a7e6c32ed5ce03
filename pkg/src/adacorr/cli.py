"""Command-line entry point: gen, train, eval, bench, sweep.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import time

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .models import CheckpointError, load_checkpoint, save_checkpoint
from .pdegen.dataset import (CorruptDataError, check_pair, generate_split, read_dataset,
                             validate_targets, write_dataset)
from .pdegen.solvers import SolverInstability
from .training import (NumericalFailure, default_lambdas, evaluate, lambda_sweep, train,
                       write_csv)

log = logging.getLogger("adacorr")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SUITES = {"te-mass": ("te2d", "mass"), "te-norm": ("te2d", "norm"),
          "cac-mass": ("cac2d", "mass"), "lse-norm": ("lse1d", "norm"),
          "nls-norm": ("nls1d", "norm")}
BENCH_METHODS = ("ablation", "adaptive", "penalty", "projection", "raw")
BENCH_HEADER = ["method", "pde", "law", "seed", "rel_l2_mean", "rel_l2_std", "cons_err_abs",
                "cons_err_rel", "wall_s"]


class UsageError(ValueError):
    pass


def use_color(stream) -> bool:
    return "NO_COLOR" not in os.environ and hasattr(stream, "isatty") and stream.isatty()


def _setup_logging(verbose: bool) -> None:
    color = use_color(sys.stderr)
    fmt = "\033[2m%(asctime)s\033[0m %(levelname)s %(message)s" if color else \
        "%(asctime)s %(levelname)s %(message)s"
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=fmt,
                        stream=sys.stderr, force=True)


def _resolve(args, command: str) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("config", "func", "verbose") and v is not None}
    cfg.update(overrides)
    cfg.command = command
    return cfg


def _write_resolved(cfg: RunConfig, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved.cfg"), "w") as fh:
        fh.write(cfg.to_text())


def _require(cfg: RunConfig, *keys) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + k for k in missing)}")


# ---------------------------------------------------------------------- data

def _data_paths(data_dir: str):
    train = os.path.join(data_dir, "train.nods")
    test = os.path.join(data_dir, "test.nods")
    steps = sorted(glob.glob(os.path.join(data_dir, "test_step*.nods")))
    return train, test, steps


def load_data(data_dir: str):
    train_p, test_p, step_ps = _data_paths(data_dir)
    for p in (train_p, test_p):
        if not os.path.exists(p):
            raise CorruptDataError(f"missing dataset file {p}")
    return read_dataset(train_p), read_dataset(test_p), [read_dataset(p) for p in step_ps]


def generate_data(cfg: RunConfig):
    check_pair(cfg.pde, cfg.law)
    spec = cfg.pde_spec()
    train_split, _ = generate_split(spec, cfg.law, cfg.n_train, 0, 1)
    test_split, rollout = generate_split(spec, cfg.law, cfg.n_test, cfg.n_train,
                                         max(1, cfg.rollout_steps))
    return train_split, test_split, rollout


def cmd_gen(cfg: RunConfig) -> int:
    _require(cfg, "out")
    try:
        check_pair(cfg.pde, cfg.law)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train_split, test_split, rollout = generate_data(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    write_dataset(train_split, os.path.join(cfg.out, "train.nods"))
    write_dataset(test_split, os.path.join(cfg.out, "test.nods"))
    for k, split in enumerate(rollout, start=2):
        write_dataset(split, os.path.join(cfg.out, f"test_step{k:02d}.nods"))
    _write_resolved(cfg, cfg.out)
    worst = max(validate_targets(s.inputs, s.targets, s.law, s.cons_targets)
                for s in [train_split, test_split, *rollout])
    zero = sum(1 for p in train_split.provenance + test_split.provenance if p.get("zero"))
    print(f"{cfg.pde}/{cfg.law}: {len(train_split)} train, {len(test_split)} test, "
          f"{len(rollout) + 1} rollout step(s); max relative {cfg.law} residual of targets "
          f"{worst:.3e}" + (f"; {zero} identically-zero sample(s)" if zero else ""))
    return 0


# --------------------------------------------------------------------- train

def _build(cfg: RunConfig, split, method=None, seed=None, store=None):
    return cfg.build_model(split.inputs.shape[1], split.inputs.shape[2:], method, seed, store)


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    train_split, _, _ = load_data(cfg.data)
    if train_split.law != cfg.law or train_split.pde != cfg.pde:
        raise CorruptDataError(f"dataset is {train_split.pde}/{train_split.law} but the config "
                               f"says {cfg.pde}/{cfg.law}")
    model = _build(cfg, train_split)
    result = train(model, train_split, cfg.train_config())
    os.makedirs(cfg.out, exist_ok=True)
    save_checkpoint(model.store, os.path.join(cfg.out, "checkpoint.nopc"))
    write_csv(os.path.join(cfg.out, "loss.csv"), ["epoch", "loss"],
              [{"epoch": e, "loss": v} for e, v in enumerate(result.losses)])
    cfg.checkpoint = os.path.join(cfg.out, "checkpoint.nopc")
    _write_resolved(cfg, cfg.out)
    print(f"trained {cfg.method} for {cfg.epochs} epoch(s); final loss "
          f"{result.losses[-1] if result.losses else float('nan'):.6g}")
    return 0


# ---------------------------------------------------------------------- eval

def _report_row(method, cfg, seed, rep):
    return {"method": method, "pde": cfg.pde, "law": cfg.law, "seed": seed,
            "rel_l2_mean": rep.rel_l2_mean, "rel_l2_std": rep.rel_l2_std,
            "cons_err_abs": rep.cons_err_abs, "cons_err_rel": rep.cons_err_rel,
            "wall_s": rep.wall_time}


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "data", "out")
    run_cfg_path = os.path.join(os.path.dirname(os.path.abspath(cfg.checkpoint)), "resolved.cfg")
    if not os.path.exists(run_cfg_path):
        raise CheckpointError(f"no resolved.cfg next to checkpoint {cfg.checkpoint}")
    run_cfg = load_config(run_cfg_path)
    store = load_checkpoint(cfg.checkpoint)
    _, test_split, rollout = load_data(cfg.data)
    if test_split.law != run_cfg.law or test_split.pde != run_cfg.pde:
        raise CheckpointError(f"checkpoint was trained on {run_cfg.pde}/{run_cfg.law}, data is "
                              f"{test_split.pde}/{test_split.law}")
    model = _build(run_cfg, test_split, store=store)
    fresh = _build(run_cfg, test_split).store
    if store.names() != fresh.names() or any(store[n].shape != fresh[n].shape
                                             for n in fresh.names()):
        raise CheckpointError("checkpoint parameters do not match the model configuration")
    rep = evaluate(model, test_split, rollout, steps=cfg.steps)
    os.makedirs(cfg.out, exist_ok=True)
    write_csv(os.path.join(cfg.out, "eval.csv"), BENCH_HEADER,
              [_report_row(run_cfg.method, run_cfg, run_cfg.seed, rep)])
    write_csv(os.path.join(cfg.out, "rollout.csv"),
              ["step", "rel_l2", "cons_err_abs", "cons_err_rel"],
              [{"step": k + 1, "rel_l2": r, "cons_err_abs": a, "cons_err_rel": c}
               for k, (r, a, c) in enumerate(zip(rep.rollout_rel_l2, rep.rollout_cons_abs,
                                                 rep.rollout_cons_rel))])
    _write_resolved(cfg, cfg.out)
    print(f"rel_l2 {rep.rel_l2_mean:.4e} +- {rep.rel_l2_std:.2e}; "
          f"conservation error {rep.cons_err_abs:.3e}")
    return 0


# --------------------------------------------------------------------- sweep

def _parse_lambdas(text: str, law: str):
    if not text:
        return default_lambdas(law)
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --lambdas value {text!r}") from exc


def cmd_sweep(cfg: RunConfig) -> int:
    _require(cfg, "data", "out")
    train_split, test_split, _ = load_data(cfg.data)
    lambdas = _parse_lambdas(cfg.lambdas, train_split.law)
    cfg.law = train_split.law
    rows = lambda_sweep(lambda m: _build(cfg, train_split, m), train_split, test_split,
                        lambdas, cfg.train_config())
    os.makedirs(cfg.out, exist_ok=True)
    write_csv(os.path.join(cfg.out, "sweep.csv"), ["lambda", "rel_l2", "cons_err"], rows)
    _write_resolved(cfg, cfg.out)
    for r in rows:
        print(f"lambda={r['lambda']:g}: rel_l2 {r['rel_l2']:.4e}, cons_err {r['cons_err']:.3e}")
    return 0


# --------------------------------------------------------------------- bench

def run_bench(cfg: RunConfig, seeds) -> tuple[list, list, dict]:
    """Per-seed rows, aggregated rows and the chosen penalty weight per seed."""
    train_split, test_split, rollout = generate_data(cfg)
    runs, chosen = [], {}
    for method in BENCH_METHODS:
        for seed in seeds:
            lam = 0.0
            if method == "penalty":
                sweep = lambda_sweep(lambda m: _build(cfg, train_split, m, seed), train_split,
                                     train_split, default_lambdas(cfg.law),
                                     cfg.train_config(seed=seed))
                lam = min(sweep, key=lambda r: r["rel_l2"])["lambda"]
                chosen[seed] = lam
            model = _build(cfg, train_split, method, seed)
            t0 = time.perf_counter()
            train(model, train_split, cfg.train_config(method, lam, seed))
            rep = evaluate(model, test_split, rollout, steps=cfg.steps)
            row = _report_row(method, cfg, seed, rep)
            row["wall_s"] = time.perf_counter() - t0
            runs.append(row)
            log.info("%s seed %d: rel_l2 %.4e cons %.3e", method, seed, rep.rel_l2_mean,
                     rep.cons_err_abs)
    agg = []
    for method in BENCH_METHODS:
        rows = [r for r in runs if r["method"] == method]
        means = np.array([r["rel_l2_mean"] for r in rows])
        agg.append({"method": method, "pde": cfg.pde, "law": cfg.law,
                    "seed": ";".join(str(s) for s in seeds),
                    "rel_l2_mean": float(means.mean()),
                    "rel_l2_std": float(means.std()) if len(means) > 1 else
                    rows[0]["rel_l2_std"],
                    "cons_err_abs": float(np.mean([r["cons_err_abs"] for r in rows])),
                    "cons_err_rel": float(np.mean([r["cons_err_rel"] for r in rows])),
                    "wall_s": float(np.sum([r["wall_s"] for r in rows]))})
    return runs, agg, chosen


def cmd_bench(cfg: RunConfig) -> int:
    _require(cfg, "out")
    if cfg.suite not in SUITES:
        raise UsageError(f"unknown suite {cfg.suite!r}; choose from {', '.join(SUITES)}")
    cfg.pde, cfg.law = SUITES[cfg.suite]
    seeds = list(range(cfg.seeds))
    runs, agg, chosen = run_bench(cfg, seeds)
    os.makedirs(cfg.out, exist_ok=True)
    write_csv(os.path.join(cfg.out, "bench.csv"), BENCH_HEADER, agg)
    write_csv(os.path.join(cfg.out, "bench_runs.csv"), BENCH_HEADER, runs)
    write_csv(os.path.join(cfg.out, "penalty_lambda.csv"), ["seed", "lambda"],
              [{"seed": s, "lambda": lam} for s, lam in sorted(chosen.items())])
    _write_resolved(cfg, cfg.out)
    for r in agg:
        print(f"{r['method']:<11} rel_l2 {r['rel_l2_mean']:.4e} +- {r['rel_l2_std']:.2e}  "
              f"cons_err {r['cons_err_abs']:.3e}")
    return 0


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adacorr", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate train/test datasets")
    g.add_argument("--config")
    g.add_argument("--pde", choices=["te2d", "cac2d", "lse1d", "nls1d"])
    g.add_argument("--law", choices=["mass", "norm"])
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--res", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--rollout-steps", type=int)
    g.add_argument("--paper-dt", action="store_const", const=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint with rollout")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--steps", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="compare all methods on one suite")
    b.add_argument("--config")
    b.add_argument("--suite", required=True)
    b.add_argument("--seeds", type=int, default=3)
    b.add_argument("--out")
    b.add_argument("--n-train", type=int)
    b.add_argument("--n-test", type=int)
    b.add_argument("--epochs", type=int)
    b.add_argument("--res", type=int)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="penalty-weight sweep")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--lambdas")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    extra = {}
    if args.command == "bench":
        extra = {"suite": args.suite, "seeds": args.seeds}
        del args.suite, args.seeds
    try:
        cfg = _resolve(args, args.command)
        for k, v in extra.items():
            setattr(cfg, k, v)
        return args.func(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptDataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, SolverInstability, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
