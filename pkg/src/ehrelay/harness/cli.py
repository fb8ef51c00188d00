"""Command line entry point.

  ehrelay run       --config FILE [--seed N] [--out DIR] [--format csv|json]
  ehrelay sweep     --config FILE ...
  ehrelay oracle    --config FILE ...   exact-model checks on a small instance
  ehrelay solve-mdp --config FILE ...   centralized optimal policy by relative value iteration

Exit codes: 0 success, 1 config error, 2 runtime error, 3 instance too large for the exact solver.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..exact import (KernelTooLarge, build_kernel, check_size, exact_gradient, little_delay, policy_kernel,
                     rvi_solve, deterministic_policy_matrix, evaluate_policy)
from ..policy import PolicyParams
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import RunInterrupted, run_experiment
from .export import export

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SIZE = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ehrelay", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "simulate the configured controllers at the base point"),
                        ("sweep", "simulate every sweep point"),
                        ("oracle", "exact-model checks: kernel, average reward, gradient"),
                        ("solve-mdp", "optimal centralized policy by relative value iteration")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, action="append", help="seed(s), overrides the config list")
        p.add_argument("--out", help="output directory, overrides output.path")
        p.add_argument("--format", choices=("csv", "json"), help="export format, overrides output.format")
        if name in ("run", "sweep"):
            p.add_argument("--checkpoint", help="directory for resumable run checkpoints")
            p.add_argument("--stop-after", type=int, help="save a checkpoint and stop after this many slots")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed:
        cfg = replace(cfg, seeds=tuple(args.seed))
    if args.out:
        cfg = replace(cfg, out_path=args.out)
    if args.format:
        cfg = replace(cfg, out_format=args.format)
    return cfg


def cmd_simulate(cfg: ExperimentConfig, args, sweep: bool) -> int:
    points = cfg.points() if sweep else [(None, None)]
    if "mdp-optimal" in cfg.controllers:
        for axis, value in points:
            check_size(cfg.at_point(axis, value).params, cfg.channel.num_bins, cfg.size_cap)
    try:
        series = run_experiment(cfg, points, args.checkpoint, args.stop_after)
    except RunInterrupted as exc:
        print(exc)
        return EXIT_OK
    paths = export(series, cfg, cfg.out_path, cfg.out_format)
    failed = [s for s in series if s.error]
    for s in failed:
        print(f"run failed: {s.controller} {s.axis}={s.value} seed {s.seed}: {s.error}", file=sys.stderr)
    print(f"wrote {len(paths)} files to {cfg.out_path}")
    return EXIT_RUNTIME if failed and len(failed) == len(series) else EXIT_OK


def cmd_oracle(cfg: ExperimentConfig) -> int:
    params = cfg.params
    check_size(params, cfg.channel.num_bins, cfg.size_cap)
    kernel = build_kernel(params, cfg.channel, cfg.anchor_for(params), cfg.size_cap)
    T_err = 0.0
    for s in range(kernel.S):
        for a in np.flatnonzero(kernel.feasible[s]):
            T_err = max(T_err, abs(kernel.row(s, int(a)).sum() - 1.0))
    theta = PolicyParams.for_system(params, cfg.channel.num_bins)
    ev = policy_kernel(kernel, theta)
    grad = exact_gradient(kernel, theta, ev)
    opt = rvi_solve(kernel)
    opt_ev = evaluate_policy(kernel, deterministic_policy_matrix(kernel, lambda s: int(opt.policy[s])))
    report = {
        "states": kernel.S, "joint_actions": kernel.A,
        "max_row_sum_error": T_err,
        "uniform_policy": {"average_reward": ev.average_reward, "mean_occupancy": ev.mean_occupancy,
                           "mean_cycle_length": ev.mean_cycle_length,
                           "gradient_norm": float(np.linalg.norm(grad))},
        "optimal": {"average_reward": opt.gain, "mean_occupancy": opt_ev.mean_occupancy,
                    "delay_ms": little_delay(opt_ev.mean_occupancy, params.mean_arrival)[1]
                    if params.mean_arrival > 0 else None,
                    "iterations": opt.iterations},
    }
    _write_json(cfg, "oracle.json", report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_solve(cfg: ExperimentConfig) -> int:
    params = cfg.params
    check_size(params, cfg.channel.num_bins, cfg.size_cap)
    kernel = build_kernel(params, cfg.channel, cfg.anchor_for(params), cfg.size_cap)
    res = rvi_solve(kernel)
    ev = evaluate_policy(kernel, deterministic_policy_matrix(kernel, lambda s: int(res.policy[s])))
    out = Path(cfg.out_path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mdp_policy.csv", "w") as fh:
        nb = 2 * params.num_relays
        fh.write(",".join(["state", "buffer"] + [f"bin{i}" for i in range(nb)]
                          + [f"battery{k}" for k in range(params.num_relays)]
                          + [f"action{k}" for k in range(params.num_relays)]) + "\n")
        for s in range(kernel.S):
            row = [s, int(kernel.b_of[s]), *kernel.cbins[kernel.c_of[s]].tolist(),
                   *kernel.evals[kernel.e_idx[s]].tolist(), *kernel.actions[res.policy[s]].tolist()]
            fh.write(",".join(str(v) for v in row) + "\n")
    report = {"average_reward": res.gain, "mean_occupancy": ev.mean_occupancy, "iterations": res.iterations,
              "span": res.span}
    _write_json(cfg, "mdp.json", report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _write_json(cfg: ExperimentConfig, name: str, obj) -> None:
    out = Path(cfg.out_path)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(obj, indent=2) + "\n")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command in ("run", "sweep"):
            return cmd_simulate(cfg, args, args.command == "sweep")
        if args.command == "oracle":
            return cmd_oracle(cfg)
        return cmd_solve(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KernelTooLarge as exc:
        print(f"instance too large: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
