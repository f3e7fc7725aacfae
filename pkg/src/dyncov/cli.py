"""Command-line interface: ``dyncov {simulate,fit,tune,evaluate,classify} --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .estimation import fit
from .exceptions import ConfigError, DataError, DyncovError
from .io import (
    OutputSet,
    covariances_to_csv,
    read_estimate,
    read_json,
    read_samples,
    read_truth,
    write_estimate,
    write_samples,
    write_truth,
)
from .kernels import basis_for
from .metrics import avg_log_euclidean, dist_squared, log_euclidean_errors
from .simulation import classify_blocks, make_ground_truth, sample_gaussian, two_task_design
from .tuning import reference_gamma, tune

log = logging.getLogger("dyncov")

COMMANDS = ("simulate", "fit", "tune", "evaluate", "classify")
THREADS_ENV = "DYNCOV_THREADS"


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def _threads(args, cfg) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return n
    return int(cfg.get("threads", 1))


def _output_dir(args, cfg) -> Path:
    out = args.output_dir or cfg.get("output_dir")
    if not out:
        raise ConfigError("no output directory: pass --output-dir or set output_dir in the config")
    return Path(out)


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


def _use_qr(args):
    return True if args.use_qr else None


def _gamma_scale(cfg, samples, K, kernel, delta) -> float:
    if cfg.get("gamma_mode", "absolute") == "reference":
        return reference_gamma(samples, K, kernel, delta)
    return 1.0


def _constraints(cfg, samples):
    c = cfg["constraints"]
    kernel = cfgmod.kernel_spec(c.get("kernel"))
    scale = _gamma_scale(cfg, samples, c["K"], kernel, c.get("delta", 1e-5))
    return cfgmod.constraint_config(c, scale), scale


def cmd_simulate(args, cfg):
    seed = _seed(args, cfg)
    rng = np.random.default_rng(seed)
    fmt = cfg.get("format", "binary")
    ext = "dcov" if fmt == "binary" else "csv"
    with OutputSet(_output_dir(args, cfg)) as out:
        if "truth" in cfg:
            truth = make_ground_truth(**cfg["truth"], rng=rng, seed=seed)
            samples = sample_gaussian(truth, cfg["N"], rng)
            extra = {"seed": seed, "N": cfg["N"]}
            if "kernel" in cfg:
                basis = basis_for(cfgmod.kernel_spec(cfg["kernel"]), truth.J)
                extra["gamma_star"] = truth.gamma_star(basis)
                extra["kernel"] = cfgmod.kernel_spec(cfg["kernel"]).to_dict()
            write_truth(out, truth, extra)
            write_samples(out, f"samples.{ext}", samples, fmt)
        else:
            truth, windows = two_task_design(**cfg["two_task"], rng=rng)
            train = sample_gaussian(truth, cfg["N"], rng)
            test = sample_gaussian(truth, cfg.get("N_test", cfg["N"]), rng)
            write_truth(out, truth, {"seed": seed, "N": cfg["N"], "N_test": test.N})
            write_samples(out, f"train.{ext}", train, fmt)
            write_samples(out, f"test.{ext}", test, fmt)
            out.write_json("windows.json", windows)
    return 0


def _write_fit(out, est, rep, constraints, opts, gamma_scale, prefix=""):
    write_estimate(out, est, prefix)
    report = {
        "report": rep.to_dict(),
        "constraints": constraints.to_dict(),
        "options": dataclasses.asdict(opts),
        "gamma_scale": gamma_scale,
    }
    out.write_json(f"{prefix}report.json", report)
    header = ["iteration", "objective"] + (["dist_squared"] if rep.dist_trace is not None else [])
    rows = []
    for i, f in enumerate(rep.objective_trace):
        row = [i, f]
        if rep.dist_trace is not None:
            row.append(rep.dist_trace[i])
        rows.append(row)
    out.write_text(f"{prefix}trace.csv", _csv(header, rows))


def cmd_fit(args, cfg):
    samples = read_samples(cfg["samples"])
    constraints, scale = _constraints(cfg, samples)
    opts = cfgmod.fit_options(cfg.get("options"), _use_qr(args), args.seed)
    truth = read_truth(cfg["truth_dir"]).Z if "truth_dir" in cfg else None
    out_dir = _output_dir(args, cfg)
    est, rep = fit(samples, constraints, opts, truth=truth)
    with OutputSet(out_dir) as out:
        _write_fit(out, est, rep, constraints, opts, scale)
    return 0


def cmd_tune(args, cfg):
    samples = read_samples(cfg["samples"])
    grid_d = cfg["grid"]
    base_d = dict(cfg.get("constraints", {}))
    base_d.setdefault("K", sorted(grid_d["K_values"])[(len(grid_d["K_values"]) - 1) // 2])
    base_d.setdefault("s", grid_d["s_values"][0])
    base_d.setdefault("gamma", 1.0)
    kernel = cfgmod.kernel_spec(base_d.get("kernel"))
    scale = _gamma_scale(cfg, samples, base_d["K"], kernel, base_d.get("delta", 1e-5))
    grid = cfgmod.tuning_grid(grid_d, scale)
    base = cfgmod.constraint_config({**base_d, "gamma": grid.gamma_values[0]})
    opts = cfgmod.fit_options(cfg.get("options"), _use_qr(args))
    seed = _seed(args, cfg)
    out_dir = _output_dir(args, cfg)
    result = tune(samples, grid, base, opts, seed=seed, n_jobs=_threads(args, cfg))
    refit = None
    if cfg.get("refit", False):
        chosen = result.config(base)
        refit = (chosen, *fit(samples, chosen, opts))
    with OutputSet(out_dir) as out:
        out.write_json(
            "selected.json",
            {"selected": result.selected(), "grid": grid.to_dict(), "gamma_scale": scale, "seed": seed},
        )
        out.write_text(
            "stage1.csv",
            _csv(["s", "K", "gamma", "l", "bic", "iterations"],
                 [[r["s"], r["K"], r["gamma"], r["l"], r["bic"], r["iterations"]] for r in result.stage1]),
        )
        nf = grid.folds
        out.write_text(
            "stage2.csv",
            _csv(["gamma", "l", "mean_loglik"] + [f"fold{i + 1}" for i in range(nf)],
                 [[r["gamma"], r["l"], r["mean_loglik"], *r["fold_loglik"]] for r in result.stage2]),
        )
        if refit is not None:
            chosen, est, rep = refit
            _write_fit(out, est, rep, chosen, opts, scale)
    return 0


def cmd_evaluate(args, cfg):
    est = read_estimate(cfg["estimate_dir"])
    truth = read_truth(cfg["truth_dir"])
    if est.V.shape != truth.Vstar.shape or est.A.shape != truth.Astar.shape:
        raise DataError(f"estimate shapes {est.V.shape}, {est.A.shape} do not match truth")
    cutoff = cfg.get("cutoff", 1e-5)
    Sig, Sig_star = est.covariances(), truth.covariances()
    per_j = log_euclidean_errors(Sig, Sig_star, cutoff)
    metrics = {
        "dist_squared": dist_squared(est, truth.Z),
        "avg_log_euclidean": avg_log_euclidean(Sig, Sig_star, cutoff),
        "cutoff": cutoff,
    }
    with OutputSet(_output_dir(args, cfg)) as out:
        out.write_json("metrics.json", metrics)
        out.write_text("per_j.csv", _csv(["j", "log_euclidean"], [[j, e] for j, e in enumerate(per_j)]))
        out.write_text("covariances.csv", covariances_to_csv(Sig))
    return 0


def cmd_classify(args, cfg):
    train = read_samples(cfg["train_samples"])
    test = read_samples(cfg["test_samples"])
    if train.J != test.J or train.P != test.P:
        raise DataError("train and test samples differ in J or P")
    windows = cfg["windows"] if "windows" in cfg else read_json(cfg["windows_file"])
    windows = {name: [tuple(w) for w in ws] for name, ws in windows.items()}
    for name, ws in windows.items():
        for start, stop in ws:
            if not 0 <= start < stop <= test.J:
                raise DataError(f"window {(start, stop)} of task {name!r} lies outside 0..{test.J}")
    report = None
    if "estimate_dir" in cfg:
        est = read_estimate(cfg["estimate_dir"])
    else:
        constraints, _ = _constraints(cfg, train)
        opts = cfgmod.fit_options(cfg.get("options"), _use_qr(args), args.seed)
        est, report = fit(train, constraints, opts)
    if est.P != test.P or est.J != test.J:
        raise DataError("estimate does not match the test samples in P or J")
    rows = classify_blocks(test, est.covariances(), windows)
    names = list(windows)
    correct = [r["predicted"] == r["task"] for r in rows]
    per_task = {
        name: float(np.mean([c for c, r in zip(correct, rows) if r["task"] == name])) for name in names
    }
    summary = {"accuracy": float(np.mean(correct)), "n_blocks": len(rows), "per_task": per_task}
    if report is not None:
        summary["fit"] = report.to_dict()
    with OutputSet(_output_dir(args, cfg)) as out:
        out.write_text(
            "predictions.csv",
            _csv(["subject", "task", "window", "start", "predicted"] + [f"score_{n}" for n in names],
                 [[r["subject"], r["task"], r["window"], r["start"], r["predicted"], *r["scores"]] for r in rows]),
        )
        out.write_json("accuracy.json", summary)
    return 0


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "classify": cmd_classify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyncov", description="Structured dynamic covariance estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV})")
        p.add_argument("--use-qr", action="store_true", help="orthonormalize V after every projection")
        p.add_argument("--output-dir", help="override the configured output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg = cfgmod.load(args.config, args.command)
        _threads(args, cfg)
        return HANDLERS[args.command](args, cfg)
    except DyncovError as exc:
        code, msg = exc.exit_code, str(exc)
    except OSError as exc:
        code, msg = DataError.exit_code, str(exc)
    print(f"dyncov {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
