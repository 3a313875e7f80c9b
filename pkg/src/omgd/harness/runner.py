"""Execute experiment configs: one trace per (estimator, seed), then a manifest."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__
from ..analysis import (
    cancellation_tolerance,
    cycle_cancellation_residual,
    fit_rate,
    lemma1_bound_check,
    lemma1_constants_for,
    prop45_variance_check,
)
from .._rng import spawn_streams
from ..objectives import synth_regression
from ..optimizer import Estimator, NonFiniteIterate, RunConfig, default_checkpoints, omgd_cycles, run
from ..trace import RunTrace
from .config import ExperimentConfig

log = logging.getLogger(__name__)


class RunAbort(RuntimeError):
    pass


def trace_filename(label: str, seed: int) -> str:
    return f"{label}__seed{seed}.csv"


def group_label(path) -> str:
    stem = Path(path).stem
    return stem.split("__seed")[0] if "__seed" in stem else stem


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _run_one(args):
    problem, schedule, est_dict, seed, T, warmup, ck, theta0, decompose, path = args
    est = Estimator(est_dict["kind"], est_dict["keep_ratio"], est_dict["M"], tuple(est_dict["pinned"]))
    cfg = RunConfig(est, schedule, T, theta0=theta0, seed=seed, checkpoints=ck, warmup=warmup,
                    decompose=decompose)
    start = _now()
    partial = Path(str(path) + ".partial")
    try:
        trace = run(problem, cfg)
    except NonFiniteIterate as exc:
        exc.trace.write_csv(partial)
        return {"estimator": est.label, "seed": seed, "start": start, "end": _now(),
                "path": str(partial), "error": str(exc)}
    trace.write_csv(partial)
    os.replace(partial, path)
    entry = {"estimator": est.label, "seed": seed, "start": start, "end": _now(), "path": str(path),
             "partial_final_cycle": trace.partial_final_cycle}
    if decompose and trace.reconstruction is not None and len(trace.reconstruction):
        err = np.sqrt(trace["theta_err_sq"])
        entry["max_reconstruction_ratio"] = float(np.max(trace.reconstruction / (1.0 + err)))
    return entry


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every (estimator, seed) pair; write traces, ``manifest.json`` and optional reports."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    problem = synth_regression(cfg.dataset)
    schedule = cfg.schedule.build(problem.lambda_min)
    ck = default_checkpoints(cfg.T, cfg.checkpoints)
    theta0 = np.full(problem.dim, cfg.theta0)
    jobs = [(problem, schedule, est.as_dict(), seed, cfg.T, cfg.warmup, ck, theta0, cfg.decompose,
             out / trace_filename(est.label, seed))
            for est in cfg.estimators for seed in cfg.seeds]
    log.info("running %d jobs into %s", len(jobs), out)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            entries = list(pool.map(_run_one, jobs))
    else:
        entries = [_run_one(j) for j in jobs]
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.semantic_dict(),
        "software_version": __version__,
        "lambda_min": problem.lambda_min,
        "lambda_max": problem.lambda_max,
        "runs": entries,
    }
    errors = [e for e in entries if "error" in e]
    if not errors and cfg.rates:
        reports = rates_for_paths([e["path"] for e in entries], columns=_rate_columns(cfg))
        (out / "rates.json").write_text(json.dumps(reports, indent=2) + "\n")
    if not errors and cfg.lemma_checks:
        (out / "lemma_report.json").write_text(json.dumps(lemma_report(cfg, problem), indent=2) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if errors:
        raise RunAbort("; ".join(f"{e['estimator']} seed {e['seed']}: {e['error']}" for e in errors))
    return manifest


def _rate_columns(cfg):
    return ("theta_err_sq", "decay_sq", "reshuffle_sq", "compress_sq") if cfg.decompose else ("theta_err_sq",)


def rates_for_paths(paths, window=None, columns=("theta_err_sq",)) -> list:
    """Group trace files by estimator label and fit one rate per group and column."""
    groups: dict = {}
    for p in sorted(map(str, paths)):
        groups.setdefault(group_label(p), []).append(RunTrace.read_csv(p))
    reports = []
    for label, traces in groups.items():
        for col in columns:
            if col != "theta_err_sq" and not traces[0].has_decomposition:
                continue
            vals = np.array([tr[col] for tr in traces])
            if col != "theta_err_sq" and np.all(vals == 0):
                reports.append({"estimator": label, "column": col, "slope": None,
                                "note": "identically zero", "seeds": len(traces)})
                continue
            reports.append(fit_rate(traces, window, column=col, estimator=label).as_dict())
    return reports


def lemma_report(cfg: ExperimentConfig, problem) -> dict:
    """Cycle-cancellation, cumulative-error and iid-mask checks on the config's problem."""
    N, d = problem.n_samples, problem.dim
    entries = []
    for est in cfg.estimators:
        for seed in cfg.seeds:
            streams = spawn_streams(seed)
            if est.kind.value == "RR_MASK_WOR":
                M = est.M
                cycles_iter = omgd_cycles(d, M, N, est.pinned, streams["masks"], streams["order"])
                cycles = [next(cycles_iter) for _ in range(4)]
                theta = problem.theta_star + streams["compress"].standard_normal(d)
                res = [cycle_cancellation_residual(ms, tr, problem, theta) for ms, tr in cycles]
                tol = max(cancellation_tolerance(ms, tr, problem, theta) for ms, tr in cycles)
                etas = 0.05 / (np.arange(4 * M * N) + 1.0)
                C, Phi, _ = lemma1_constants_for(problem, M, theta, rng=seed)
                checks = lemma1_bound_check(problem, cycles, theta, etas, 0, range(1, 3 * M * N + 1), C, Phi)
                entries.append({"estimator": est.label, "seed": seed, "max_cancellation_residual": max(res),
                                "cancellation_tolerance": tol, "cancellation_ok": max(res) <= tol,
                                "lemma_windows": len(checks), "lemma_ok": all(c.holds for c in checks),
                                "max_lhs_over_rhs": max(c.lhs / c.rhs for c in checks)})
            elif est.kind.value == "RR_MASK_IID":
                theta = problem.theta_star + streams["compress"].standard_normal(d)
                etas = 0.05 / (np.arange(N) + 1.0)
                chk = prop45_variance_check(problem, est.keep_ratio, etas, theta, 2000, rng=seed)
                entries.append({"estimator": est.label, "seed": seed, "lhs_hat": chk.lhs_hat,
                                "stderr": chk.stderr, "rhs": chk.rhs, "variance_bound_ok": chk.holds})
    return {"checks": entries}
