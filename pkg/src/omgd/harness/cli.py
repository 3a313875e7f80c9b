"""Command-line entry point: ``omgd {synth,decompose,rates,masks,train}``.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..masks import MaskSet, generate_disjoint_masks, generate_traversal
from ..objectives import build_layered_model, make_layered_dataset
from ..optimizer import NonFiniteIterate
from ..schedules import Constant
from .config import PRESETS, ConfigError, load_experiment, parse_int_list, resolve_output_dir
from .runner import RunAbort, rates_for_paths, run_experiment

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _experiment_overrides(args) -> dict:
    run = {"T": args.T, "seeds": args.seeds, "estimators": args.estimators,
           "keep_ratio": args.keep_ratio, "warmup": args.warmup}
    over = {"run": run, "output": {"dir": args.out, "workers": args.workers}}
    if getattr(args, "decompose", False):
        over["analysis"] = {"decompose": "true"}
    return over


def cmd_synth(args) -> int:
    cfg = load_experiment(args.preset, args.config, _experiment_overrides(args))
    manifest = run_experiment(cfg)
    print(f"wrote {len(manifest['runs'])} traces to {cfg.output_dir} (config {manifest['config_hash'][:12]})")
    rates = Path(cfg.output_dir) / "rates.json"
    if rates.exists():
        for rep in json.loads(rates.read_text()):
            if rep.get("slope") is not None:
                print(f"  {rep['estimator']:<12} {rep['column']:<13} slope {rep['slope']:+.3f} "
                      f"(se {rep['stderr']:.3f}, {rep['seeds']} seeds)")
    return EXIT_OK


def cmd_decompose(args) -> int:
    args.decompose = True
    return cmd_synth(args)


def cmd_rates(args) -> int:
    paths = sorted({p for pattern in args.traces for p in glob.glob(pattern)})
    if not paths:
        raise ConfigError(f"no trace files match {args.traces}")
    window = tuple(float(v) for v in args.window.split(",")) if args.window else None
    columns = tuple(args.columns.split(",")) if args.columns else ("theta_err_sq",)
    reports = rates_for_paths(paths, window, columns)
    text = json.dumps(reports, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_masks(args) -> int:
    if args.check:
        ms = MaskSet.from_text(Path(args.check).read_text())
        print(ms.to_text(), end="")
        ok = ms.coverage_ok()
        print("sum OK" if ok else "sum FAIL")
        return EXIT_OK if ok else EXIT_VALIDATION
    pinned = parse_int_list(args.pinned) if args.pinned else []
    rng = np.random.default_rng(args.seed)
    ms = generate_disjoint_masks(args.d, args.M, pinned, rng)
    if args.save:
        Path(args.save).write_text(ms.to_text())
    print(ms.to_text(), end="")
    print("sum OK" if ms.coverage_ok() else "sum FAIL")
    if args.traversal:
        print(generate_traversal(args.M, args.traversal, rng).to_text(), end="")
    return EXIT_OK


def _write_period_log(path, log):
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "start_step", "active", "reset", "leftover"])
        for rec in log:
            w.writerow([rec.period, rec.start_step, " ".join(map(str, rec.active)), int(rec.reset), rec.leftover])


def _train_once(args, gamma, period, seed, policy):
    from ..lisa import lisa_wor_train

    model = build_layered_model(args.layers, args.width, seed=args.model_seed, input_dim=args.input_dim)
    X, y = make_layered_dataset(args.samples, args.input_dim, seed=args.data_seed)
    T = args.steps if args.steps else args.epochs * args.samples
    return lisa_wor_train(model, X, y, gamma, period, T, Constant(args.lr), seed=seed, unit=args.unit,
                          policy=policy)


def cmd_train(args) -> int:
    preset = PRESETS.get(args.preset, {}).get("train", {}) if args.preset else {}
    for key, val in preset.items():
        if getattr(args, key, None) in (None, ""):
            setattr(args, key, type_for(key)(val))
    for key, default in TRAIN_DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, default)
    out = resolve_output_dir(args.out or PRESETS.get(args.preset, {}).get("output", {}).get("dir", "runs/train"))
    out.mkdir(parents=True, exist_ok=True)
    gammas = parse_int_list(args.gammas) if args.gammas else [args.gamma]
    periods = parse_int_list(args.periods) if args.periods else [args.period]
    seeds = parse_int_list(args.seeds) if args.seeds else [args.seed]
    rows = []
    for gamma in gammas:
        for period in periods:
            finals = {"wor": [], "iid": []}
            for seed in seeds:
                for policy in ("wor",) + (("iid",) if args.compare else ()):
                    trace, log = _train_once(args, gamma, period, seed, policy)
                    stem = f"lisa_{policy}_L{args.layers}_g{gamma}_K{period}__seed{seed}"
                    trace.write_csv(out / f"{stem}.csv")
                    _write_period_log(out / f"{stem}.periods.csv", log)
                    finals[policy].append(float(trace["subopt"][-1]))
            row = {"gamma": gamma, "K": period, "wor_final_loss": float(np.mean(finals["wor"]))}
            if args.compare:
                row["iid_final_loss"] = float(np.mean(finals["iid"]))
                row["wor_wins"] = int(sum(a <= b for a, b in zip(finals["wor"], finals["iid"])))
            rows.append(row)
            print("  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    with open(out / "summary.csv", "w", newline="\n", encoding="ascii") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


TRAIN_DEFAULTS = {"layers": 12, "gamma": 3, "period": 1, "unit": "epochs", "seed": 0, "samples": 32,
                  "width": 4, "input_dim": 4, "epochs": 30, "lr": 0.02, "model_seed": 0, "data_seed": 0}


def type_for(key):
    return {"layers": int, "samples": int, "width": int, "input_dim": int, "epochs": int,
            "lr": float}.get(key, str)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omgd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def experiment_args(sp):
        sp.add_argument("--preset", choices=sorted(k for k in PRESETS if k != "lisa-ablation"))
        sp.add_argument("--config", help="INI-style config file")
        sp.add_argument("--T", type=int)
        sp.add_argument("--seeds", help="e.g. 0-19 or 1,5,9")
        sp.add_argument("--estimators", help="comma list of RR, RR_MASK_WOR, RR_MASK_IID, RR_PROJ, IID, IID_MASK_IID")
        sp.add_argument("--keep-ratio", dest="keep_ratio", type=float)
        sp.add_argument("--warmup", type=int)
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int)

    sp = sub.add_parser("synth", help="run the least-squares experiment")
    experiment_args(sp)
    sp.add_argument("--decompose", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("decompose", help="synth with the trajectory decomposition columns")
    experiment_args(sp)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("rates", help="fit log-log rates to trace CSVs")
    sp.add_argument("traces", nargs="+", help="trace files or glob patterns")
    sp.add_argument("--window", help="t_lo,t_hi (default: last two decades)")
    sp.add_argument("--columns", help="comma list of trace columns to fit")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rates)

    sp = sub.add_parser("masks", help="generate or verify a mask set")
    sp.add_argument("--d", type=int, default=6)
    sp.add_argument("--M", type=int, default=2)
    sp.add_argument("--pinned", default="")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--traversal", type=int, metavar="N", help="also print a traversal over N samples")
    sp.add_argument("--save")
    sp.add_argument("--check", help="verify the coverage sum of a saved mask file")
    sp.set_defaults(func=cmd_masks)

    sp = sub.add_parser("train", help="layer-freezing schedule on a small layered model")
    sp.add_argument("--preset", choices=["lisa-ablation"])
    sp.add_argument("--layers", type=int)
    sp.add_argument("--gamma", type=int)
    sp.add_argument("--period", type=int)
    sp.add_argument("--unit", choices=["epochs", "steps"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--seeds")
    sp.add_argument("--gammas")
    sp.add_argument("--periods")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--input-dim", dest="input_dim", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--model-seed", dest="model_seed", type=int)
    sp.add_argument("--data-seed", dest="data_seed", type=int)
    sp.add_argument("--compare", action="store_true", help="also run the independent-period variant")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RunAbort, NonFiniteIterate, ArithmeticError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
