"""Experiment configuration: INI-style files, presets, and canonical hashing.

Precedence is command-line flags > config file > preset > built-in defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..objectives import DatasetSpec
from ..optimizer import Estimator, Kind
from ..schedules import Constant, Diminishing, Staged

OUTPUT_ROOT_ENV = "OMGD_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "dataset": {"n": "1000", "d": "10", "noise_sd": "1.0", "seed": "0"},
    "run": {"T": "1000000", "warmup": "100", "seeds": "0-19",
            "estimators": "RR, RR_MASK_WOR, RR_MASK_IID, RR_PROJ, IID",
            "keep_ratio": "0.5", "pinned": "", "checkpoints": "64", "theta0": "0"},
    "schedule": {"kind": "diminishing", "c0_lambda": "3.0", "t_offset": "100"},
    "analysis": {"decompose": "false", "rates": "true", "lemma_checks": "false"},
    "output": {"dir": "runs", "workers": "1"},
}

PRESETS = {
    "figure2": {
        "run": {"T": "1000000", "warmup": "100", "keep_ratio": "0.5", "seeds": "0-19",
                "estimators": "RR, RR_MASK_WOR, RR_MASK_IID, RR_PROJ"},
        "dataset": {"n": "1000", "d": "10", "noise_sd": "1.0"},
        "analysis": {"decompose": "true", "rates": "true"},
        "output": {"dir": "runs/figure2"},
    },
    "lemma-suite": {
        "dataset": {"n": "8", "d": "6", "noise_sd": "1.0"},
        "run": {"T": "20000", "warmup": "0", "keep_ratio": "0.5", "seeds": "0-4",
                "estimators": "RR_MASK_WOR, RR_MASK_IID", "checkpoints": "32"},
        "analysis": {"decompose": "true", "rates": "false", "lemma_checks": "true"},
        "output": {"dir": "runs/lemma-suite"},
    },
    "lisa-ablation": {
        "train": {"layers": "12", "gammas": "1,2,3,4,6", "periods": "1,2,3,5,6", "unit": "epochs",
                  "samples": "32", "width": "4", "input_dim": "4", "epochs": "30", "lr": "0.02",
                  "seeds": "0-4"},
        "output": {"dir": "runs/lisa-ablation"},
    },
}


def parse_int_list(text: str) -> list[int]:
    """``"0-3, 7"`` -> ``[0, 1, 2, 3, 7]``."""
    out = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _as_bool(text) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def merge_layers(*layers) -> dict:
    merged: dict = {}
    for layer in layers:
        for section, values in (layer or {}).items():
            merged.setdefault(section, {}).update({k: str(v) for k, v in values.items() if v is not None})
    return merged


def read_config_file(path) -> dict:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    return {s: dict(cp.items(s)) for s in cp.sections()}


def resolve_output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


@dataclass
class ScheduleSpec:
    kind: str
    params: dict

    def build(self, lambda_min: float):
        k = self.kind
        if k == "constant":
            return Constant(float(self.params["eta"]))
        if k == "diminishing":
            if "c0" in self.params:
                c0 = float(self.params["c0"])
            else:
                c0 = float(self.params.get("c0_lambda", 3.0)) / lambda_min
            return Diminishing(c0, float(self.params.get("t_offset", 1.0)))
        if k == "staged":
            stages = []
            for part in self.params["stages"].split(","):
                eta, dur = part.split(":")
                stages.append((float(eta), int(dur)))
            return Staged(tuple(stages))
        raise ConfigError(f"unknown schedule kind {k!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    estimators: list
    schedule: ScheduleSpec
    T: int
    warmup: int
    seeds: list
    checkpoints: int
    theta0: float
    output_dir: Path
    decompose: bool = False
    rates: bool = True
    lemma_checks: bool = False
    workers: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    def semantic_dict(self) -> dict:
        """Fields that determine the numerical output; excludes paths and worker counts."""
        return {
            "dataset": {"n": self.dataset.n, "d": self.dataset.d, "noise_sd": self.dataset.noise_sd,
                        "seed": self.dataset.seed},
            "estimators": [e.as_dict() for e in self.estimators],
            "schedule": {"kind": self.schedule.kind,
                         "params": {k: self.schedule.params[k] for k in sorted(self.schedule.params)}},
            "T": self.T, "warmup": self.warmup, "seeds": list(self.seeds),
            "checkpoints": self.checkpoints, "theta0": self.theta0,
            "decompose": self.decompose,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_experiment(merged: dict) -> ExperimentConfig:
    try:
        ds = merged["dataset"]
        run = merged["run"]
        sch = merged["schedule"]
        ana = merged["analysis"]
        out = merged["output"]
        dataset = DatasetSpec(int(ds["n"]), int(ds["d"]), float(ds["noise_sd"]), int(ds["seed"]))
        T = int(float(run["T"]))
        warmup = int(run["warmup"])
        seeds = parse_int_list(run["seeds"])
        r = float(run["keep_ratio"])
        pinned = parse_int_list(run.get("pinned", ""))
        names = [s.strip().upper() for s in run["estimators"].split(",") if s.strip()]
        estimators = [Estimator.make(Kind(n), r if Kind(n) not in (Kind.RR, Kind.IID) else 1.0,
                                     pinned=pinned if Kind(n) is Kind.RR_MASK_WOR else ())
                      for n in names]
        if "M" in run:
            estimators = [Estimator(e.kind, e.keep_ratio, int(run["M"]), e.pinned)
                          if e.kind is Kind.RR_MASK_WOR else e for e in estimators]
        sched_params = {k: v for k, v in sch.items() if k != "kind"}
        cfg = ExperimentConfig(
            dataset=dataset, estimators=estimators, schedule=ScheduleSpec(sch["kind"], sched_params),
            T=T, warmup=warmup, seeds=seeds, checkpoints=int(run["checkpoints"]),
            theta0=float(run["theta0"]), output_dir=resolve_output_dir(out["dir"]),
            decompose=_as_bool(ana["decompose"]), rates=_as_bool(ana["rates"]),
            lemma_checks=_as_bool(ana.get("lemma_checks", "false")), workers=int(out["workers"]),
            raw=merged)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if T < 1:
        raise ConfigError("T must be at least 1")
    if warmup < 0:
        raise ConfigError("warmup must be non-negative")
    if not seeds:
        raise ConfigError("seed list is empty")
    if not estimators:
        raise ConfigError("estimator list is empty")
    if cfg.checkpoints < 4:
        raise ConfigError("need at least 4 checkpoints")
    for est in estimators:
        try:
            est.validate(dataset.d)
        except ValueError as exc:
            raise ConfigError(f"{est.label}: {exc}") from exc
    return cfg


def load_experiment(preset: str | None = None, path=None, overrides: dict | None = None) -> ExperimentConfig:
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    layers = [DEFAULTS, PRESETS.get(preset)]
    if path is not None:
        layers.append(read_config_file(path))
    layers.append(overrides)
    return build_experiment(merge_layers(*layers))
