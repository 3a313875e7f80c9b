"""SGD under the estimator families: plain/iid sampling, reshuffling, and
masked or projected gradients.

All runs share one update ``theta_{t+1} = theta_t - eta_t g_t``; estimators
differ only in how the sample index and the compression of the sample
gradient are drawn. Draws come from per-purpose streams (see ``_rng``), so
two estimators that differ only in their compressor see the same data order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from ._rng import spawn_streams
from .masks import (
    generate_disjoint_masks,
    generate_traversal,
    sample_iid_masks,
    sample_stiefel_matrices,
    support_size,
)
from .objectives import LeastSquaresProblem
from .schedules import ScheduleExhausted
from .trace import RunTrace

CHUNK = 1 << 16


class Kind(str, enum.Enum):
    IID = "IID"
    IID_MASK_IID = "IID_MASK_IID"
    RR = "RR"
    RR_MASK_WOR = "RR_MASK_WOR"
    RR_MASK_IID = "RR_MASK_IID"
    RR_PROJ = "RR_PROJ"


_RESHUFFLED = {Kind.RR, Kind.RR_MASK_WOR, Kind.RR_MASK_IID, Kind.RR_PROJ}


@dataclass(frozen=True)
class Estimator:
    kind: Kind
    keep_ratio: float = 1.0
    M: int = 1
    pinned: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "pinned", tuple(sorted(int(p) for p in self.pinned)))
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError(f"keep ratio must lie in (0, 1], got {self.keep_ratio}")
        if self.M < 1:
            raise ValueError("M must be at least 1")

    @classmethod
    def make(cls, kind, keep_ratio: float = 1.0, M: int | None = None, pinned=()) -> "Estimator":
        """Build an estimator; for ``RR_MASK_WOR`` the mask count defaults to ``ceil(1/r)``."""
        kind = Kind(kind)
        if M is None:
            M = math.ceil(1.0 / keep_ratio - 1e-12) if kind is Kind.RR_MASK_WOR else 1
        return cls(kind, keep_ratio, M, pinned)

    @property
    def label(self) -> str:
        return self.kind.value

    def validate(self, d: int) -> None:
        if self.kind in (Kind.RR_MASK_IID, Kind.IID_MASK_IID, Kind.RR_PROJ):
            support_size(d, self.keep_ratio)
        if self.kind is Kind.RR_MASK_WOR:
            free = d - len(self.pinned)
            if self.M > 1 and self.M > free:
                raise ValueError(f"M={self.M} exceeds the {free} free coordinates")
            if any(p < 0 or p >= d for p in self.pinned):
                raise ValueError("pinned coordinate out of range")

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "keep_ratio": self.keep_ratio, "M": self.M,
                "pinned": list(self.pinned)}


def default_checkpoints(T: int, count: int = 64, start: int = 100) -> np.ndarray:
    """Geometrically spaced checkpoints from ``start`` (or 1 for short runs) to ``T``."""
    lo = start if T > start else 1
    pts = np.unique(np.round(np.geomspace(lo, T, count)).astype(np.int64))
    return pts[(pts >= 0) & (pts <= T)]


@dataclass
class RunConfig:
    estimator: Estimator
    schedule: object
    T: int
    theta0: np.ndarray | None = None
    seed: int = 0
    checkpoints: np.ndarray | None = None
    warmup: int = 0
    decompose: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.warmup < 0:
            raise ValueError("warm-up must be non-negative")
        if self.checkpoints is None:
            self.checkpoints = default_checkpoints(self.T)
        ck = np.asarray(self.checkpoints, dtype=np.int64)
        if ck.size and (ck.min() < 0 or ck.max() > self.T):
            raise ValueError("checkpoints must lie in [0, T]")
        if np.any(np.diff(ck) <= 0):
            raise ValueError("checkpoints must be strictly increasing")
        self.checkpoints = ck


class NonFiniteIterate(FloatingPointError):
    """Raised when the iterate leaves the finite reals; carries the trace so far."""

    def __init__(self, step: int, trace: RunTrace):
        super().__init__(f"non-finite iterate detected at step {step}")
        self.step = step
        self.trace = trace


class _Reshuffler:
    """Concatenated uniform permutations of ``range(N)``."""

    def __init__(self, rng, N):
        self.rng, self.N = rng, N
        self.buf = np.empty(0, dtype=np.int64)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        parts = []
        while n > 0:
            if self.pos == len(self.buf):
                self.buf = self.rng.permutation(self.N)
                self.pos = 0
            k = min(n, len(self.buf) - self.pos)
            parts.append(self.buf[self.pos:self.pos + k])
            self.pos += k
            n -= k
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def omgd_cycles(d: int, M: int, N: int, pinned=(), mask_rng=None, order_rng=None):
    """Endless stream of ``(MaskSet, TraversalSchedule)`` cycles, one fresh pair per cycle."""
    while True:
        maskset = generate_disjoint_masks(d, M, pinned, mask_rng)
        yield maskset, generate_traversal(M, N, order_rng)


class _Traverser:
    def __init__(self, cycles):
        self.cycles = cycles
        self.samples = np.empty(0, dtype=np.int64)
        self.masks = np.empty((0, 0))
        self.pos = 0

    def take(self, n: int):
        s_parts, m_parts = [], []
        while n > 0:
            if self.pos == len(self.samples):
                maskset, trav = next(self.cycles)
                self.samples = trav.order[:, 1]
                self.masks = maskset.masks[trav.order[:, 0]]
                self.pos = 0
            k = min(n, len(self.samples) - self.pos)
            s_parts.append(self.samples[self.pos:self.pos + k])
            m_parts.append(self.masks[self.pos:self.pos + k])
            self.pos += k
            n -= k
        return np.concatenate(s_parts), np.concatenate(m_parts)


class StepPlan:
    """Draws, chunk by chunk, the sample index and compressor of every step."""

    def __init__(self, estimator: Estimator, N: int, d: int, seed: int, warmup: int = 0):
        self.est, self.N, self.d, self.warmup = estimator, N, d, warmup
        self.streams = spawn_streams(seed)
        kind = estimator.kind
        self._warm = _Reshuffler(self.streams["warmup"], N)
        if kind is Kind.RR_MASK_WOR:
            self._trav = _Traverser(omgd_cycles(d, estimator.M, N, estimator.pinned,
                                                self.streams["masks"], self.streams["order"]))
        elif kind in _RESHUFFLED:
            self._rr = _Reshuffler(self.streams["order"], N)
        self.k = support_size(d, estimator.keep_ratio) if kind is Kind.RR_PROJ else d

    def chunk(self, t0: int, n: int) -> dict:
        d, kind = self.d, self.est.kind
        n_warm = min(max(self.warmup - t0, 0), n)
        n_main = n - n_warm
        samples = np.empty(n, dtype=np.int64)
        mode = np.zeros(n, dtype=np.int8)
        mask_row = np.full(n, -1, dtype=np.int64)
        proj_row = np.full(n, -1, dtype=np.int64)
        masks = np.zeros((1, d))
        proj = np.zeros((1, d, self.k))
        if n_warm:
            samples[:n_warm] = self._warm.take(n_warm)
        if n_main:
            main = slice(n_warm, n)
            rows = np.arange(n_main, dtype=np.int64)
            if kind is Kind.RR_MASK_WOR:
                samples[main], masks = self._trav.take(n_main)
            elif kind in _RESHUFFLED:
                samples[main] = self._rr.take(n_main)
            else:
                samples[main] = self.streams["order"].integers(0, self.N, size=n_main)
            if kind in (Kind.RR_MASK_IID, Kind.IID_MASK_IID):
                masks = sample_iid_masks(d, self.est.keep_ratio, n_main, self.streams["compress"])
            if kind in (Kind.RR_MASK_WOR, Kind.RR_MASK_IID, Kind.IID_MASK_IID):
                mode[main] = _kernel.MODE_MASK
                mask_row[main] = rows
            elif kind is Kind.RR_PROJ:
                proj = sample_stiefel_matrices(d, self.k, n_main, self.streams["compress"])
                mode[main] = _kernel.MODE_PROJ
                proj_row[main] = rows
        return {"samples": samples, "mode": mode, "masks": np.ascontiguousarray(masks),
                "mask_row": mask_row, "proj": np.ascontiguousarray(proj), "proj_row": proj_row,
                "proj_scale": 1.0 / self.est.keep_ratio}


def compress(plan_chunk: dict, s: int, grad: np.ndarray) -> np.ndarray:
    """Apply step ``s``'s compressor to a sample gradient."""
    m = plan_chunk["mode"][s]
    if m == _kernel.MODE_MASK:
        return plan_chunk["masks"][plan_chunk["mask_row"][s]] * grad
    if m == _kernel.MODE_PROJ:
        P = plan_chunk["proj"][plan_chunk["proj_row"][s]]
        return plan_chunk["proj_scale"] * (P @ (P.T @ grad))
    return grad.copy()


@dataclass
class Replay:
    """Everything needed to re-run a trajectory step by step."""

    theta0: np.ndarray
    samples: np.ndarray
    grads: np.ndarray
    etas: np.ndarray
    thetas: np.ndarray = field(repr=False)


def _partial_cycle(est: Estimator, N: int, T: int, warmup: int) -> bool:
    if est.kind is not Kind.RR_MASK_WOR:
        return False
    return max(T - warmup, 0) % (est.M * N) != 0


def _prepare(problem, cfg: RunConfig):
    cfg.estimator.validate(problem.dim)
    length = getattr(cfg.schedule, "length", None)
    if length is not None and length < cfg.T:
        raise ScheduleExhausted(f"schedule provides {length} steps but T={cfg.T}")
    theta = (np.zeros(problem.dim) if cfg.theta0 is None
             else np.array(cfg.theta0, dtype=np.float64).reshape(problem.dim))
    plan = StepPlan(cfg.estimator, problem.n_samples, problem.dim, cfg.seed, cfg.warmup)
    return theta, plan


def _finish(cfg, problem, out, n_rec, theta, recon=None) -> RunTrace:
    cols = {"theta_err_sq": out[:n_rec, 0], "grad_norm_sq": out[:n_rec, 1], "subopt": out[:n_rec, 2]}
    if cfg.decompose:
        cols.update(decay_sq=out[:n_rec, 3], reshuffle_sq=out[:n_rec, 4], compress_sq=out[:n_rec, 5])
    return RunTrace(cfg.checkpoints[:n_rec], cols, label=cfg.estimator.label, seed=cfg.seed,
                    partial_final_cycle=_partial_cycle(cfg.estimator, problem.n_samples, cfg.T, cfg.warmup),
                    theta_final=theta.copy(), reconstruction=recon)


def _run_kernel(problem: LeastSquaresProblem, cfg: RunConfig) -> RunTrace:
    theta, plan = _prepare(problem, cfg)
    d = problem.dim
    ck = cfg.checkpoints
    out = np.full((len(ck), 7), np.nan)
    decay = theta - problem.theta_star
    reshuf = np.zeros(d)
    comp = np.zeros(d)
    ck_pos = 0
    X, y, A, ts = problem.X, problem.y, problem.A, problem.theta_star
    for t0 in range(0, cfg.T, CHUNK):
        n = min(CHUNK, cfg.T - t0)
        c = plan.chunk(t0, n)
        eta = np.ascontiguousarray(cfg.schedule.etas(t0, n), dtype=np.float64)
        ck_pos, status, step = _kernel.run_chunk(
            theta, X, y, A, ts, t0, c["samples"], eta, c["mode"], c["masks"], c["mask_row"],
            c["proj"], c["proj_row"], c["proj_scale"], cfg.decompose, decay, reshuf, comp,
            ck, ck_pos, out)
        if status != _kernel.STATUS_OK:
            raise NonFiniteIterate(step, _finish(cfg, problem, out, ck_pos, theta))
    if ck_pos < len(ck) and ck[ck_pos] == cfg.T:
        _kernel._record(theta, ts, A, decay, reshuf, comp, cfg.decompose, out, ck_pos)
        ck_pos += 1
    if not np.all(np.isfinite(theta)):
        raise NonFiniteIterate(cfg.T, _finish(cfg, problem, out, ck_pos, theta))
    recon = out[:ck_pos, 6].copy() if cfg.decompose else None
    return _finish(cfg, problem, out, ck_pos, theta, recon)


def _python_record(problem, theta, out, row, decomp):
    gF = problem.full_gradient(theta)
    out[row, 1] = gF @ gF
    if hasattr(problem, "theta_star"):
        e = theta - problem.theta_star
        out[row, 0] = e @ e
        out[row, 2] = problem.suboptimality(theta)
    else:
        out[row, 2] = problem.loss(theta)
    if decomp is not None:
        dec, res, com = decomp
        out[row, 3:6] = dec @ dec, res @ res, com @ com
        out[row, 6] = np.linalg.norm(dec + res + com - (theta - problem.theta_star))


def _run_python(problem, cfg: RunConfig, record_replay: bool = False) -> RunTrace:
    """Reference loop; works for any problem exposing ``per_sample_gradient``."""
    theta, plan = _prepare(problem, cfg)
    decompose = cfg.decompose
    if decompose and not hasattr(problem, "A"):
        raise ValueError("trajectory decomposition needs a quadratic problem")
    decomp = None
    if decompose:
        decomp = (theta - problem.theta_star, np.zeros(problem.dim), np.zeros(problem.dim))
    ck = cfg.checkpoints
    out = np.full((len(ck), 7), np.nan)
    ck_pos = 0
    if record_replay:
        samples_all = np.empty(cfg.T, dtype=np.int64)
        grads_all = np.empty((cfg.T, problem.dim))
        etas_all = np.empty(cfg.T)
        thetas_all = np.empty((cfg.T + 1, problem.dim))
        theta0 = theta.copy()
    for t0 in range(0, cfg.T, CHUNK):
        n = min(CHUNK, cfg.T - t0)
        c = plan.chunk(t0, n)
        eta = cfg.schedule.etas(t0, n)
        for s in range(n):
            t = t0 + s
            recorded = ck_pos < len(ck) and ck[ck_pos] == t
            if recorded:
                _python_record(problem, theta, out, ck_pos, decomp)
                ck_pos += 1
            if (recorded or t % _kernel.FINITE_CHECK_EVERY == 0) and not np.all(np.isfinite(theta)):
                raise NonFiniteIterate(t, _finish(cfg, problem, out, ck_pos, theta))
            i = int(c["samples"][s])
            grad = problem.per_sample_gradient(theta, i)
            g = compress(c, s, grad)
            h = float(eta[s])
            if decompose:
                A = problem.A
                dec, res, com = decomp
                gF = A @ (theta - problem.theta_star)
                decomp = (dec - h * (A @ dec),
                          res - h * (A @ res) + h * (gF - grad),
                          com - h * (A @ com) + h * (grad - g))
            if record_replay:
                samples_all[t], grads_all[t], etas_all[t] = i, g, h
                thetas_all[t] = theta
            theta = theta - h * g
    if ck_pos < len(ck) and ck[ck_pos] == cfg.T:
        _python_record(problem, theta, out, ck_pos, decomp)
        ck_pos += 1
    if not np.all(np.isfinite(theta)):
        raise NonFiniteIterate(cfg.T, _finish(cfg, problem, out, ck_pos, theta))
    trace = _finish(cfg, problem, out, ck_pos, theta, out[:ck_pos, 6].copy() if decompose else None)
    if record_replay:
        thetas_all[cfg.T] = theta
        trace.meta["replay"] = Replay(theta0, samples_all, grads_all, etas_all, thetas_all)
    return trace


def run(problem, cfg: RunConfig, backend: str = "auto", record_replay: bool = False) -> RunTrace:
    """Run SGD with ``cfg.estimator``; the compiled backend serves least-squares problems."""
    if backend == "auto":
        backend = "kernel" if isinstance(problem, LeastSquaresProblem) and not record_replay else "python"
    if backend == "kernel":
        if not isinstance(problem, LeastSquaresProblem):
            raise TypeError("the compiled backend only handles LeastSquaresProblem")
        return _run_kernel(problem, cfg)
    if backend == "python":
        # divergence is detected and reported via NonFiniteIterate
        with np.errstate(over="ignore", invalid="ignore"):
            return _run_python(problem, cfg, record_replay)
    raise ValueError(f"unknown backend {backend!r}")


def omgd_run(problem, cfg: RunConfig, **kw) -> RunTrace:
    """Mask-traversal SGD: each cycle draws a fresh mask set and visits every
    (mask, sample) pair once in random order."""
    if cfg.estimator.kind is not Kind.RR_MASK_WOR:
        raise ValueError("omgd_run needs an RR_MASK_WOR estimator")
    return run(problem, cfg, **kw)


def baseline_run(problem, cfg: RunConfig, **kw) -> RunTrace:
    if cfg.estimator.kind is Kind.RR_MASK_WOR:
        raise ValueError("use omgd_run for RR_MASK_WOR")
    return run(problem, cfg, **kw)
