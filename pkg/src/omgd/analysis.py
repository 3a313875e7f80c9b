"""Structural identities and rate measurements for the estimator families."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import make_rng
from .masks import MaskSet, TraversalSchedule, sample_iid_masks
from .schedules import lemma1_constants

CANCELLATION_RTOL = 1e-9
RECONSTRUCTION_TOL = 1e-8


def _sample_grads(problem, theta) -> np.ndarray:
    if hasattr(problem, "per_sample_gradients"):
        return problem.per_sample_gradients(theta)
    return np.stack([problem.per_sample_gradient(theta, i) for i in range(problem.n_samples)])


# ---------------------------------------------------------------- cancellation

def cycle_terms(maskset: MaskSet, schedule: TraversalSchedule, problem, theta_ref) -> np.ndarray:
    """Per-step errors ``S_t * grad f(theta_ref; z_t) - grad F(theta_ref)`` over one cycle."""
    G = _sample_grads(problem, theta_ref)
    gF = problem.full_gradient(theta_ref)
    j, i = schedule.order[:, 0], schedule.order[:, 1]
    return maskset.masks[j] * G[i] - gF


def cycle_cancellation_residual(maskset: MaskSet, schedule: TraversalSchedule, problem, theta_ref) -> float:
    """Norm of the summed masked-gradient error over one full cycle (zero in exact arithmetic)."""
    return float(np.linalg.norm(cycle_terms(maskset, schedule, problem, theta_ref).sum(axis=0)))


def cancellation_tolerance(maskset: MaskSet, schedule: TraversalSchedule, problem, theta_ref) -> float:
    G = _sample_grads(problem, theta_ref)
    return CANCELLATION_RTOL * len(schedule) * float(np.max(np.linalg.norm(G, axis=1)))


# ---------------------------------------------------------- assumption fitting

@dataclass
class AssumptionEstimate:
    """Smallest ``(C1, C2)`` on the candidate grid with
    ``||grad f(theta; z) - grad F(theta)||^2 <= C1^2 + C2^2 ||grad F(theta)||^2`` on every probe."""

    C1_hat: float
    C2_hat: float
    probe_count: int
    probe_radius: float

    @property
    def frontier_value(self) -> float:
        return self.C1_hat**2 + self.C2_hat**2


C2_SQ_GRID = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 241)])
_SLACK = 1e-10


def _ray_max(alpha, beta, gamma, R):
    """Max of ``alpha s^2 + beta s + gamma`` over ``s in [0, R]`` (broadcasting)."""
    best = np.maximum(gamma, alpha * R * R + beta * R + gamma)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_v = np.where(alpha < 0, -beta / (2 * alpha), -1.0)
    inside = (s_v > 0) & (s_v < R)
    vert = alpha * s_v * s_v + beta * s_v + gamma
    return np.where(inside, np.maximum(best, vert), best)


def estimate_assumption_constants(problem, probe_count: int = 32, probe_radius: float = 1.0,
                                  rng=0, extra_points=()) -> AssumptionEstimate:
    """Fit ``(C1, C2)`` over probe rays ``theta* + s u_k``, ``s in [0, probe_radius]``.

    For the quadratic objective both sides are quadratics in ``s`` so the
    worst case along every ray is taken exactly; rays are nested in the
    radius, hence widening it can only grow the estimate. ``extra_points``
    are added as single-point probes. The pair is chosen from a fixed grid of
    ``C2^2`` values, minimizing ``C1^2 + C2^2`` over the grid.
    """
    if probe_count < 1:
        raise ValueError("need at least one probe")
    if not hasattr(problem, "A"):
        raise TypeError("assumption fitting needs a quadratic problem")
    rng = make_rng(rng)
    d = problem.dim
    U = rng.standard_normal((probe_count, d))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    X, A = problem.X, problem.A
    ts = problem.theta_star
    q = _sample_grads(problem, ts) - problem.full_gradient(ts)        # (N, d)
    r0 = problem.full_gradient(ts)                                     # (d,)
    AU = U @ A                                                         # A symmetric
    # (2 x x^T - A) u for every sample and ray: (K, N, d)
    P = 2.0 * (U @ X.T)[:, :, None] * X[None, :, :] - AU[:, None, :]
    a2 = np.einsum("knd,knd->kn", P, P)
    a1 = 2.0 * np.einsum("knd,nd->kn", P, q)
    a0 = np.einsum("nd,nd->n", q, q)[None, :]
    b2 = np.einsum("kd,kd->k", AU, AU)[:, None]
    b1 = 2.0 * (AU @ r0)[:, None]
    b0 = float(r0 @ r0)

    pts_a, pts_b = [], []
    for theta in extra_points:
        theta = np.asarray(theta, dtype=np.float64)
        gF = problem.full_gradient(theta)
        diff = _sample_grads(problem, theta) - gF
        pts_a.append(np.einsum("nd,nd->n", diff, diff))
        pts_b.append(float(gF @ gF))

    best = None
    for v in C2_SQ_GRID:
        need = _ray_max(a2 - v * b2, a1 - v * b1, a0 - v * b0, float(probe_radius)).max()
        for pa, pb in zip(pts_a, pts_b):
            need = max(need, float(np.max(pa - v * pb)))
        c1_sq = max(float(need), 0.0) * (1.0 + _SLACK)
        if best is None or c1_sq + v < best[0] + best[1]:
            best = (c1_sq, v)
    return AssumptionEstimate(float(np.sqrt(best[0])), float(np.sqrt(best[1])), probe_count, float(probe_radius))


def assumption_holds(problem, est: AssumptionEstimate, theta) -> bool:
    gF = problem.full_gradient(theta)
    diff = _sample_grads(problem, theta) - gF
    lhs = np.einsum("nd,nd->n", diff, diff)
    rhs = est.C1_hat**2 + est.C2_hat**2 * float(gF @ gF)
    return bool(np.all(lhs <= rhs * (1 + 1e-9) + 1e-300))


# --------------------------------------------------------- cumulative error

@dataclass
class LemmaCheck:
    m: int
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def concat_cycles(cycles):
    """Flatten ``[(MaskSet, TraversalSchedule), ...]`` into per-step masks and sample indices."""
    masks, samples = [], []
    for maskset, trav in cycles:
        masks.append(maskset.masks[trav.order[:, 0]])
        samples.append(trav.order[:, 1])
    return np.concatenate(masks), np.concatenate(samples)


def lemma1_bound_check(problem, cycles, theta_tau, etas, tau: int, windows, C: float, Phi: float) -> list:
    """Compare ``||sum_{t=tau}^{tau+m-1} eta_t (S_t * grad f(theta_tau; z_t) - grad F(theta_tau))||^2``
    with ``eta_tau^2 (C^2 + Phi^2 ||grad F(theta_tau)||^2)`` for every ``m`` in ``windows``.

    Gradients are evaluated at the frozen point ``theta_tau`` throughout.
    ``etas[t]`` is the step used at global step ``t`` (0 = first step of the
    first cycle) and must be non-increasing.
    """
    step_masks, samples = concat_cycles(cycles)
    etas = np.asarray(etas, dtype=np.float64)
    windows = [int(m) for m in windows]
    end = tau + max(windows)
    if end > len(samples) or end > len(etas):
        raise ValueError(f"windows reach step {end} but only {min(len(samples), len(etas))} are available")
    if np.any(np.diff(etas[tau:end]) > 0):
        raise ValueError("step sizes must be non-increasing over the window")
    G = _sample_grads(problem, theta_tau)
    gF = problem.full_gradient(theta_tau)
    seg = slice(tau, end)
    terms = etas[seg, None] * (step_masks[seg] * G[samples[seg]] - gF)
    partial = np.cumsum(terms, axis=0)
    rhs = float(etas[tau] ** 2 * (C * C + Phi * Phi * float(gF @ gF)))
    return [LemmaCheck(m, float(partial[m - 1] @ partial[m - 1]), rhs) for m in windows]


def lemma1_constants_for(problem, M: int, theta_tau, probe_count: int = 16, probe_radius: float = 1.0,
                         rng=0) -> tuple[float, float, AssumptionEstimate]:
    """``(C, Phi)`` from constants fitted on probes that include ``theta_tau``."""
    est = estimate_assumption_constants(problem, probe_count, probe_radius, rng, extra_points=[theta_tau])
    C, Phi = lemma1_constants(est.C1_hat, est.C2_hat, M, problem.n_samples)
    return C, Phi, est


# ------------------------------------------------------ iid-mask lower bound

@dataclass
class VarianceCheck:
    lhs_hat: float
    stderr: float
    rhs: float
    trials: int

    @property
    def holds(self) -> bool:
        return self.lhs_hat >= self.rhs - 3.0 * self.stderr


def prop45_variance_check(problem, r: float, etas, theta_tau, trials: int = 10_000, rng=0,
                          mask_law: str = "fixed") -> VarianceCheck:
    """Monte-Carlo estimate of the windowed error under reshuffled samples and iid masks.

    The window starts at an epoch boundary and spans ``len(etas)`` steps;
    ``mask_law`` is ``"fixed"`` (exactly ``r d`` entries equal to ``1/r``) or
    ``"bernoulli"`` (every entry independently ``Bernoulli(r) / r``).
    """
    if trials < 100:
        raise ValueError("need at least 100 trials")
    rng = make_rng(rng)
    etas = np.asarray(etas, dtype=np.float64)
    m = len(etas)
    N, d = problem.n_samples, problem.dim
    G = _sample_grads(problem, theta_tau)
    gF = problem.full_gradient(theta_tau)
    epochs = -(-m // N)
    lhs = np.empty(trials)
    batch = max(1, min(trials, 2_000_000 // max(m * d, 1)))
    for start in range(0, trials, batch):
        b = min(batch, trials - start)
        order = rng.permuted(np.tile(np.arange(N), (b * epochs, 1)), axis=1).reshape(b, epochs * N)[:, :m]
        if mask_law == "fixed":
            S = sample_iid_masks(d, r, b * m, rng).reshape(b, m, d)
        elif mask_law == "bernoulli":
            S = (rng.random((b, m, d)) < r) / r
        else:
            raise ValueError(f"unknown mask law {mask_law!r}")
        total = np.einsum("t,btd->bd", etas, S * G[order] - gF)
        lhs[start:start + b] = np.einsum("bd,bd->b", total, total)
    rhs = float(np.sum(etas**2) * (1.0 - r) / r * float(gF @ gF))
    return VarianceCheck(float(lhs.mean()), float(lhs.std(ddof=1) / np.sqrt(trials)), rhs, trials)


# ------------------------------------------------------------- decomposition

class ReconstructionError(ArithmeticError):
    pass


@dataclass
class DecompositionTerms:
    t: np.ndarray
    decay: np.ndarray
    reshuffle: np.ndarray
    compression: np.ndarray
    residual: np.ndarray

    @property
    def decay_sq(self):
        return np.einsum("kd,kd->k", self.decay, self.decay)

    @property
    def reshuffle_sq(self):
        return np.einsum("kd,kd->k", self.reshuffle, self.reshuffle)

    @property
    def compress_sq(self):
        return np.einsum("kd,kd->k", self.compression, self.compression)


def decompose_trajectory(problem, replay, checkpoints=None, tol: float = RECONSTRUCTION_TOL) -> DecompositionTerms:
    """Split ``theta_t - theta*`` into decay, data-reshuffle and compression-error parts.

    ``replay`` supplies the recorded samples ``z_t``, stochastic gradients
    ``g_t`` and steps ``eta_t`` (see ``optimizer.Replay``). The terms follow
    their recurrences, with ``theta_t`` rebuilt from the replay itself.
    """
    A, ts = problem.A, problem.theta_star
    T = len(replay.etas)
    if checkpoints is None:
        checkpoints = np.arange(T + 1)
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    want = set(checkpoints.tolist())
    theta = np.array(replay.theta0, dtype=np.float64)
    dec = theta - ts
    res = np.zeros_like(dec)
    com = np.zeros_like(dec)
    rec = {k: [] for k in ("t", "dec", "res", "com", "resid")}

    def record(t):
        err = theta - ts
        resid = float(np.linalg.norm(dec + res + com - err))
        if resid > tol * (1.0 + np.linalg.norm(err)):
            raise ReconstructionError(f"reconstruction residual {resid:.3e} at t={t}")
        for key, v in zip(rec, (t, dec.copy(), res.copy(), com.copy(), resid)):
            rec[key].append(v)

    for t in range(T):
        if t in want:
            record(t)
        h = replay.etas[t]
        g = replay.grads[t]
        grad = problem.per_sample_gradient(theta, int(replay.samples[t]))
        gF = A @ (theta - ts)
        dec = dec - h * (A @ dec)
        res = res - h * (A @ res) + h * (gF - grad)
        com = com - h * (A @ com) + h * (grad - g)
        theta = theta - h * g
    if T in want:
        record(T)
    return DecompositionTerms(np.array(rec["t"]), np.array(rec["dec"]), np.array(rec["res"]),
                              np.array(rec["com"]), np.array(rec["resid"]))


# ---------------------------------------------------------------- rate fits

@dataclass
class RateReport:
    estimator: str
    slope: float
    stderr: float
    window: tuple
    seeds: int
    per_seed_slopes: list = field(default_factory=list)
    column: str = "theta_err_sq"

    def as_dict(self) -> dict:
        return {"estimator": self.estimator, "column": self.column, "slope": self.slope,
                "stderr": self.stderr, "window": list(self.window), "seeds": self.seeds,
                "per_seed_slopes": list(self.per_seed_slopes)}


def _loglog_slope(t, v):
    x, y = np.log(t), np.log(v)
    xc = x - x.mean()
    slope = float(xc @ (y - y.mean()) / (xc @ xc))
    resid = y - y.mean() - slope * xc
    dof = len(x) - 2
    se = float(np.sqrt(resid @ resid / dof / (xc @ xc))) if dof > 0 else float("nan")
    return slope, se


def fit_rate(traces, window=None, column: str = "theta_err_sq", estimator: str | None = None) -> RateReport:
    """OLS slope of ``log mean_seeds(column)`` against ``log t`` over the tail window.

    ``window`` is ``(t_lo, t_hi)``; the default is ``[T/100, T]`` with ``T``
    the last checkpoint.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to fit")
    t = traces[0].t
    for tr in traces[1:]:
        if not np.array_equal(tr.t, t):
            raise ValueError("traces do not share a checkpoint grid")
    T = int(t[-1])
    lo, hi = window if window is not None else (T / 100.0, T)
    sel = (t >= lo) & (t <= hi) & (t > 0)
    if sel.sum() < 4:
        raise ValueError(f"only {int(sel.sum())} checkpoints in window [{lo}, {hi}]; need 4")
    vals = np.array([tr[column][sel] for tr in traces])
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise ValueError(f"column {column!r} has non-positive or missing values in the window")
    slope, se = _loglog_slope(t[sel], vals.mean(axis=0))
    per_seed = [_loglog_slope(t[sel], v)[0] for v in vals]
    if len(traces) > 1:
        se = float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed)))
    label = estimator if estimator is not None else (traces[0].label or "")
    return RateReport(label, slope, se, (float(lo), float(hi)), len(traces), per_seed, column)
