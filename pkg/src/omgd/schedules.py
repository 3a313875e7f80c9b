"""Step-size schedules and the closed-form constants from the convergence analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_INT64_MAX = 2**63 - 1


class ScheduleExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Constant:
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("constant step size must be positive")

    length = None

    def etas(self, t0: int, n: int) -> np.ndarray:
        return np.full(n, float(self.eta))

    def __call__(self, t: int) -> float:
        return float(self.eta)


@dataclass(frozen=True)
class Diminishing:
    """``eta_t = c0 / (t + t_offset)`` for the 0-based global step ``t``."""

    c0: float
    t_offset: float = 1.0

    def __post_init__(self):
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not self.t_offset > 0:
            raise ValueError("t_offset must be positive so eta_0 is finite")

    length = None

    def etas(self, t0: int, n: int) -> np.ndarray:
        t = np.arange(t0, t0 + n, dtype=np.float64)
        return self.c0 / (t + self.t_offset)

    def __call__(self, t: int) -> float:
        return self.c0 / (float(t) + self.t_offset)


@dataclass(frozen=True)
class Staged:
    """Piecewise-constant steps: ``stages = ((eta_0, duration_0), (eta_1, duration_1), ...)``."""

    stages: tuple

    def __post_init__(self):
        if not self.stages:
            raise ValueError("staged schedule needs at least one stage")
        prev = math.inf
        for eta, dur in self.stages:
            if not eta > 0:
                raise ValueError("stage step sizes must be positive")
            if int(dur) != dur or dur < 1:
                raise ValueError("stage durations must be positive integers")
            if eta > prev:
                raise ValueError("stage step sizes must be non-increasing")
            prev = eta

    @property
    def length(self) -> int:
        return int(sum(d for _, d in self.stages))

    @property
    def boundaries(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([d for _, d in self.stages])])

    def etas(self, t0: int, n: int) -> np.ndarray:
        if t0 + n > self.length:
            raise ScheduleExhausted(f"staged schedule has {self.length} steps, asked for step {t0 + n - 1}")
        t = np.arange(t0, t0 + n)
        stage = np.searchsorted(self.boundaries, t, side="right") - 1
        return np.array([e for e, _ in self.stages])[stage]

    def __call__(self, t: int) -> float:
        return float(self.etas(t, 1)[0])


def lemma1_constants(C1: float, C2: float, M: int, N: int) -> tuple[float, float]:
    """Window-independent error constants ``(C, Phi)`` of the cumulative-error bound."""
    if C1 < 0 or C2 < 0:
        raise ValueError("C1, C2 must be non-negative")
    scale = 2.0 * M ** 1.5 * N
    return scale * C1, scale * math.sqrt(C2 * C2 + 1.0)


def _term_count(*ceilings: int) -> int:
    # both ceilings vanish only when C = Phi = 0; keep eta finite
    return max(sum(ceilings), 1)


def theorem43_step(L: float, M: int, C: float, Phi: float, eps: float, Delta: float) -> tuple[float, int]:
    """Constant step and iteration budget for ``min_t ||grad F(theta_t)|| <= eps`` (nonconvex)."""
    if min(L, M, eps) <= 0 or C < 0 or Phi < 0 or Delta < 0:
        raise ValueError("L, M, eps must be positive and C, Phi, Delta non-negative")
    n = _term_count(math.ceil(4.0 * C / eps), math.ceil(3.0 * Phi))
    eta = 1.0 / (6.0 * L * M * n)
    T = math.ceil(48.0 * Delta * L * M / eps**2) * n
    return eta, T


def theorem44_step(L: float, M: int, C: float, Phi: float, mu: float, eps: float,
                   Delta: float) -> tuple[float, int]:
    """Constant step and budget for ``F(theta_T) - F* <= eps^2`` under the PL condition."""
    if min(L, M, eps, mu) <= 0 or C < 0 or Phi < 0 or Delta < 0:
        raise ValueError("L, M, eps, mu must be positive and C, Phi, Delta non-negative")
    n = _term_count(math.ceil(math.sqrt(8.0 * C * C / (mu * eps * eps))), math.ceil(3.0 * Phi))
    eta = 1.0 / (6.0 * L * M * n)
    ratio = 2.0 * Delta / eps**2
    outer = math.ceil(12.0 * L * M / mu * math.log(ratio)) if ratio > 1.0 else 0
    return eta, n * max(outer, 0)


def staged_schedule_nonconvex(Phi: float, J: int, L: float, M: int) -> Staged:
    """Stage ``l`` runs ``ceil(3 Phi) 2^l * 4^l`` steps at ``1 / (6 L M ceil(3 Phi) 2^l)``."""
    if J < 1:
        raise ValueError("need at least one stage")
    if Phi <= 0 or L <= 0 or M < 1:
        raise ValueError("Phi, L must be positive and M >= 1")
    base = math.ceil(3.0 * Phi)
    if base * (8**J - 1) // 7 > _INT64_MAX:
        raise OverflowError(f"J={J} stages need more than 2^63 steps")
    stages = []
    for l in range(J):
        m = base * 2**l
        stages.append((1.0 / (6.0 * L * M * m), m * 4**l))
    return Staged(tuple(stages))


def staged_schedule_pl(Phi: float, J: int, L: float, M: int, mu: float) -> Staged:
    """PL variant: ``m_l = ceil(3 Phi e^{l/2})`` steps per block, ``ceil(12 L M / mu)`` blocks per stage."""
    if J < 1:
        raise ValueError("need at least one stage")
    if Phi <= 0 or L <= 0 or mu <= 0 or M < 1:
        raise ValueError("Phi, L, mu must be positive and M >= 1")
    kappa = mu / (12.0 * L * M)
    K = math.ceil(1.0 / kappa)
    stages = []
    total = 0
    for l in range(J):
        m = math.ceil(3.0 * Phi * math.exp(l / 2.0))
        total += m * K
        if total > _INT64_MAX:
            raise OverflowError(f"J={J} stages need more than 2^63 steps")
        stages.append((1.0 / (6.0 * L * M * m), m * K))
    return Staged(tuple(stages))
