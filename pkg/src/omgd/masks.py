"""Mask sets, traversal orders, iid masks and random Stiefel projectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import make_rng

_SINGULAR_EIG = 1e-12
_MAX_RESAMPLES = 8


class DegenerateSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskSet:
    """``M`` masks over ``d`` coordinates whose entrywise sum is ``M * ones(d)``.

    ``masks`` has shape ``(M, d)``. Pinned coordinates carry value 1 in every
    mask; every other coordinate is owned by exactly one mask, where it has
    value ``M``.
    """

    masks: np.ndarray
    pinned: frozenset = field(default_factory=frozenset)

    @property
    def M(self) -> int:
        return self.masks.shape[0]

    @property
    def d(self) -> int:
        return self.masks.shape[1]

    def __getitem__(self, j):
        return self.masks[j]

    def coverage_ok(self) -> bool:
        return bool(np.all(self.masks.sum(axis=0) == self.M))

    def to_text(self) -> str:
        return "".join(" ".join(format(v, ".17g") for v in row) + "\n" for row in self.masks)

    @classmethod
    def from_text(cls, text: str, pinned=()) -> "MaskSet":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if not rows:
            raise ValueError("empty mask set")
        if len({len(r) for r in rows}) != 1:
            raise ValueError("ragged mask rows")
        return cls(np.array(rows, dtype=np.float64), frozenset(pinned))


@dataclass(frozen=True)
class TraversalSchedule:
    """One cycle's visiting order: ``order[l] = (mask_index, sample_index)``, 0-based."""

    order: np.ndarray
    M: int
    N: int

    def __len__(self):
        return len(self.order)

    def is_full_grid(self) -> bool:
        if self.order.shape != (self.M * self.N, 2):
            return False
        flat = self.order[:, 0] * self.N + self.order[:, 1]
        return bool(np.array_equal(np.sort(flat), np.arange(self.M * self.N)))

    def to_text(self) -> str:
        return "".join(f"{j} {i}\n" for j, i in self.order)

    @classmethod
    def from_text(cls, text: str, M: int, N: int) -> "TraversalSchedule":
        pairs = [tuple(map(int, line.split())) for line in text.splitlines() if line.strip()]
        return cls(np.array(pairs, dtype=np.int64).reshape(-1, 2), M, N)


@dataclass(frozen=True)
class Projector:
    matrix: np.ndarray
    keep_ratio: float

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    def apply(self, g: np.ndarray) -> np.ndarray:
        """Compressed gradient ``(1/r) P P^T g``."""
        P = self.matrix
        return (P @ (P.T @ g)) / self.keep_ratio


def masks_from_partition(d: int, M: int, blocks, pinned=()) -> MaskSet:
    """Build the mask set for an explicit partition of the free coordinates.

    ``blocks[j]`` lists the coordinates owned by mask ``j``.
    """
    pinned = frozenset(int(p) for p in pinned)
    if len(blocks) != M:
        raise ValueError(f"need {M} blocks, got {len(blocks)}")
    masks = np.zeros((M, d))
    if pinned:
        masks[:, sorted(pinned)] = 1.0
    seen = set(pinned)
    for j, block in enumerate(blocks):
        for c in block:
            if c in seen:
                raise ValueError(f"coordinate {c} assigned twice")
            seen.add(c)
            masks[j, c] = float(M)
    if seen != set(range(d)):
        raise ValueError("blocks and pinned set do not cover every coordinate")
    return MaskSet(masks, pinned)


def generate_disjoint_masks(d: int, M: int, pinned=(), rng=None) -> MaskSet:
    """Random mask set satisfying the coverage constraint.

    The free (non-pinned) coordinates are shuffled and cut into ``M``
    contiguous blocks whose sizes differ by at most one.
    """
    if d < 1:
        raise ValueError("d must be positive")
    if M < 1:
        raise ValueError("M must be positive")
    pinned = frozenset(int(p) for p in pinned)
    if any(p < 0 or p >= d for p in pinned):
        raise ValueError(f"pinned coordinates must lie in [0, {d})")
    free = np.array([c for c in range(d) if c not in pinned], dtype=np.int64)
    if M > 1 and M > len(free):
        raise ValueError(f"M={M} exceeds the {len(free)} free coordinates; some mask would be empty")
    rng = make_rng(rng)
    shuffled = free[rng.permutation(len(free))]
    return masks_from_partition(d, M, np.array_split(shuffled, M), pinned)


def generate_traversal(M: int, N: int, rng=None) -> TraversalSchedule:
    if M < 1 or N < 1:
        raise ValueError("M and N must be positive")
    rng = make_rng(rng)
    flat = rng.permutation(M * N)
    order = np.stack([flat // N, flat % N], axis=1)
    return TraversalSchedule(order, M, N)


def support_size(d: int, r: float) -> int:
    """Number of kept coordinates ``r * d``; rejects non-integral products."""
    if not 0.0 < r <= 1.0:
        raise ValueError(f"keep ratio must lie in (0, 1], got {r}")
    k = round(r * d)
    if abs(r * d - k) > 1e-9 or k < 1:
        raise ValueError(f"r*d = {r * d} is not a positive integer")
    return k


def sample_iid_masks(d: int, r: float, n: int, rng=None) -> np.ndarray:
    """``n`` independent masks, each with ``r*d`` entries equal to ``1/r``."""
    k = support_size(d, r)
    rng = make_rng(rng)
    out = np.zeros((n, d))
    if k == d:
        out[:] = 1.0
        return out
    keys = rng.random((n, d))
    support = np.argpartition(keys, k - 1, axis=1)[:, :k]
    np.put_along_axis(out, support, 1.0 / r, axis=1)
    return out


def sample_iid_mask(d: int, r: float, rng=None) -> np.ndarray:
    return sample_iid_masks(d, r, 1, rng)[0]


def _orthonormalize(Z: np.ndarray):
    """``Z (Z^T Z)^{-1/2}`` for a stack of ``(d, k)`` matrices.

    Returns the projectors and a boolean array flagging numerically singular
    Gram matrices.
    """
    gram = np.swapaxes(Z, -1, -2) @ Z
    w, V = np.linalg.eigh(gram)
    bad = w[:, 0] < _SINGULAR_EIG
    w = np.where(w < _SINGULAR_EIG, 1.0, w)
    inv_sqrt = (V / np.sqrt(w)[:, None, :]) @ np.swapaxes(V, -1, -2)
    return Z @ inv_sqrt, bad


def sample_stiefel_matrices(d: int, k: int, n: int, rng=None) -> np.ndarray:
    """``n`` matrices uniform on the Stiefel manifold of ``d x k`` orthonormal frames."""
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    rng = make_rng(rng)
    P, bad = _orthonormalize(rng.standard_normal((n, d, k)))
    attempts = 0
    while bad.any():
        attempts += 1
        if attempts > _MAX_RESAMPLES:
            raise DegenerateSamplingError(
                f"Z^T Z stayed singular after {_MAX_RESAMPLES} resamples (d={d}, k={k})")
        idx = np.flatnonzero(bad)
        P_new, bad_new = _orthonormalize(rng.standard_normal((len(idx), d, k)))
        P[idx] = P_new
        bad = np.zeros_like(bad)
        bad[idx] = bad_new
    return P


def sample_stiefel_projector(d: int, r: float, rng=None) -> Projector:
    k = support_size(d, r)
    return Projector(sample_stiefel_matrices(d, k, 1, rng)[0], r)


def apply_mask(mask, gradient) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if mask.shape != gradient.shape:
        raise ValueError(f"mask shape {mask.shape} does not match gradient shape {gradient.shape}")
    return mask * gradient
