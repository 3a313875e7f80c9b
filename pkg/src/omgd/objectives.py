"""Optimization problems: fixed-sample least squares and a small layered model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ._rng import make_rng


class SingularProblemError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 1000
    d: int = 10
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError(f"dataset needs n >= 1 and d >= 1, got n={self.n}, d={self.d}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass(frozen=True, eq=False)
class LeastSquaresProblem:
    """``F(theta) = (1/N) sum_i (x_i^T theta - y_i)^2 = 0.5 theta^T A theta - b^T theta + c``."""

    X: np.ndarray
    y: np.ndarray
    A: np.ndarray
    b: np.ndarray
    c: float
    theta_star: np.ndarray
    lambda_min: float
    lambda_max: float

    @classmethod
    def from_samples(cls, X, y) -> "LeastSquaresProblem":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"X {X.shape} and y {y.shape} disagree")
        n = X.shape[0]
        A = (2.0 / n) * (X.T @ X)
        A = 0.5 * (A + A.T)
        b = (2.0 / n) * (X.T @ y)
        c = float(y @ y) / n
        eig = np.linalg.eigvalsh(A)
        lam_min, lam_max = float(eig[0]), float(eig[-1])
        if lam_max <= 0 or lam_min <= 1e-12 * lam_max:
            raise SingularProblemError(
                f"A is numerically singular (lambda_min={lam_min:.3e}); need n >= d generic samples")
        theta_star = linalg.cho_solve(linalg.cho_factor(A), b)
        for arr in (X, y, A, b, theta_star):
            arr.setflags(write=False)
        return cls(X, y, A, b, c, theta_star, lam_min, lam_max)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def smoothness(self) -> float:
        """Largest per-sample Lipschitz constant ``max_i 2||x_i||^2``."""
        return float(2.0 * np.max(np.einsum("ij,ij->i", self.X, self.X)))

    def _check(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have shape ({self.dim},), got {theta.shape}")
        return theta

    def per_sample_gradient(self, theta, i: int) -> np.ndarray:
        theta = self._check(theta)
        if not 0 <= i < self.n_samples:
            raise IndexError(f"sample index {i} out of range [0, {self.n_samples})")
        x = self.X[i]
        return 2.0 * x * (x @ theta - self.y[i])

    def per_sample_gradients(self, theta) -> np.ndarray:
        """All ``N`` sample gradients stacked, shape ``(N, d)``."""
        theta = self._check(theta)
        return 2.0 * self.X * (self.X @ theta - self.y)[:, None]

    def per_sample_loss(self, theta, i: int) -> float:
        theta = self._check(theta)
        return float((self.X[i] @ theta - self.y[i]) ** 2)

    def full_gradient(self, theta) -> np.ndarray:
        theta = self._check(theta)
        return self.A @ theta - self.b

    def loss(self, theta) -> float:
        theta = self._check(theta)
        return float(0.5 * theta @ self.A @ theta - self.b @ theta + self.c)

    def suboptimality(self, theta) -> float:
        e = self._check(theta) - self.theta_star
        return float(0.5 * e @ self.A @ e)

    def dump_text(self) -> str:
        """Row-major audit dump: header ``n d`` then one ``x_1 .. x_d y`` row per sample."""
        n, d = self.X.shape
        lines = [f"{n} {d}"]
        for x, yi in zip(self.X, self.y):
            lines.append(" ".join(format(v, ".17g") for v in (*x, yi)))
        return "\n".join(lines) + "\n"

    @classmethod
    def load_text(cls, text: str) -> "LeastSquaresProblem":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        n, d = map(int, lines[0].split())
        rows = np.array([ln.split() for ln in lines[1:]], dtype=np.float64)
        if rows.shape != (n, d + 1):
            raise ValueError(f"expected {n} rows of {d + 1} values, got {rows.shape}")
        return cls.from_samples(rows[:, :d], rows[:, d])


def synth_regression(spec: DatasetSpec) -> LeastSquaresProblem:
    """Gaussian design with uniform generating weights and Gaussian label noise."""
    rng = make_rng(spec.seed)
    w_gen = rng.uniform(0.0, 1.0, size=spec.d)
    X = rng.standard_normal((spec.n, spec.d))
    y = X @ w_gen + spec.noise_sd * rng.standard_normal(spec.n)
    return LeastSquaresProblem.from_samples(X, y)


def full_gradient(p, theta) -> np.ndarray:
    return p.full_gradient(theta)


def per_sample_gradient(p, theta, i: int) -> np.ndarray:
    return p.per_sample_gradient(theta, i)


@dataclass(frozen=True, eq=False)
class LayeredModel:
    """Feed-forward regressor with an embedding, ``N_L`` tanh middle layers and a head.

    Parameters live in one flat vector; ``block_slices[b]`` selects block ``b``
    where block 0 is the embedding, blocks ``1..N_L`` the middle layers and
    block ``N_L + 1`` the head. Per-sample loss is ``(out - y)^2``.
    """

    widths: tuple
    shapes: tuple
    block_slices: tuple
    init_params: np.ndarray = field(repr=False)

    @property
    def n_middle(self) -> int:
        return len(self.block_slices) - 2

    @property
    def n_blocks(self) -> int:
        return len(self.block_slices)

    @property
    def dim(self) -> int:
        return self.block_slices[-1].stop

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def unpack(self, theta):
        """``[(W, b), ...]`` views of each block."""
        out = []
        for (rows, cols), sl in zip(self.shapes, self.block_slices):
            blk = theta[sl]
            out.append((blk[: rows * cols].reshape(rows, cols), blk[rows * cols:]))
        return out

    def forward(self, theta, x):
        layers = self.unpack(np.asarray(theta, dtype=np.float64))
        W, b = layers[0]
        acts = [np.asarray(x, dtype=np.float64)]
        h = W @ acts[0] + b
        acts.append(h)
        for W, b in layers[1:-1]:
            h = np.tanh(W @ h + b)
            acts.append(h)
        W, b = layers[-1]
        out = float((W @ h + b)[0])
        return out, acts

    def loss(self, theta, x, y) -> float:
        out, _ = self.forward(theta, x)
        return (out - y) ** 2

    def loss_and_grad(self, theta, x, y):
        theta = np.asarray(theta, dtype=np.float64)
        layers = self.unpack(theta)
        out, acts = self.forward(theta, x)
        resid = out - y
        grad = np.empty_like(theta)
        views = self.unpack(grad)
        # head
        delta = np.array([2.0 * resid])
        gW, gb = views[-1]
        gW[:] = np.outer(delta, acts[-1])
        gb[:] = delta
        delta = layers[-1][0].T @ delta
        # middle layers, last to first; acts[l + 1] is the tanh output of block l
        for blk in range(self.n_middle, 0, -1):
            h_out, h_in = acts[blk + 1], acts[blk]
            delta = delta * (1.0 - h_out ** 2)
            gW, gb = views[blk]
            gW[:] = np.outer(delta, h_in)
            gb[:] = delta
            delta = layers[blk][0].T @ delta
        gW, gb = views[0]
        gW[:] = np.outer(delta, acts[0])
        gb[:] = delta
        return resid ** 2, grad

    def block_gradients(self, theta, x, y) -> list:
        _, g = self.loss_and_grad(theta, x, y)
        return [g[sl] for sl in self.block_slices]


def build_layered_model(n_layers: int, widths=8, seed=0, input_dim: int | None = None) -> LayeredModel:
    """``widths`` is either one hidden width or ``[input_dim, emb_width, w_1, .., w_NL]``."""
    if n_layers < 1:
        raise ValueError("need at least one middle layer")
    if np.isscalar(widths):
        w = int(widths)
        widths = [input_dim if input_dim is not None else w] + [w] * (n_layers + 1)
    widths = tuple(int(w) for w in widths)
    if len(widths) != n_layers + 2:
        raise ValueError(f"expected {n_layers + 2} widths, got {len(widths)}")
    if min(widths) < 1:
        raise ValueError("widths must be positive")
    shapes = [(widths[1], widths[0])]
    shapes += [(widths[l + 1], widths[l]) for l in range(1, n_layers + 1)]
    shapes.append((1, widths[-1]))
    slices, start = [], 0
    for rows, cols in shapes:
        size = rows * cols + rows
        slices.append(slice(start, start + size))
        start += size
    rng = make_rng(seed)
    theta = np.zeros(start)
    for (rows, cols), sl in zip(shapes, slices):
        theta[sl][: rows * cols] = rng.standard_normal(rows * cols) / np.sqrt(cols)
    theta.setflags(write=False)
    return LayeredModel(widths, tuple(shapes), tuple(slices), theta)


@dataclass(frozen=True, eq=False)
class LayeredRegression:
    """A layered model bound to a fixed sample set, with the same oracle surface
    as :class:`LeastSquaresProblem`."""

    model: LayeredModel
    X: np.ndarray
    y: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.model.dim

    def per_sample_gradient(self, theta, i: int) -> np.ndarray:
        return self.model.loss_and_grad(theta, self.X[i], self.y[i])[1]

    def full_gradient(self, theta) -> np.ndarray:
        g = np.zeros(self.dim)
        for i in range(self.n_samples):
            g += self.per_sample_gradient(theta, i)
        return g / self.n_samples

    def loss(self, theta) -> float:
        return float(np.mean([self.model.loss(theta, x, y) for x, y in zip(self.X, self.y)]))


def make_layered_dataset(n: int, input_dim: int, seed=0, noise_sd: float = 0.1):
    """Teacher-student regression data for the layered model."""
    rng = make_rng(seed)
    w = rng.standard_normal(input_dim) / np.sqrt(input_dim)
    X = rng.standard_normal((n, input_dim))
    y = np.sin(2.0 * X @ w) + noise_sd * rng.standard_normal(n)
    return X, y
