"""Periodwise layer freezing with without-replacement sampling of middle layers.

Embedding and head blocks are always trained. Every period a group of
``gamma`` middle layers is unfrozen; under the ``"wor"`` policy the group is
drawn from the layers not yet used in the current cycle, and the pool resets
once fewer than ``gamma`` remain. Gradients of the unfrozen middle layers are
scaled by ``N_L / gamma`` so that, over a cycle, every coordinate receives the
same total weight.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._rng import make_rng, spawn_streams
from .objectives import LayeredModel
from .optimizer import NonFiniteIterate, _Reshuffler, default_checkpoints
from .trace import RunTrace


@dataclass(frozen=True)
class LayerPoolState:
    n_layers: int
    gamma: int
    unselected: tuple
    active: tuple = ()
    period: int = -1
    resets: int = 0
    leftover: int = 0
    policy: str = "wor"
    scale: bool = True

    @classmethod
    def initial(cls, n_layers: int, gamma: int, policy: str = "wor", scale: bool = True) -> "LayerPoolState":
        if not 1 <= gamma <= n_layers:
            raise ValueError(f"need 1 <= gamma <= N_L, got gamma={gamma}, N_L={n_layers}")
        if policy not in ("wor", "iid"):
            raise ValueError(f"unknown policy {policy!r}")
        return cls(n_layers, gamma, tuple(range(n_layers)), policy=policy, scale=scale)

    @property
    def factor(self) -> float:
        return self.n_layers / self.gamma if self.scale else 1.0


def advance_period(state: LayerPoolState, rng) -> LayerPoolState:
    """Start the next period: pick ``gamma`` middle layers (0-based) to unfreeze."""
    rng = make_rng(rng)
    if state.policy == "iid":
        pick = rng.choice(state.n_layers, size=state.gamma, replace=False)
        return replace(state, active=tuple(sorted(int(p) for p in pick)), period=state.period + 1)
    pool = state.unselected
    resets, leftover = state.resets, state.leftover
    if len(pool) < state.gamma:
        leftover = len(pool)
        pool = tuple(range(state.n_layers))
        resets += 1
    idx = rng.choice(len(pool), size=state.gamma, replace=False)
    chosen = {pool[i] for i in idx}
    return replace(state, unselected=tuple(p for p in pool if p not in chosen),
                   active=tuple(sorted(int(c) for c in chosen)), period=state.period + 1,
                   resets=resets, leftover=leftover)


def layer_mask(state: LayerPoolState, model: LayeredModel) -> np.ndarray:
    """Flat multiplier over all parameters for the current period."""
    mask = np.zeros(model.dim)
    mask[model.block_slices[0]] = 1.0
    mask[model.block_slices[-1]] = 1.0
    for layer in state.active:
        mask[model.block_slices[layer + 1]] = state.factor
    return mask


def masked_model_gradient(state: LayerPoolState, model: LayeredModel, theta, x, y) -> list:
    """Per-block gradients: embedding/head raw, active middle layers scaled, frozen ones zero."""
    g = model.loss_and_grad(theta, x, y)[1] * layer_mask(state, model)
    return [g[sl] for sl in model.block_slices]


@dataclass
class PeriodRecord:
    period: int
    start_step: int
    active: tuple
    reset: bool
    leftover: int


def _train(model: LayeredModel, X, y, T: int, schedule, seed: int, period_steps: int | None,
           gamma: int | None, policy: str, scale: bool, checkpoints, theta0):
    streams = spawn_streams(seed)
    order = _Reshuffler(streams["order"], len(X))
    theta = np.array(model.init_params if theta0 is None else theta0, dtype=np.float64)
    ck = default_checkpoints(T) if checkpoints is None else np.asarray(checkpoints, dtype=np.int64)
    loss = np.full(len(ck), np.nan)
    gnorm = np.full(len(ck), np.nan)
    log = []
    state = None
    mask = None
    if period_steps is not None:
        state = LayerPoolState.initial(model.n_middle, gamma, policy, scale)
    samples = order.take(T)
    etas = schedule.etas(0, T)
    pos = 0

    def record(k):
        losses, grads = zip(*(model.loss_and_grad(theta, xi, yi) for xi, yi in zip(X, y)))
        loss[k] = float(np.mean(losses))
        gF = np.mean(grads, axis=0)
        gnorm[k] = float(gF @ gF)

    def prefix_trace():
        return RunTrace(ck[:pos], {"subopt": loss[:pos], "grad_norm_sq": gnorm[:pos]}, seed=seed)

    for t in range(T):
        while pos < len(ck) and ck[pos] == t:
            record(pos)
            pos += 1
        if state is not None and t % period_steps == 0:
            prev_resets = state.resets
            state = advance_period(state, streams["layers"])
            mask = layer_mask(state, model)
            log.append(PeriodRecord(state.period, t, state.active, state.resets > prev_resets, state.leftover))
        i = samples[t]
        g = model.loss_and_grad(theta, X[i], y[i])[1]
        if mask is not None:
            g = g * mask
        theta = theta - etas[t] * g
        if not np.all(np.isfinite(theta)):
            raise NonFiniteIterate(t + 1, prefix_trace())
    while pos < len(ck) and ck[pos] == T:
        record(pos)
        pos += 1
    if not np.all(np.isfinite(loss[:pos])):
        raise NonFiniteIterate(T, prefix_trace())
    trace = prefix_trace()
    trace.theta_final = theta
    return trace, log


def lisa_wor_train(model: LayeredModel, X, y, gamma: int, K: int, T: int, schedule, seed: int = 0,
                   unit: str = "steps", policy: str = "wor", scale: bool = True,
                   checkpoints=None, theta0=None):
    """Plain SGD over ``T`` steps with a new layer group every ``K`` units.

    Returns the loss trace (full-data loss in the ``subopt`` column) and the
    period log. ``unit="epochs"`` makes a period ``K`` passes over the data.
    """
    if K < 1:
        raise ValueError("period length must be positive")
    if unit == "epochs":
        period_steps = K * len(X)
    elif unit == "steps":
        period_steps = K
    else:
        raise ValueError(f"unknown period unit {unit!r}")
    trace, log = _train(model, X, y, T, schedule, seed, period_steps, gamma, policy, scale, checkpoints, theta0)
    trace.label = f"LISA_{policy.upper()}"
    return trace, log


def sgd_train(model: LayeredModel, X, y, T: int, schedule, seed: int = 0, checkpoints=None, theta0=None):
    """Full-parameter SGD with the same data order as :func:`lisa_wor_train`."""
    trace, _ = _train(model, X, y, T, schedule, seed, None, None, "wor", True, checkpoints, theta0)
    trace.label = "SGD"
    return trace
