import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omgd.lisa import (
    LayerPoolState,
    advance_period,
    layer_mask,
    lisa_wor_train,
    masked_model_gradient,
    sgd_train,
)
from omgd.masks import masks_from_partition
from omgd.objectives import build_layered_model, make_layered_dataset
from omgd.schedules import Constant


def _periods(n_layers, gamma, count, seed=0, policy="wor"):
    rng = np.random.default_rng(seed)
    state = LayerPoolState.initial(n_layers, gamma, policy)
    out = []
    for _ in range(count):
        state = advance_period(state, rng)
        out.append(state)
    return out


@pytest.mark.parametrize("gamma", [1, 2, 3, 4, 6])
def test_cycles_partition_twelve_layers(gamma):
    per_cycle = 12 // gamma
    states = _periods(12, gamma, 5 * per_cycle, seed=gamma)
    for c in range(5):
        cycle = states[c * per_cycle:(c + 1) * per_cycle]
        union = [layer for s in cycle for layer in s.active]
        assert sorted(union) == list(range(12))
        for s in cycle:
            assert len(s.active) == gamma
            assert not set(s.active) & set(s.unselected)


def test_single_layer_resets_every_period():
    states = _periods(1, 1, 4)
    assert all(s.active == (0,) for s in states)
    assert [s.resets for s in states] == [0, 1, 2, 3]


def test_leftover_layer_is_discarded_at_reset():
    states = _periods(5, 2, 3, seed=1)
    first_two = set(states[0].active) | set(states[1].active)
    assert len(first_two) == 4
    assert states[1].unselected and len(states[1].unselected) == 1
    assert states[2].resets == 1 and states[2].leftover == 1
    assert len(states[2].unselected) == 3


@settings(max_examples=100, deadline=None)
@given(n_layers=st.integers(1, 16), gamma=st.integers(1, 16), seed=st.integers(0, 2**32 - 1))
def test_no_layer_repeats_before_reset(n_layers, gamma, seed):
    if gamma > n_layers:
        with pytest.raises(ValueError):
            LayerPoolState.initial(n_layers, gamma)
        return
    seen, resets = set(), 0
    for s in _periods(n_layers, gamma, 3 * (n_layers // gamma + 1), seed):
        if s.resets != resets:
            seen, resets = set(), s.resets
        assert not seen & set(s.active)
        seen |= set(s.active)


def test_scaled_block_gradients_are_exact():
    model = build_layered_model(12, widths=3, input_dim=2, seed=0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(2), 0.3
    raw = model.block_gradients(model.init_params, x, y)
    for gamma in (1, 2, 3, 4, 6, 12):
        state = _periods(12, gamma, 1, seed=gamma)[0]
        blocks = masked_model_gradient(state, model, model.init_params, x, y)
        np.testing.assert_array_equal(blocks[0], raw[0])
        np.testing.assert_array_equal(blocks[-1], raw[-1])
        for layer in range(12):
            got = blocks[layer + 1]
            if layer in state.active:
                assert np.array_equal(got, (12 / gamma) * raw[layer + 1])
            else:
                assert np.all(got == 0.0)


@pytest.mark.parametrize("gamma", [1, 2, 3, 4, 6])
def test_cycle_mask_sum_is_uniform_on_middle_layers(gamma):
    model = build_layered_model(12, widths=[3, 2, 4, 3, 2, 5, 2, 3, 4, 2, 3, 2, 2, 3], seed=2)
    total = np.zeros(model.dim)
    for s in _periods(12, gamma, 12 // gamma, seed=9):
        total += layer_mask(s, model)
    cycle_len = 12 // gamma
    middle = np.zeros(model.dim, dtype=bool)
    for sl in model.block_slices[1:-1]:
        middle[sl] = True
    np.testing.assert_allclose(total[middle], 12 / gamma, rtol=1e-15)
    np.testing.assert_array_equal(total[~middle], cycle_len)


def test_single_weight_blocks_reproduce_pinned_masks():
    # blocks of one coordinate each: embedding, four middle layers, head
    ms = masks_from_partition(6, 4, [[1], [2], [3], [4]], pinned={0, 5})
    rows = []
    for layer in range(4):
        state = LayerPoolState(4, 1, (), active=(layer,))
        mask = np.ones(6)
        mask[1:5] = 0.0
        mask[1 + layer] = state.factor
        rows.append(mask)
    np.testing.assert_array_equal(np.array(rows), ms.masks)


def test_full_sampling_reproduces_sgd():
    X, y = make_layered_dataset(16, 3, seed=1)
    model = build_layered_model(4, widths=4, input_dim=3, seed=1)
    ref = sgd_train(model, X, y, 200, Constant(0.05), seed=3, checkpoints=[0, 100, 200])
    for K in (1, 7):
        tr, _ = lisa_wor_train(model, X, y, 4, K, 200, Constant(0.05), seed=3, checkpoints=[0, 100, 200])
        assert tr.theta_final.tobytes() == ref.theta_final.tobytes()
        assert tr["subopt"].tobytes() == ref["subopt"].tobytes()


def test_tiny_cycle_matches_manual_unroll():
    X, y = make_layered_dataset(3, 2, seed=4)
    model = build_layered_model(2, widths=2, input_dim=2, seed=4)
    tr, log = lisa_wor_train(model, X, y, 1, 2, 4, Constant(0.1), seed=8, checkpoints=[4])
    from omgd._rng import spawn_streams
    from omgd.optimizer import _Reshuffler
    streams = spawn_streams(8)
    order = _Reshuffler(streams["order"], 3).take(4)
    theta = model.init_params.copy()
    state = LayerPoolState.initial(2, 1)
    for t in range(4):
        if t % 2 == 0:
            state = advance_period(state, streams["layers"])
            assert state.active == log[t // 2].active
        g = model.loss_and_grad(theta, X[order[t]], y[order[t]])[1]
        g[model.block_slices[2 - state.active[0]]] = 0.0
        g[model.block_slices[1 + state.active[0]]] *= 2.0
        theta = theta - 0.1 * g
    np.testing.assert_allclose(tr.theta_final, theta, rtol=1e-15)
    assert sorted(log[0].active + log[1].active) == [0, 1]


def test_frozen_blocks_do_not_move_within_a_period():
    X, y = make_layered_dataset(10, 2, seed=0)
    model = build_layered_model(6, widths=3, input_dim=2, seed=0)
    _, log = lisa_wor_train(model, X, y, 2, 5, 5, Constant(0.05), seed=2, checkpoints=[5])
    frozen = [l for l in range(6) if l not in log[0].active]
    for T in range(1, 6):
        tr, _ = lisa_wor_train(model, X, y, 2, 5, T, Constant(0.05), seed=2, checkpoints=[T])
        for l in frozen:
            sl = model.block_slices[l + 1]
            assert tr.theta_final[sl].tobytes() == model.init_params[sl].tobytes()


def test_epoch_unit_and_period_log():
    X, y = make_layered_dataset(8, 2, seed=0)
    model = build_layered_model(12, widths=2, input_dim=2, seed=0)
    _, log = lisa_wor_train(model, X, y, 3, 1, 8 * 8, Constant(0.01), seed=0, unit="epochs", checkpoints=[64])
    assert [p.start_step for p in log] == list(range(0, 64, 8))
    assert sorted(sum((p.active for p in log[:4]), ())) == list(range(12))
    with pytest.raises(ValueError):
        lisa_wor_train(model, X, y, 3, 0, 10, Constant(0.01))
    with pytest.raises(ValueError):
        lisa_wor_train(model, X, y, 3, 1, 10, Constant(0.01), unit="hours")


def test_wor_periods_beat_iid_periods_on_average():
    X, y = make_layered_dataset(64, 4, seed=0)
    model = build_layered_model(12, widths=6, input_dim=4, seed=0)
    diffs = []
    for seed in range(20):
        a, _ = lisa_wor_train(model, X, y, 3, 5, 2000, Constant(0.02), seed=seed, checkpoints=[2000])
        b, _ = lisa_wor_train(model, X, y, 3, 5, 2000, Constant(0.02), seed=seed, policy="iid", checkpoints=[2000])
        diffs.append(a["subopt"][-1] - b["subopt"][-1])
    assert np.mean(diffs) <= 0.0
