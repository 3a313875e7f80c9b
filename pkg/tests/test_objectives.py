import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omgd.objectives import (
    DatasetSpec,
    LayeredRegression,
    LeastSquaresProblem,
    SingularProblemError,
    build_layered_model,
    full_gradient,
    make_layered_dataset,
    per_sample_gradient,
    synth_regression,
)


def _brute_force_moments(X, y):
    n, d = len(X), len(X[0])
    A = [[0.0] * d for _ in range(d)]
    b = [0.0] * d
    for i in range(n):
        for j in range(d):
            b[j] += 2.0 * X[i][j] * y[i] / n
            for k in range(d):
                A[j][k] += 2.0 * X[i][j] * X[i][k] / n
    return np.array(A), np.array(b)


def test_single_sample_scalar_problem():
    p = LeastSquaresProblem.from_samples([[1.0]], [2.0])
    assert p.A[0, 0] == 2.0 and p.b[0] == 4.0
    assert p.theta_star[0] == pytest.approx(2.0, abs=1e-12)
    assert p.c == 4.0


def test_moments_match_summation_oracle(small_problem):
    A, b = _brute_force_moments(small_problem.X.tolist(), small_problem.y.tolist())
    np.testing.assert_allclose(small_problem.A, A, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(small_problem.b, b, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(small_problem.A @ small_problem.theta_star, small_problem.b, atol=1e-10)


def test_synth_is_deterministic_and_shaped():
    a = synth_regression(DatasetSpec(n=40, d=5, seed=3))
    b = synth_regression(DatasetSpec(n=40, d=5, seed=3))
    assert a.X.shape == (40, 5) and a.y.shape == (40,)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    c = synth_regression(DatasetSpec(n=40, d=5, seed=4))
    assert a.X.tobytes() != c.X.tobytes()


def test_noise_free_recovers_generating_weights():
    p = synth_regression(DatasetSpec(n=30, d=4, noise_sd=0.0, seed=1))
    rng = np.random.default_rng(1)
    w_gen = rng.uniform(0.0, 1.0, size=4)
    np.testing.assert_allclose(p.theta_star, w_gen, atol=1e-10)
    assert np.all((p.theta_star >= 0) & (p.theta_star <= 1))


def test_singular_design_is_rejected():
    with pytest.raises(SingularProblemError):
        LeastSquaresProblem.from_samples(np.ones((5, 2)), np.arange(5.0))
    with pytest.raises(SingularProblemError):
        LeastSquaresProblem.from_samples(np.random.default_rng(0).standard_normal((2, 3)), np.zeros(2))


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(n=0)
    with pytest.raises(ValueError):
        DatasetSpec(d=0)
    with pytest.raises(ValueError):
        DatasetSpec(noise_sd=-1.0)


def test_full_gradient_is_mean_of_sample_gradients(small_problem):
    theta = np.array([0.3, -1.2, 2.0])
    per = np.mean([per_sample_gradient(small_problem, theta, i) for i in range(small_problem.n_samples)], axis=0)
    np.testing.assert_allclose(full_gradient(small_problem, theta), per, atol=1e-12)
    np.testing.assert_allclose(small_problem.per_sample_gradients(theta).mean(axis=0), per, atol=1e-12)


def test_gradient_vanishes_at_optimum(small_problem):
    g = small_problem.full_gradient(small_problem.theta_star)
    assert np.linalg.norm(g) <= 1e-10


def test_per_sample_gradient_matches_finite_differences(small_problem):
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(3)
    h = 1e-6
    for i in (0, 17, 49):
        fd = np.array([
            (small_problem.per_sample_loss(theta + h * e, i) - small_problem.per_sample_loss(theta - h * e, i)) / (2 * h)
            for e in np.eye(3)
        ])
        np.testing.assert_allclose(small_problem.per_sample_gradient(theta, i), fd, rtol=1e-6, atol=1e-6)


def test_bad_inputs(small_problem):
    with pytest.raises(IndexError):
        small_problem.per_sample_gradient(np.zeros(3), 50)
    with pytest.raises(ValueError):
        small_problem.full_gradient(np.zeros(4))


def test_quadratic_identity_and_eigen_sandwich(small_problem):
    rng = np.random.default_rng(2)
    for _ in range(5):
        theta = rng.standard_normal(3) * 3
        e = theta - small_problem.theta_star
        lhs = small_problem.loss(theta) - small_problem.loss(small_problem.theta_star)
        assert lhs == pytest.approx(0.5 * e @ small_problem.A @ e, rel=1e-9, abs=1e-12)
        assert lhs == pytest.approx(small_problem.suboptimality(theta), rel=1e-9, abs=1e-12)
        q = e @ small_problem.A @ e
        assert small_problem.lambda_min * (e @ e) * (1 - 1e-12) <= q <= small_problem.lambda_max * (e @ e) * (1 + 1e-12)
    mean_loss = np.mean([small_problem.per_sample_loss(theta, i) for i in range(small_problem.n_samples)])
    assert small_problem.loss(theta) == pytest.approx(mean_loss, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 20), d=st.integers(1, 4))
def test_optimum_is_stationary_property(seed, n, d):
    p = synth_regression(DatasetSpec(n=n, d=d, seed=seed))
    scale = max(1.0, np.linalg.norm(p.b))
    assert np.linalg.norm(p.full_gradient(p.theta_star)) <= 1e-8 * scale


def test_text_dump_round_trip(small_problem):
    text = small_problem.dump_text()
    assert text.splitlines()[0] == "50 3"
    back = LeastSquaresProblem.load_text(text)
    assert back.X.tobytes() == small_problem.X.tobytes()
    assert back.y.tobytes() == small_problem.y.tobytes()


def test_arrays_are_read_only(small_problem):
    with pytest.raises(ValueError):
        small_problem.A[0, 0] = 1.0


def test_layered_model_gradient_matches_finite_differences():
    model = build_layered_model(3, widths=[2, 3, 4, 3, 2], seed=1)
    rng = np.random.default_rng(5)
    theta = model.init_params + 0.1 * rng.standard_normal(model.dim)
    x, y = rng.standard_normal(2), 0.7
    _, g = model.loss_and_grad(theta, x, y)
    h = 1e-6
    fd = np.empty(model.dim)
    for k in range(model.dim):
        e = np.zeros(model.dim)
        e[k] = h
        fd[k] = (model.loss(theta + e, x, y) - model.loss(theta - e, x, y)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_layered_model_block_layout():
    model = build_layered_model(4, widths=3, input_dim=2)
    assert model.n_middle == 4 and model.n_blocks == 6
    blocks = model.block_gradients(model.init_params, np.ones(2), 0.0)
    assert [b.size for b in blocks] == [3 * 2 + 3] + [3 * 3 + 3] * 4 + [3 + 1]
    assert sum(b.size for b in blocks) == model.dim
    with pytest.raises(ValueError):
        build_layered_model(0)
    with pytest.raises(ValueError):
        build_layered_model(2, widths=[2, 3, 3])


def test_layered_regression_full_gradient():
    X, y = make_layered_dataset(12, 3, seed=0)
    model = build_layered_model(2, widths=4, input_dim=3, seed=0)
    task = LayeredRegression(model, X, y)
    theta = model.init_params
    manual = np.mean([model.loss_and_grad(theta, X[i], y[i])[1] for i in range(12)], axis=0)
    np.testing.assert_allclose(task.full_gradient(theta), manual, atol=1e-14)
    assert task.loss(theta) == pytest.approx(np.mean([model.loss(theta, X[i], y[i]) for i in range(12)]))
