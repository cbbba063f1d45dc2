import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpnc.objective import (Dataset, ObjectiveSpec, base_gradient, base_hessian, base_hessians,
                            base_value, evaluate, load_dataset, make_problem, per_sample_gradient,
                            per_sample_value, population_values, problem_constants,
                            sample_dataset, save_dataset)

KINDS = ["quadratic", "cubic_saddle", "double_well"]


def test_quadratic_identity_case():
    prob = make_problem("quadratic", 2, 0.0, seed=3)
    data = sample_dataset(prob, 5)
    value, grad, hess = evaluate(prob, data, np.zeros(2), want_hessian=True)
    assert value == 0.0
    assert np.array_equal(grad, np.zeros(2))
    assert np.array_equal(hess, np.eye(2))


def test_cubic_saddle_critical_points():
    prob = make_problem("cubic_saddle", 2, 0.0)
    data = sample_dataset(prob, 3)
    for x1 in (-1.0, 1.0):
        _, grad, _ = evaluate(prob, data, np.array([x1, 0.0]))
        assert np.allclose(grad, 0.0)
    _, _, hess = evaluate(prob, data, np.array([-1.0, 0.0]), want_hessian=True)
    assert np.array_equal(hess, np.diag([-2.0, 1.0]))


def test_double_well_minima():
    prob = make_problem("double_well", 1, 0.0)
    for x in (-1.0, 1.0):
        assert base_value(prob, np.array([x])) == 0.0
        assert base_gradient(prob, np.array([x]))[0] == 0.0


def test_singleton_subset_equals_per_sample_loss():
    prob = make_problem("double_well", 3, 0.5, seed=1)
    data = sample_dataset(prob, 10)
    x = np.array([0.3, -0.2, 0.9])
    one = data.subset([4])
    value, grad, _ = evaluate(prob, one, x)
    z = data.samples[4]
    assert value == pytest.approx(per_sample_value(prob, x, z), rel=1e-14)
    assert np.allclose(grad, per_sample_gradient(prob, x, z), rtol=1e-14)


def test_empty_subset_and_bad_arguments():
    prob = make_problem("quadratic", 2, 0.1)
    with pytest.raises(ValueError):
        evaluate(prob, np.zeros((0, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        make_problem("quadratic", 0, 0.1)
    with pytest.raises(ValueError):
        make_problem("nonsense", 2, 0.1)


def test_constants_examples():
    cubic = problem_constants(make_problem("cubic_saddle", 2, 0.0), 4.0)
    assert cubic.rho == 2.0
    quad = problem_constants(make_problem("quadratic", 2, 0.0), 2.0)
    assert (quad.G, quad.M) == (1.0, 1.0)
    assert quad.rho == 1e-3
    for kind in KINDS:
        base = problem_constants(make_problem(kind, 3, 0.0), 3.0)
        pert = problem_constants(make_problem(kind, 3, 0.25), 3.0)
        assert pert.G - base.G == pytest.approx(0.25 * np.sqrt(3))


def test_spec_rejects_nonpositive_constants():
    with pytest.raises(ValueError):
        ObjectiveSpec(G=0.0, M=1, rho=1, B=1, D=1, d=1)
    with pytest.raises(ValueError):
        ObjectiveSpec(G=1, M=1, rho=1, B=1, D=1, d=0)


@pytest.mark.parametrize("kind", KINDS)
def test_finite_difference_gradient_and_hessian(kind):
    rng = np.random.default_rng(0)
    D = 4.0
    for d in (1, 2, 4):
        prob = make_problem(kind, d, 0.3, seed=2)
        data = sample_dataset(prob, 20)
        h = 1e-5 * D
        for _ in range(20):
            x = rng.uniform(-1.0, 1.0, d)
            _, grad, hess = evaluate(prob, data, x, want_hessian=True)
            fd = np.array([(evaluate(prob, data, x + h * e)[0] - evaluate(prob, data, x - h * e)[0])
                           / (2 * h) for e in np.eye(d)])
            assert np.linalg.norm(fd - grad) <= 1e-5 * max(1.0, np.linalg.norm(grad))
            fdh = np.array([(evaluate(prob, data, x + h * e)[1] - evaluate(prob, data, x - h * e)[1])
                            / (2 * h) for e in np.eye(d)])
            assert np.max(np.abs(fdh - hess)) <= 1e-4


@pytest.mark.parametrize("kind", KINDS)
def test_constants_hold_on_random_grid(kind):
    rng = np.random.default_rng(1)
    d, D = 2, 4.0
    prob = make_problem(kind, d, 0.2, seed=4)
    data = sample_dataset(prob, 50)
    spec = problem_constants(prob, D)
    R = D / 2
    g = rng.standard_normal((10_000, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    xs = g * R * np.sqrt(rng.random(10_000))[:, None]
    grads = base_gradient(prob, xs) + data.mean
    assert np.linalg.norm(grads, axis=1).max() <= spec.G
    hs = base_hessians(prob, xs)
    assert np.abs(np.linalg.eigvalsh(hs)).max() <= spec.M + 1e-12
    ys = xs[::-1]
    diff = np.linalg.norm(hs - base_hessians(prob, ys), ord=2, axis=(1, 2))
    assert np.all(diff <= spec.rho * np.linalg.norm(xs - ys, axis=1) + 1e-8)
    vals = base_value(prob, xs) + xs @ data.mean
    assert vals.max() - vals.min() <= spec.B


def test_batched_hessians_match_single():
    prob = make_problem("double_well", 3, 0.1)
    xs = np.random.default_rng(0).standard_normal((7, 3))
    batch = base_hessians(prob, xs)
    for x, h in zip(xs, batch):
        assert np.array_equal(h, base_hessian(prob, x))


def test_population_values_are_the_noise_free_shape():
    prob = make_problem("cubic_saddle", 2, 0.5, seed=0)
    data = sample_dataset(prob, 200_000)
    x = np.array([[0.4, -0.7]])
    emp = base_value(prob, x) + x @ data.mean
    assert emp[0] == pytest.approx(population_values(prob, x)[0], abs=5e-3)


def test_split_halves_sizes():
    data = Dataset(np.arange(14.0).reshape(7, 2))
    a, b = data.split_halves()
    assert (a.n, b.n) == (4, 3)
    assert not set(map(tuple, a.samples)) & set(map(tuple, b.samples))


def test_dataset_round_trip(tmp_path):
    prob = make_problem("double_well", 3, 0.7, seed=11)
    data = sample_dataset(prob, 9)
    path = tmp_path / "data.csv"
    save_dataset(path, data, prob)
    loaded, meta = load_dataset(path)
    assert np.array_equal(loaded.samples, data.samples)
    assert meta == {"kind": "double_well", "seed": 11, "n": 9, "d": 3, "perturbation_bound": 0.7}


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(KINDS), st.integers(1, 4), st.floats(0.0, 2.0), st.integers(0, 2**31))
def test_samples_stay_in_the_box(kind, d, p, seed):
    prob = make_problem(kind, d, p, seed=seed)
    data = sample_dataset(prob, 30)
    assert data.samples.shape == (30, d)
    assert np.all(np.abs(data.samples) <= p)
