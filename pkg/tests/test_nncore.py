import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient
from sgdlines.errors import NumericError, SpecificationError
from sgdlines.nncore import (Model, ModelSpec, SampleBatch, axpy_point, directional_derivative,
                             fixed_mean, init_bound, init_model, param_count)


def make_batch(rng, n, dim, classes):
    return SampleBatch(np.arange(n), rng.standard_normal((n, dim)), rng.integers(0, classes, n))


def test_init_deterministic_and_counted():
    spec = ModelSpec((2, 3, 2), seed=7)
    assert np.array_equal(init_model(spec), init_model(spec))
    assert param_count(spec) == 2 * 3 + 3 + 3 * 2 + 2 == 17
    assert init_model(ModelSpec((2, 3, 2), seed=99)).size == 17


def test_init_within_bound():
    spec = ModelSpec((4, 8, 8, 3), seed=1)
    model = Model(spec)
    p = init_model(spec)
    for ws, bs, fan_in, fan_out in model._slices:
        assert np.all(np.abs(p[ws]) <= init_bound(fan_in, fan_out))
        assert np.all(p[bs] == 0)
    assert init_bound(4, 8) == math.sqrt(6 / 12)


@pytest.mark.parametrize("layers", [(0, 3), (3,), (2, -1, 2)])
def test_invalid_layers(layers):
    with pytest.raises(SpecificationError):
        ModelSpec(layers)


def test_uniform_output_gives_log_c():
    spec = ModelSpec((3, 4, 5), seed=0)
    model = Model(spec)
    p = init_model(spec)
    ws, bs, _, _ = model._slices[-1]
    p[ws] = 0.0
    p[bs] = 0.0
    batch = make_batch(np.random.default_rng(0), 7, 3, 5)
    np.testing.assert_allclose(model.per_sample_losses(p, batch), math.log(5), rtol=0, atol=1e-15)


def test_hand_built_cross_entropy():
    # one linear layer, 2 inputs -> 3 classes
    W = [[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]]
    b = [0.1, 0.2, -0.3]
    X = [[1.0, 2.0], [-1.0, 0.5], [0.0, 0.0]]
    y = [1, 0, 2]
    expected = []
    for x, label in zip(X, y):
        logits = [sum(x[i] * W[i][j] for i in range(2)) + b[j] for j in range(3)]
        z = sum(math.exp(v) for v in logits)
        expected.append(-math.log(math.exp(logits[label]) / z))
    model = Model(ModelSpec((2, 3)))
    params = np.array([v for row in W for v in row] + b)
    got = model.per_sample_losses(params, SampleBatch(np.arange(3), np.array(X), np.array(y)))
    np.testing.assert_allclose(got, expected, rtol=1e-14)


def test_dimension_mismatch():
    model = Model(ModelSpec((3, 2)))
    batch = make_batch(np.random.default_rng(0), 4, 5, 2)
    with pytest.raises(SpecificationError):
        model.per_sample_losses(np.zeros(model.size), batch)
    with pytest.raises(SpecificationError):
        model.per_sample_losses(np.zeros(model.size + 1), make_batch(np.random.default_rng(0), 4, 3, 2))


def test_quadratic_head_gradient():
    model = Model(ModelSpec((6,), kind="quadratic"))
    theta = np.random.default_rng(1).standard_normal(6)
    batch = SampleBatch(np.arange(4), np.zeros((4, 1)), np.zeros(4, dtype=int))
    loss, grad = model.loss_and_grad(theta, batch)
    assert loss == pytest.approx(np.dot(theta, theta), rel=1e-15)
    np.testing.assert_allclose(grad, 2 * theta, rtol=1e-15)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(5)
    spec = ModelSpec((4, 6, 3), activation, seed=3)
    model = Model(spec)
    p = init_model(spec) + 0.1 * rng.standard_normal(model.size)
    batch = make_batch(rng, 9, 4, 3)
    _, grad = model.loss_and_grad(p, batch)
    fd = fd_gradient(lambda q: model.loss(q, batch), p)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-6


def test_single_sample_batch_gradient():
    rng = np.random.default_rng(2)
    spec = ModelSpec((3, 4, 2), "tanh", seed=1)
    model = Model(spec)
    p = init_model(spec)
    big = make_batch(rng, 5, 3, 2)
    one = SampleBatch(big.indices[2:3], big.features[2:3], big.labels[2:3])
    _, g1 = model.loss_and_grad(p, one)
    slopes = model.per_sample_dderiv(p, g1 / np.linalg.norm(g1), big)
    assert slopes[2] == pytest.approx(np.linalg.norm(g1), rel=1e-12)


def test_numeric_error_names_layer():
    spec = ModelSpec((2, 3, 2), seed=0)
    model = Model(spec)
    p = init_model(spec)
    p[0] = np.inf
    batch = SampleBatch(np.arange(1), np.array([[1.0, 1.0]]), np.array([0]))
    with pytest.raises(NumericError) as info:
        model.loss_and_grad(p, batch)
    assert info.value.layer == 0


def test_axpy_point():
    origin = np.array([1.0, 2.0])
    assert np.array_equal(axpy_point(origin, 0.5, np.array([2.0, -2.0])), [2.0, 1.0])
    out = axpy_point(origin, 0.0, np.array([np.nan, 1.0]))
    assert np.array_equal(out, origin) and out is not origin
    with pytest.raises(SpecificationError):
        axpy_point(origin, 1.0, np.zeros(3))


def test_directional_derivative_identities():
    rng = np.random.default_rng(8)
    spec = ModelSpec((4, 5, 3), "relu", seed=4)
    model = Model(spec)
    p = init_model(spec)
    batch = make_batch(rng, 16, 4, 3)
    _, g = model.loss_and_grad(p, batch)
    d = -g / np.linalg.norm(g)
    assert directional_derivative(model, p, d, batch) == pytest.approx(-np.linalg.norm(g), rel=1e-10)
    r = rng.standard_normal(g.size)
    r -= np.dot(r, g) / np.dot(g, g) * g
    r /= np.linalg.norm(r)
    assert abs(directional_derivative(model, p, r, batch)) < 1e-9
    with pytest.raises(SpecificationError):
        directional_derivative(model, p, 2 * d, batch)


def test_per_sample_dderiv_mean_is_batch_slope():
    rng = np.random.default_rng(3)
    spec = ModelSpec((4, 7, 7, 3), "relu", seed=5)
    model = Model(spec)
    p = init_model(spec)
    batch = make_batch(rng, 20, 4, 3)
    _, g = model.loss_and_grad(p, batch)
    d = rng.standard_normal(g.size)
    d /= np.linalg.norm(d)
    slopes = model.per_sample_dderiv(p, d, batch)
    assert fixed_mean(slopes) == pytest.approx(float(np.dot(g, d)), rel=1e-10, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_fixed_mean_order_independent(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert fixed_mean(values) == fixed_mean(shuffled)
