from __future__ import annotations

import numpy as np
import pytest

from metanas.genotype import MacroConfig, decode, graph_params
from metanas.nn import (
    Network,
    avg_pool,
    conv2d,
    max_pool,
    softmax,
    softmax_cross_entropy,
    squeeze_excite,
    subsample,
)

from helpers import individual, numeric_grad, relative_errors

MACRO = MacroConfig(num_cells=3, channels=4, input_shape=(6, 6, 2), num_classes=3,
                    reduction_positions=(1,))


def _naive_conv(x, w, b, stride):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pt, kh - 1 - pt), (pl, kw - 1 - pl)))
    ho, wo = -(-h // stride), -(-wd // stride)
    y = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            y[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    return y


@pytest.mark.parametrize("kh,kw,stride", [(3, 3, 1), (1, 7, 2), (1, 1, 2), (3, 1, 1)])
def test_conv_matches_naive_loop(rng, kh, kw, stride):
    x = rng.normal(size=(2, 3, 7, 6))
    w, b = rng.normal(size=(4, 3, kh, kw)), rng.normal(size=4)
    y, _ = conv2d(x, w, b, stride, np.zeros_like(w), np.zeros_like(b))
    assert np.allclose(y, _naive_conv(x, w, b, stride))


def _check_primitive(rng, fn, x):
    """Compare ``backward`` with central differences of ``sum(y * r)``."""
    y, back = fn(x)
    r = rng.normal(size=y.shape)
    dx = back(r)
    coords = [tuple(rng.integers(s) for s in x.shape) for _ in range(12)]

    def f(v):
        return float((fn(v)[0] * r).sum())

    num = []
    for c in coords:
        e = np.zeros_like(x)
        e[c] = 1e-6
        num.append((f(x + e) - f(x - e)) / 2e-6)
    assert relative_errors([dx[c] for c in coords], num).max() < 1e-5


@pytest.mark.parametrize("stride", [1, 2])
def test_pool_and_se_backward(rng, stride):
    x = rng.normal(size=(2, 3, 5, 5))
    _check_primitive(rng, lambda v: max_pool(v, 3, stride), x)
    _check_primitive(rng, lambda v: avg_pool(v, 5, stride), x)
    _check_primitive(rng, lambda v: subsample(v, stride), x)
    w1, w2 = rng.normal(size=(1, 3)), rng.normal(size=(3, 1))
    _check_primitive(rng, lambda v: squeeze_excite(v, w1, w2, stride, np.zeros_like(w1),
                                                   np.zeros_like(w2)), x)


def test_avg_pool_excludes_padding():
    y, _ = avg_pool(np.ones((1, 1, 4, 4)), 3, 1)
    assert np.allclose(y, 1.0)


def test_softmax_cross_entropy():
    logits = np.array([[0.0, 0.0], [10.0, -10.0]])
    loss, grad = softmax_cross_entropy(logits, np.array([0, 0]))
    assert loss == pytest.approx(0.5 * np.log(2), rel=1e-6)
    assert np.allclose(softmax(logits).sum(axis=1), 1.0)
    assert np.allclose(grad.sum(axis=1), 0.0)


def test_network_size_equals_parameter_count():
    ind = individual([("10", 3), ("011", 12), ("0011", 5)], [("11", 4), ("101", 8)])
    graph = decode(ind, MACRO)
    assert Network(graph).size == graph_params(graph)


def test_network_gradient_matches_finite_differences(rng):
    ind = individual([("11", 3), ("011", 10)], [("01", 12), ("111", 2)])
    net = Network(decode(ind, MACRO))
    x, y = rng.normal(size=(3, 2, 6, 6)), rng.integers(0, 3, 3)
    mu = net.calibrate(net.init_params(rng), x)
    _, g = net.loss_and_grad(mu, x, y)
    coords = rng.choice(net.size, 40, replace=False)
    num = numeric_grad(lambda v: net.loss(v, x, y), mu, coords)
    assert relative_errors(g[coords], num).max() < 1e-4


def test_calibration_normalizes_activations(rng):
    ind = individual([("11", 3), ("111", 3), ("1111", 3)], [("11", 3)])
    net = Network(decode(ind, MACRO))
    x = rng.normal(size=(16, 2, 6, 6)) * 50
    raw = net.init_params(rng)
    cal = net.calibrate(raw, x)
    assert np.abs(net.forward(cal, x)).max() < np.abs(Network(net.graph).forward(raw, x)).max()


def test_zero_head_gives_uniform_predictions(rng):
    net = Network(decode(individual([("11", 2)], [("11", 2)]), MACRO))
    mu = net.init_params(rng, zero_head=True)
    loss = net.loss(mu, rng.normal(size=(4, 2, 6, 6)), np.array([0, 1, 2, 0]))
    assert loss == pytest.approx(np.log(3))
