import numpy as np
import pytest

from semface import layers as L
from semface import network as N
from semface.layers import LCN, Conv, Dropout, FullyConnected, MaxPool, OutputBlockSoftmax, OutputLinear, OutputSoftmax, ReLU
from semface.network import (
    ArchitectureError,
    LayerError,
    build_network,
    gradient_check,
    infer_shapes,
    network_backward,
    network_forward,
    default_net,
    default_specs,
    predict,
    spatial_sizes,
    stack_specs,
)
from semface.tensor import DimensionError, ParameterError


def mini_default_specs(head=None):
    return [
        Conv(3, 5, 5), ReLU(), LCN(), MaxPool(3, 2),
        Conv(3, 3, 3), ReLU(),
        Conv(4, 2, 2), ReLU(),
        FullyConnected(6), ReLU(), Dropout(0.2),
        head or OutputSoftmax(7),
    ]


def test_default_shapes():
    assert spatial_sizes(default_specs(), (1, 48, 48)) == [44, 22, 18, 15]
    shapes = infer_shapes(default_specs(), (1, 48, 48))
    assert shapes[-1] == (7,) and shapes[-3] == (3072,)


def test_infer_shapes_examples():
    assert infer_shapes([Conv(1, 1, 1, 1)], (1, 9, 7))[0] == (1, 9, 7)
    with pytest.raises(ArchitectureError, match="layer 0"):
        infer_shapes([Conv(2, 5, 5)], (1, 4, 4))
    with pytest.raises(ArchitectureError, match="layer 3"):
        infer_shapes([Conv(2, 3, 3), ReLU(), MaxPool(3, 2), Conv(2, 3, 3)], (1, 6, 6))


def test_stack_specs_defaults_reproduce_default_net():
    assert stack_specs(OutputSoftmax(7)) == default_specs()
    specs = stack_specs(OutputSoftmax(2), depth=4, width=0.5, lcn_mask="0100", pool_mask="0011", dropout_conv=0.1)
    convs = [s for s in specs if isinstance(s, Conv)]
    assert [c.maps for c in convs] == [32, 32, 32, 64]
    assert sum(isinstance(s, LCN) for s in specs) == 1
    assert sum(isinstance(s, MaxPool) for s in specs) == 2
    with pytest.raises(ParameterError):
        stack_specs(OutputSoftmax(2), depth=3, lcn_mask="10")
    with pytest.raises(ParameterError):
        stack_specs(OutputSoftmax(2), depth=9)


def test_default_net_forward_batch_100():
    net = default_net(seed=0).eval()
    x = np.random.default_rng(0).normal(size=(100, 1, 48, 48)).astype(np.float32)
    p, _ = network_forward(net, x)
    assert p.shape == (100, 7) and p.dtype == np.float32
    assert np.allclose(p.sum(axis=1), 1, atol=1e-5)
    # momentum buffers start at zero and mirror parameters
    for w, m in zip(net.weights, net.momentum_w):
        assert (w is None) == (m is None)
        if w is not None:
            assert m.shape == w.shape and not m.any()


def test_init_is_glorot_uniform():
    net = default_net(seed=3)
    w = net.weights[0]
    limit = np.sqrt(6 / (25 + 64 * 25))
    assert np.abs(w).max() <= limit and np.abs(w).max() > 0.9 * limit
    assert all(not b.any() for b in net.biases if b is not None)


def test_determinism():
    x = np.random.default_rng(1).normal(size=(4, 1, 12, 12)).astype(np.float32)
    a = build_network(mini_default_specs(), (1, 12, 12), seed=5)
    b = build_network(mini_default_specs(), (1, 12, 12), seed=5)
    pa, pb = network_forward(a, x)[0], network_forward(b, x)[0]
    assert np.array_equal(pa, pb)
    c = build_network(mini_default_specs(), (1, 12, 12), seed=6)
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_single_layer_net_equals_op():
    net = build_network([OutputLinear(3)], (2, 2, 2), seed=0)
    x = np.random.default_rng(2).normal(size=(5, 2, 2, 2)).astype(np.float32)
    p, _ = network_forward(net, x)
    assert np.allclose(p, L.fc_forward(x.reshape(5, -1), net.weights[0], net.biases[0]))


def test_forward_errors():
    net = build_network(mini_default_specs(), (1, 12, 12))
    with pytest.raises(DimensionError):
        network_forward(net, np.zeros((2, 1, 10, 10)))
    with pytest.raises(ArchitectureError):
        build_network([Conv(2, 3, 3), ReLU()], (1, 8, 8))


def test_layer_error_names_index(monkeypatch):
    net = build_network(mini_default_specs(), (1, 12, 12))

    def broken(*a, **k):
        raise DimensionError("boom")

    monkeypatch.setattr(N.L, "lcn_forward", broken)
    with pytest.raises(LayerError) as info:
        network_forward(net, np.zeros((1, 1, 12, 12)))
    assert info.value.index == 2


def test_predict_restores_mode_and_is_deterministic():
    net = build_network(mini_default_specs(), (1, 12, 12), seed=1)
    x = np.random.default_rng(3).normal(size=(7, 1, 12, 12)).astype(np.float32)
    a = predict(net, x, batch_size=3)
    b = predict(net, x, batch_size=100)
    assert net.mode == "train"
    assert np.allclose(a, b, atol=1e-6) and np.array_equal(a, predict(net, x, batch_size=3))


def test_gradient_check_linear_mse():
    net = build_network([OutputLinear(3)], (1, 2, 2), seed=0)
    x = np.random.default_rng(0).normal(size=(4, 1, 2, 2))
    t = np.random.default_rng(1).normal(size=(4, 3))
    rep = gradient_check(net, x, t, tolerance=1e-6)
    assert rep.passed and rep.max_error < 1e-6


@pytest.mark.parametrize(
    "head,targets",
    [
        (OutputSoftmax(7), np.array([1, 5])),
        (OutputBlockSoftmax((3, 2, 2)), np.array([[0, 1, -1], [2, 0, 1]])),
        (OutputLinear(4), np.array([[0.5, -1, 0.2, 0.0], [1.0, 0.3, -0.4, 2.0]])),
    ],
)
def test_gradient_check_mini_default_net(head, targets):
    net = build_network(mini_default_specs(head), (1, 12, 12), seed=2)
    x = np.random.default_rng(4).normal(size=(2, 1, 12, 12))
    rep = gradient_check(net, x, targets, tolerance=1e-3)
    assert rep.passed, rep.errors
    assert sum(rep.checked.values()) > 0.9 * (sum(rep.checked.values()) + sum(rep.skipped.values()))


def test_gradient_check_flags_corrupted_layer(monkeypatch):
    net = build_network(mini_default_specs(), (1, 12, 12), seed=2)
    x = np.random.default_rng(4).normal(size=(2, 1, 12, 12))
    real = L.conv_backward

    def flipped(x_, w, g, stride=1, cols=None, need_input_grad=True):
        gx, gw, gb = real(x_, w, g, stride, cols=cols, need_input_grad=need_input_grad)
        if w.shape[0] == 4:  # the third conv only
            gw = -gw
        return gx, gw, gb

    monkeypatch.setattr(N.L, "conv_backward", flipped)
    rep = gradient_check(net, x, np.array([0, 3]))
    assert not rep.passed
    assert rep.failing_layers() == [6]


def test_backward_returns_all_param_grads():
    net = build_network(mini_default_specs(), (1, 12, 12), seed=0)
    x = np.random.default_rng(0).normal(size=(3, 1, 12, 12)).astype(np.float32)
    p, cache = network_forward(net, x)
    gw, gb = network_backward(net, cache, p - 0.1)
    for i in net.param_layers():
        assert gw[i].shape == net.weights[i].shape and gb[i].shape == net.biases[i].shape
