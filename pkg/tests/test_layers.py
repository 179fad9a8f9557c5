import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv_naive, finite_difference, gaussian_2d, lcn_naive, maxpool_naive, rel_error, weighted_same
from semface import kernels
from semface import layers as L
from semface.layers import LCN, Conv, Dropout, MaxPool, OutputBlockSoftmax, OutputLinear, OutputSoftmax
from semface.tensor import DimensionError, ParameterError, SeededRng

rng = np.random.default_rng(1234)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


# --- specs ---------------------------------------------------------------


@pytest.mark.parametrize(
    "make",
    [
        lambda: Conv(8, 3, 3, 0),
        lambda: Conv(0, 3, 3),
        lambda: MaxPool(3, 0),
        lambda: LCN(window=8),
        lambda: LCN(window=1),
        lambda: LCN(floor=0),
        lambda: Dropout(1.0),
        lambda: Dropout(-0.1),
        lambda: OutputSoftmax(1),
        lambda: OutputBlockSoftmax((2, 1)),
        lambda: OutputBlockSoftmax(()),
        lambda: OutputLinear(0),
    ],
)
def test_spec_invariants(make):
    with pytest.raises(ParameterError):
        make()


# --- convolution ---------------------------------------------------------


def test_conv_examples(backend):
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    w = np.array([[[[1, 0], [0, 1]]]], np.float32)
    assert L.conv_forward(x, w, np.zeros(1, np.float32)).tolist() == [[[[5.0]]]]
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    out = L.conv_forward(x, np.zeros((4, 3, 3, 3), np.float32), np.full(4, 7, np.float32))
    assert out.shape == (2, 4, 4, 4) and np.all(out == 7)
    same = np.repeat(x[:1], 2, axis=0)
    out = L.conv_forward(same, rng.normal(size=(2, 3, 3, 3)).astype(np.float32), np.zeros(2, np.float32))
    assert np.array_equal(out[0], out[1])


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        L.conv_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(DimensionError):
        L.conv_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 5, 5)), np.zeros(1))
    with pytest.raises(DimensionError):
        L.conv_forward(np.zeros((1, 1, 5, 5)), np.zeros((2, 1, 3, 3)), np.zeros(3))


def test_conv_matches_naive_oracle_100_cases(backend):
    g = np.random.default_rng(99)
    for _ in range(100):
        n, c, m = g.integers(1, 5), g.integers(1, 9), g.integers(1, 9)
        h, w = g.integers(1, 17), g.integers(1, 17)
        kh, kw = g.integers(1, h + 1), g.integers(1, w + 1)
        s = int(g.integers(1, 3))
        x = g.uniform(-1, 1, (n, c, h, w))
        wt = g.uniform(-1, 1, (m, c, kh, kw))
        b = g.uniform(-1, 1, m)
        got = L.conv_forward(x, wt, b, s)
        assert np.max(np.abs(got - conv_naive(x, wt, b, s))) <= 1e-6


def test_conv_backward_zero_and_single_pixel(backend):
    x = rng.normal(size=(1, 2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 2))
    gx, gw, gb = L.conv_backward(x, w, np.zeros((1, 3, 4, 4)))
    assert not gx.any() and not gw.any() and not gb.any()
    go = np.zeros((1, 3, 4, 4))
    go[0, 1, 2, 3] = 1.0
    _, gw, gb = L.conv_backward(x, w, go)
    assert np.allclose(gw[1], x[0, :, 2:5, 3:5]) and not gw[[0, 2]].any()
    assert gb.tolist() == [0, 1, 0]


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_finite_difference(backend, stride):
    x = rng.normal(size=(2, 2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 2))
    b = rng.normal(size=3)
    proj = rng.normal(size=L.conv_forward(x, w, b, stride).shape)
    f = lambda x_, w_, b_: float((L.conv_forward(x_, w_, b_, stride) * proj).sum())  # noqa: E731
    gx, gw, gb = L.conv_backward(x, w, proj, stride)
    assert rel_error(gx, finite_difference(lambda v: f(v, w, b), x)) < 1e-4
    assert rel_error(gw, finite_difference(lambda v: f(x, v, b), w)) < 1e-4
    assert rel_error(gb, proj.sum(axis=(0, 2, 3))) < 1e-10


# --- pooling -------------------------------------------------------------


def test_pool_examples(backend):
    out, arg = L.maxpool_forward(np.array([[[[1, 2], [3, 4]]]], np.float32), 2, 2)
    assert out.tolist() == [[[[4.0]]]] and int(arg.ravel()[0]) == 3
    out, _ = L.maxpool_forward(np.zeros((1, 1, 44, 44), np.float32), 3, 2)
    assert out.shape == (1, 1, 22, 22)
    out, _ = L.maxpool_forward(np.full((2, 3, 9, 9), 2.5, np.float32), 3, 2)
    assert np.all(out == 2.5)


def test_pool_matches_naive(backend):
    g = np.random.default_rng(5)
    for _ in range(30):
        k = int(g.integers(1, 4))
        s = int(g.integers(1, k + 1))
        x = g.normal(size=(2, 2, int(g.integers(k, 12)), int(g.integers(k, 12))))
        out, _ = L.maxpool_forward(x, k, s)
        assert np.array_equal(out, maxpool_naive(x, k, s))


def test_pool_first_max_wins(backend):
    x = np.ones((1, 1, 3, 3), np.float32)
    _, arg = L.maxpool_forward(x, 3, 2)
    assert int(arg.ravel()[0]) == 0


def test_pool_backward(backend):
    x = rng.normal(size=(2, 3, 8, 8))
    out, arg = L.maxpool_forward(x, 2, 2)
    assert not L.maxpool_backward(arg, np.zeros_like(out), x.shape).any()
    go = rng.normal(size=out.shape)
    gi = L.maxpool_backward(arg, go, x.shape)
    assert np.isclose(gi.sum(), go.sum())
    # overlapping windows, unique maxima with probability one
    out, arg = L.maxpool_forward(x, 3, 2)
    go = rng.normal(size=out.shape)
    gi = L.maxpool_backward(arg, go, x.shape)
    num = finite_difference(lambda v: float((L.maxpool_forward(v, 3, 2)[0] * go).sum()), x)
    assert rel_error(gi, num) < 1e-4


def test_pool_kernel_too_large():
    with pytest.raises(DimensionError):
        L.maxpool_forward(np.zeros((1, 1, 2, 2)), 3, 1)
    with pytest.raises(ParameterError):
        MaxPool(2, 3)


# --- LCN -----------------------------------------------------------------


def test_lcn_constant_input(backend):
    # rounding in the subtraction is amplified by 1 / floor
    assert np.allclose(L.lcn_forward(np.full((1, 2, 12, 12), 3.0)), 0, atol=1e-9)


def test_lcn_matches_loop_oracle(backend):
    x = rng.normal(size=(2, 3, 13, 11))
    assert np.max(np.abs(L.lcn_forward(x) - lcn_naive(x))) < 1e-10
    assert np.max(np.abs(L.lcn_forward(x, window=5, floor_const=1e-2) - lcn_naive(x, 5, 1e-2))) < 1e-10


def test_lcn_sigma_default():
    taps = L.gaussian_taps(9)
    assert np.allclose(np.outer(taps, taps), gaussian_2d(9, 2.0))
    assert np.isclose(taps.sum(), 1.0)
    with pytest.raises(ParameterError):
        L.gaussian_taps(4)


def test_lcn_weighted_mean_identity(backend):
    # the subtractive step removes the local mean of the input, not of its own output:
    # A(mean_c(v)) = A(m) - A(A(m)) with m = mean_c(x) and A the local weighted average
    x = rng.normal(3, 2, (1, 4, 24, 24))
    g = gaussian_2d(9, 2.0)
    cov = weighted_same(np.ones((24, 24)), g)
    avg = lambda a: weighted_same(a, g) / cov  # noqa: E731
    am = avg(x[0].mean(axis=0))
    y = L.lcn_forward(x)
    v = x[0] - am
    assert np.allclose(y[0] * L._lcn_parts(x, 9, 1e-4, None)[5][0], v)
    assert np.allclose(avg(v.mean(axis=0)), am - avg(am))
    # locally linear content is removed entirely away from the border
    ramp = np.add.outer(np.arange(24.0), 2 * np.arange(24.0))[None, None]
    assert np.allclose(L.lcn_forward(ramp)[0, 0, 4:-4, 4:-4], 0, atol=1e-9)


def test_lcn_scale_invariance(backend):
    x = rng.normal(size=(2, 2, 16, 16))
    y1, y10 = L.lcn_forward(x), L.lcn_forward(10 * x)
    sd = L._lcn_parts(x, 9, 1e-4, None)[3]
    ok = np.broadcast_to((sd > 1e-4)[:, None], x.shape)
    assert np.max(np.abs(y1 - y10)[ok]) < 1e-3


def test_lcn_backward_zero_and_fd(backend):
    x = rng.normal(size=(2, 2, 10, 10))
    assert not L.lcn_backward(x, np.zeros_like(x)).any()
    go = rng.normal(size=x.shape)
    num = finite_difference(lambda v: float((L.lcn_forward(v) * go).sum()), x, step=1e-6)
    assert rel_error(L.lcn_backward(x, go), num) < 1e-3


def test_lcn_backward_constant_input():
    # at sigma = 0 the divisor is the floor, so only the subtractive path remains
    x = np.full((1, 2, 10, 10), 1.5)
    go = rng.normal(size=x.shape)
    taps = L.gaussian_taps(9)
    cov = kernels.gauss_same(np.ones((1, 10, 10)), taps)[0]
    sub = go - kernels.gauss_same(go.sum(axis=1) / cov, taps)[:, None] / 2
    assert np.allclose(L.lcn_backward(x, go), sub / 1e-4)


# --- dense, relu, dropout, heads ------------------------------------------


def test_relu_and_fc_examples():
    assert L.relu_forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert L.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)).tolist() == [0, 0, 1]
    x = rng.normal(size=(3, 4))
    assert np.array_equal(L.fc_forward(x, np.eye(4), np.zeros(4)), x)
    with pytest.raises(DimensionError):
        L.fc_forward(x, np.eye(3), np.zeros(3))


def test_fc_relu_finite_difference():
    x = rng.normal(size=(3, 5))
    x[np.abs(x) < 1e-3] = 0.5
    w, b = rng.normal(size=(4, 5)), rng.normal(size=4)
    go = rng.normal(size=(3, 4))
    gx, gw, gb = L.fc_backward(x, w, go)
    f = lambda x_, w_, b_: float((L.fc_forward(x_, w_, b_) * go).sum())  # noqa: E731
    assert rel_error(gx, finite_difference(lambda v: f(v, w, b), x)) < 1e-4
    assert rel_error(gw, finite_difference(lambda v: f(x, v, b), w)) < 1e-4
    assert rel_error(gb, finite_difference(lambda v: f(x, w, v), b)) < 1e-4
    go2 = rng.normal(size=x.shape)
    num = finite_difference(lambda v: float((L.relu_forward(v) * go2).sum()), x)
    assert rel_error(L.relu_backward(x, go2), num) < 1e-4


def test_dropout_modes():
    x = rng.normal(size=(10, 10)).astype(np.float32)
    out, mask = L.dropout_forward(x, 0.5, "eval", SeededRng(0))
    assert out is x and mask is None
    out, mask = L.dropout_forward(x, 0.0, "train", SeededRng(0))
    assert np.array_equal(out, x) and mask.all()
    with pytest.raises(ParameterError):
        L.dropout_forward(x, 1.0, "train", SeededRng(0))


def test_dropout_expectation():
    x = np.ones(100_000, np.float32)
    out, mask = L.dropout_forward(x, 0.5, "train", SeededRng(3))
    assert abs(out.mean() / x.mean() - 1) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert np.array_equal(L.dropout_backward(mask, 0.5, x), out)


def test_output_heads():
    assert np.allclose(L.output_forward(np.zeros((1, 2)), OutputSoftmax(2)), 0.5)
    got = L.output_forward(np.zeros((1, 5)), OutputBlockSoftmax((2, 3)))
    assert np.allclose(got, [[0.5, 0.5, 1 / 3, 1 / 3, 1 / 3]])
    z = rng.normal(size=(4, 3))
    assert np.array_equal(L.output_forward(z, OutputLinear(3)), z)
    with pytest.raises(DimensionError):
        L.output_forward(z, OutputSoftmax(4))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 6), min_size=1, max_size=4), st.integers(1, 5), st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_softmax_rows_normalized(blocks, n, seed, scale):
    z = (np.random.default_rng(seed).normal(size=(n, sum(blocks))) * scale).astype(np.float32)
    p = L.output_forward(z, OutputBlockSoftmax(blocks))
    assert np.all(p >= 0)
    for sl in L.block_slices(blocks):
        assert np.allclose(p[:, sl].sum(axis=1), 1, atol=1e-6)
    p = L.output_forward(z, OutputSoftmax(z.shape[1]))
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)
