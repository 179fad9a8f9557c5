"""Layer specifications and hand-written forward/backward passes.

All ops take and return arrays in (batch, maps, height, width) or
(batch, features) layout. They are dtype-generic: float32 in normal use,
float64 under the gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import kernels
from .tensor import DimensionError, ParameterError


# --------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Conv:
    maps: int
    kernel_h: int
    kernel_w: int
    stride: int = 1

    def __post_init__(self):
        if self.maps < 1 or self.kernel_h < 1 or self.kernel_w < 1:
            raise ParameterError(f"bad conv geometry {self}")
        if self.stride < 1:
            raise ParameterError(f"conv stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ParameterError(f"bad pooling geometry {self}")
        if self.stride > self.kernel:
            # ceil mode would then open windows that lie wholly past the border
            raise ParameterError(f"pool stride {self.stride} exceeds kernel {self.kernel}")


@dataclass(frozen=True)
class LCN:
    window: int = 9
    floor: float = 1e-4
    sigma: float | None = None  # Gaussian width; window / 4.5 when unset

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ParameterError(f"LCN window must be odd and >= 3, got {self.window}")
        if self.floor <= 0:
            raise ParameterError(f"LCN floor must be positive, got {self.floor}")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class FullyConnected:
    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ParameterError(f"units must be >= 1, got {self.units}")


@dataclass(frozen=True)
class Dropout:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ParameterError(f"dropout probability must lie in [0, 1), got {self.p}")


@dataclass(frozen=True)
class OutputSoftmax:
    classes: int

    def __post_init__(self):
        if self.classes < 2:
            raise ParameterError(f"softmax head needs >= 2 classes, got {self.classes}")

    @property
    def units(self):
        return self.classes


@dataclass(frozen=True)
class OutputBlockSoftmax:
    block_sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if not self.block_sizes or min(self.block_sizes) < 2:
            raise ParameterError(f"every block needs >= 2 classes, got {self.block_sizes}")

    @property
    def units(self):
        return sum(self.block_sizes)


@dataclass(frozen=True)
class OutputLinear:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"output dim must be >= 1, got {self.dim}")

    @property
    def units(self):
        return self.dim


LayerSpec = Union[Conv, MaxPool, LCN, ReLU, FullyConnected, Dropout, OutputSoftmax, OutputBlockSoftmax, OutputLinear]
OUTPUT_SPECS = (OutputSoftmax, OutputBlockSoftmax, OutputLinear)
PARAM_SPECS = (Conv, FullyConnected) + OUTPUT_SPECS


# --------------------------------------------------------------------------
# convolution


def _check_conv(x, w, b):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv expects 4-D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv input has {x.shape[1]} maps but weights {w.shape} expect {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv bias shape {b.shape} does not match {w.shape[0]} maps")
    if w.shape[2] > x.shape[2] or w.shape[3] > x.shape[3]:
        raise DimensionError(f"kernel {w.shape[2:]} exceeds input {x.shape[2:]}")


def conv_forward_cols(x, w, b, stride=1):
    """Valid cross-correlation; also returns the im2col matrix for reuse in backward."""
    _check_conv(x, w, b)
    bsz, _, h, wd = x.shape
    m, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    cols = kernels.im2col(x, kh, kw, stride)
    out = cols @ w.reshape(m, -1).T
    out += b
    return np.ascontiguousarray(out.reshape(bsz, ho, wo, m).transpose(0, 3, 1, 2)), cols


def conv_forward(x, w, b, stride=1):
    return conv_forward_cols(x, w, b, stride)[0]


def conv_backward(x, w, grad_out, stride=1, cols=None, need_input_grad=True):
    """Returns (grad_input, grad_weights, grad_biases); grad_input is None when
    ``need_input_grad`` is false (first layer)."""
    _check_conv(x, w, None)
    m, _, kh, kw = w.shape
    if cols is None:
        cols = kernels.im2col(x, kh, kw, stride)
    g2 = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, m)
    if g2.shape[0] != cols.shape[0]:
        raise DimensionError(f"conv grad_out {grad_out.shape} does not match input {x.shape}")
    gw = (g2.T @ cols).reshape(w.shape)
    gb = g2.sum(axis=0)
    if not need_input_grad:
        return None, gw, gb
    gx = kernels.col2im(g2 @ w.reshape(m, -1), x.shape, kh, kw, stride)
    return gx, gw, gb


# --------------------------------------------------------------------------
# pooling


def maxpool_forward(x, kernel, stride):
    if x.ndim != 4:
        raise DimensionError(f"max-pool expects 4-D input, got {x.shape}")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise DimensionError(f"pool kernel {kernel} exceeds input {x.shape[2:]}")
    if not 1 <= stride <= kernel:
        raise ParameterError(f"pool stride must lie in 1..kernel, got {stride} for kernel {kernel}")
    return kernels.maxpool_forward(np.ascontiguousarray(x), kernel, stride)


def maxpool_backward(argmax, grad_out, input_shape):
    if argmax.shape != grad_out.shape:
        raise DimensionError(f"argmax {argmax.shape} and grad_out {grad_out.shape} differ")
    return kernels.maxpool_backward(argmax, grad_out, input_shape)


# --------------------------------------------------------------------------
# local contrast normalization


def gaussian_taps(window, sigma=None, dtype=np.float64):
    """1-D taps whose outer product is a unit-sum 2-D Gaussian."""
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"LCN window must be odd and >= 3, got {window}")
    sigma = window / 4.5 if sigma is None else sigma
    t = np.arange(window) - window // 2
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return (g / g.sum()).astype(dtype)


def _coverage(shape, g):
    """Gaussian mass that falls inside the image at each position (1 in the interior)."""
    return kernels.gauss_same(np.ones((1,) + tuple(shape), dtype=g.dtype), g)[0]


def _lcn_parts(x, window, floor_const, sigma):
    if x.ndim != 4:
        raise DimensionError(f"LCN expects 4-D input, got {x.shape}")
    g = gaussian_taps(window, sigma, x.dtype)
    # zero-padded weighted sums, renormalized by the in-bounds weight so borders
    # see a proper weighted average
    cov = _coverage(x.shape[2:], g)
    mean = kernels.gauss_same(np.ascontiguousarray(x.mean(axis=1)), g) / cov
    v = x - mean[:, None]
    var = kernels.gauss_same(np.ascontiguousarray((v * v).mean(axis=1)), g) / cov
    sd = np.sqrt(np.maximum(var, 0))
    sd_mean = sd.mean(axis=(1, 2))
    denom = np.maximum(np.maximum(sd, sd_mean[:, None, None]), x.dtype.type(floor_const))
    return g, cov, v, sd, sd_mean, denom


def lcn_forward(x, window=9, floor_const=1e-4, sigma=None):
    _, _, v, _, _, denom = _lcn_parts(x, window, floor_const, sigma)
    return v / denom[:, None]


def lcn_backward(x, grad_out, window=9, floor_const=1e-4, sigma=None):
    if grad_out.shape != x.shape:
        raise DimensionError(f"LCN grad_out {grad_out.shape} does not match input {x.shape}")
    g, cov, v, sd, sd_mean, denom = _lcn_parts(x, window, floor_const, sigma)
    c = x.shape[1]
    npos = x.shape[2] * x.shape[3]
    gv = grad_out / denom[:, None]
    gdenom = -(grad_out * v).sum(axis=1) / (denom * denom)
    # route through max(sd_mean, sd, floor); ties resolve to the local sd
    pick_sd = (sd >= sd_mean[:, None, None]) & (sd >= floor_const)
    pick_mean = ~pick_sd & (sd_mean[:, None, None] >= floor_const)
    gsd = np.where(pick_sd, gdenom, 0)
    gsd = gsd + (np.where(pick_mean, gdenom, 0).sum(axis=(1, 2)) / npos)[:, None, None]
    safe = np.where(sd > 0, sd, 1)
    gvar = np.where(sd > 0, gsd / (2 * safe), 0).astype(x.dtype)
    # the zero-padded symmetric filter is self-adjoint
    gv = gv + 2 * v * (kernels.gauss_same(np.ascontiguousarray(gvar / cov), g) / c)[:, None]
    gmean = kernels.gauss_same(np.ascontiguousarray(gv.sum(axis=1) / cov), g) / c
    return gv - gmean[:, None]


# --------------------------------------------------------------------------
# dense, activation, dropout, heads


def fc_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"fully-connected input {x.shape} does not fit weights {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias {b.shape} does not fit weights {w.shape}")
    return x @ w.T + b


def fc_backward(x, w, grad_out):
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise DimensionError(f"grad_out {grad_out.shape} does not fit input {x.shape} and weights {w.shape}")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def dropout_forward(x, p, mode, rng):
    """Inverted dropout. Returns (output, keep_mask); the mask is None in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x, (None if mode == "eval" else np.ones(x.shape, dtype=bool))
    keep = rng.generator.random(size=x.shape, dtype=np.float32) >= p
    return x * (keep * x.dtype.type(1.0 / (1.0 - p))), keep


def dropout_backward(mask, p, grad_out):
    if mask is None:
        return grad_out
    return grad_out * (mask * grad_out.dtype.type(1.0 / (1.0 - p)))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def block_slices(block_sizes):
    edges = np.cumsum((0,) + tuple(block_sizes))
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def output_forward(logits, head):
    if logits.shape[-1] != head.units:
        raise DimensionError(f"{type(head).__name__} expects {head.units} logits, got {logits.shape[-1]}")
    if isinstance(head, OutputSoftmax):
        return softmax(logits)
    if isinstance(head, OutputBlockSoftmax):
        out = np.empty_like(logits)
        for sl in block_slices(head.block_sizes):
            out[..., sl] = softmax(logits[..., sl])
        return out
    if isinstance(head, OutputLinear):
        return logits
    raise ParameterError(f"not an output head: {head!r}")
