"""numba-compiled kernels with the same signatures and tie-breaking as ``_numpy``."""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(x, kh, kw, stride, out):
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    for n in range(b):
        for oh in range(ho):
            for ow in range(wo):
                row = (n * ho + oh) * wo + ow
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        y = oh * stride + i
                        for j in range(kw):
                            out[row, col] = x[n, ch, y, ow * stride + j]
                            col += 1
    return out


def im2col(x, kh, kw, stride):
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.empty((b * ho * wo, c * kh * kw), dtype=x.dtype)
    return _im2col(np.ascontiguousarray(x), kh, kw, stride, out)


@njit(cache=True)
def _col2im(cols, kh, kw, stride, out):
    b, c, h, w = out.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    for n in range(b):
        for oh in range(ho):
            for ow in range(wo):
                row = (n * ho + oh) * wo + ow
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        y = oh * stride + i
                        for j in range(kw):
                            out[n, ch, y, ow * stride + j] += cols[row, col]
                            col += 1
    return out


def col2im(cols, x_shape, kh, kw, stride):
    out = np.zeros(x_shape, dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), kh, kw, stride, out)


@njit(cache=True)
def _maxpool_forward(x, k, s, out, arg):
    b, c, h, w = x.shape
    _, _, ho, wo = out.shape
    for n in range(b):
        for ch in range(c):
            for oh in range(ho):
                y0 = oh * s
                y1 = min(y0 + k, h)
                for ow in range(wo):
                    x0 = ow * s
                    x1 = min(x0 + k, w)
                    best = x[n, ch, y0, x0]
                    bi = y0 * w + x0
                    for y in range(y0, y1):
                        for xx in range(x0, x1):
                            v = x[n, ch, y, xx]
                            if v > best:
                                best = v
                                bi = y * w + xx
                    out[n, ch, oh, ow] = best
                    arg[n, ch, oh, ow] = bi


def maxpool_forward(x, k, s):
    b, c, h, w = x.shape
    ho = -(-(h - k) // s) + 1
    wo = -(-(w - k) // s) + 1
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    arg = np.empty((b, c, ho, wo), dtype=np.int64)
    _maxpool_forward(np.ascontiguousarray(x), k, s, out, arg)
    return out, arg


@njit(cache=True)
def _maxpool_backward(arg, g, acc):
    b, c, ho, wo = g.shape
    for n in range(b):
        for ch in range(c):
            for oh in range(ho):
                for ow in range(wo):
                    acc[n, ch, arg[n, ch, oh, ow]] += g[n, ch, oh, ow]


def maxpool_backward(argmax, grad_out, input_shape):
    b, c, h, w = input_shape
    acc = np.zeros((b, c, h * w), dtype=np.float64)
    _maxpool_backward(argmax, np.ascontiguousarray(grad_out), acc)
    return acc.reshape(input_shape).astype(grad_out.dtype)


@njit(cache=True)
def _gauss_same(x, g, tmp, out):
    n, h, w = x.shape
    r = len(g) // 2
    for m in range(n):
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for t in range(len(g)):
                    yy = y + t - r
                    if 0 <= yy < h:
                        acc += g[t] * x[m, yy, xx]
                tmp[m, y, xx] = acc
        for y in range(h):
            for xx in range(w):
                acc = 0.0
                for t in range(len(g)):
                    xs = xx + t - r
                    if 0 <= xs < w:
                        acc += g[t] * tmp[m, y, xs]
                out[m, y, xx] = acc
    return out


def gauss_same(x, g):
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    tmp = np.empty_like(x)
    out = np.empty_like(x)
    return _gauss_same(x, g, tmp, out)
