"""Pure-numpy kernels. Always importable; used when numba is disabled or absent."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride):
    """(B, C, H, W) -> (B*Ho*Wo, C*kh*kw), rows ordered (b, oh, ow)."""
    b, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride):
    b, c, h, w = x_shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    g = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g[..., i, j]
    return out


def pool_out_size(n, k, s):
    return -(-(n - k) // s) + 1


def maxpool_forward(x, k, s):
    b, c, h, w = x.shape
    ho, wo = pool_out_size(h, k, s), pool_out_size(w, k, s)
    ph, pw = (ho - 1) * s + k, (wo - 1) * s + k
    xp = np.full((b, c, ph, pw), -np.inf, dtype=x.dtype)
    xp[:, :, :h, :w] = x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    win = win.reshape(b, c, ho, wo, k * k)
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * s + local // k
    cols = np.arange(wo)[None, :] * s + local % k
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(argmax, grad_out, input_shape):
    b, c, h, w = input_shape
    n = b * c
    offs = (np.arange(n, dtype=np.int64) * (h * w))[:, None]
    flat_idx = (argmax.reshape(n, -1) + offs).ravel()
    acc = np.bincount(flat_idx, weights=grad_out.reshape(-1).astype(np.float64), minlength=n * h * w)
    return acc.reshape(input_shape).astype(grad_out.dtype)


def gauss_same(x, g):
    """Separable 'same' correlation with zero padding over the last two axes of (N, H, W)."""
    g = np.asarray(g, dtype=x.dtype)
    r = len(g) // 2
    n, h, w = x.shape
    xp = np.zeros((n, h + 2 * r, w), dtype=x.dtype)
    xp[:, r : r + h] = x
    tmp = np.zeros((n, h, w), dtype=x.dtype)
    for t in range(len(g)):
        tmp += g[t] * xp[:, t : t + h]
    xp = np.zeros((n, h, w + 2 * r), dtype=x.dtype)
    xp[:, :, r : r + w] = tmp
    out = np.zeros((n, h, w), dtype=x.dtype)
    for t in range(len(g)):
        out += g[t] * xp[:, :, t : t + w]
    return out
