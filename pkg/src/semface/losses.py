"""Objectives. Each returns ``(loss, grad)`` where grad is taken w.r.t. the
output layer's logits (pre-softmax for the classification heads)."""

import numpy as np

from .layers import block_slices
from .tensor import DimensionError


class LabelError(ValueError):
    """Class index outside the head's range."""


_TINY = 1e-30


def nll_loss(probs, targets):
    probs = np.asarray(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise DimensionError(f"nll_loss: probs {probs.shape} vs targets {targets.shape}")
    k = probs.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise LabelError(f"target index out of range 0..{k - 1}: {targets.min()}..{targets.max()}")
    n = probs.shape[0]
    rows = np.arange(n)
    picked = probs[rows, targets].astype(np.float64)
    loss = float(-np.log(np.maximum(picked, _TINY)).mean())
    grad = probs.copy()
    grad[rows, targets] -= 1
    grad /= probs.dtype.type(n)
    return loss, grad


def block_nll_loss(probs, targets, block_sizes):
    """Sum over blocks of per-block mean NLL. Negative targets mark absent labels."""
    probs = np.asarray(probs)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (probs.shape[0], len(block_sizes)):
        raise DimensionError(f"block targets {targets.shape} do not fit probs {probs.shape} / blocks {block_sizes}")
    total = 0.0
    grad = np.zeros_like(probs)
    for j, sl in enumerate(block_slices(block_sizes)):
        present = targets[:, j] >= 0
        if not present.any():
            continue
        loss, g = nll_loss(probs[present, sl], targets[present, j])
        total += loss
        # rows without a label contribute nothing to this block
        grad[np.flatnonzero(present)[:, None], np.arange(sl.start, sl.stop)[None, :]] = g
    return total, grad


def mse_loss(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred - target.astype(pred.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, diff * pred.dtype.type(2.0 / diff.size)
