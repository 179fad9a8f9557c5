"""Mini-batch SGD with momentum, the linear learning-rate schedule, task heads,
validation-based early stopping and dataset splitting."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .layers import OutputBlockSoftmax, OutputLinear, OutputSoftmax, block_slices
from .losses import block_nll_loss, mse_loss, nll_loss
from .network import NetworkState, network_backward, network_forward, predict
from .tensor import DTYPE, DataError, DimensionError, ParameterError, SeededRng

logger = logging.getLogger(__name__)

SHUFFLE_STREAM = 20_000


@dataclass
class TrainConfig:
    batch_size: int = 100
    lr_start: float = 0.0025
    lr_end: float = 0.001
    epochs: int = 50
    momentum: float = 0.9
    seed: int = 0
    patience: int | None = 10  # None or 0 disables early stopping
    target_criterion: float | None = None  # stop once the validation criterion reaches this

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_start >= self.lr_end > 0:
            raise ParameterError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience is not None and self.patience < 0:
            raise ParameterError(f"patience must be >= 0, got {self.patience}")


# --------------------------------------------------------------------------
# heads


@dataclass(frozen=True)
class Exclusive:
    classes: int

    def __post_init__(self):
        if self.classes < 2:
            raise ParameterError(f"classes must be >= 2, got {self.classes}")

    def output_spec(self):
        return OutputSoftmax(self.classes)

    def loss(self, preds, targets):
        return nll_loss(preds, targets)

    def criterion(self, preds, targets):
        """Misclassification rate."""
        return float(np.mean(np.argmax(preds, axis=1) != np.asarray(targets)))


@dataclass(frozen=True)
class JointBlocks:
    block_sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if not self.block_sizes or min(self.block_sizes) < 2:
            raise ParameterError(f"every block needs >= 2 classes, got {self.block_sizes}")

    def output_spec(self):
        return OutputBlockSoftmax(self.block_sizes)

    def loss(self, preds, targets):
        return block_nll_loss(preds, targets, self.block_sizes)

    def block_predictions(self, preds):
        return np.stack([np.argmax(preds[:, sl], axis=1) for sl in block_slices(self.block_sizes)], axis=1)

    def block_accuracies(self, preds, targets):
        targets = np.asarray(targets)
        pred = self.block_predictions(preds)
        accs = []
        for j in range(len(self.block_sizes)):
            present = targets[:, j] >= 0
            accs.append(float(np.mean(pred[present, j] == targets[present, j])) if present.any() else float("nan"))
        return accs

    def criterion(self, preds, targets):
        """Mean misclassification rate over blocks."""
        return float(1.0 - np.nanmean(self.block_accuracies(preds, targets)))


@dataclass(frozen=True)
class Regression:
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"dim must be >= 1, got {self.dim}")

    def output_spec(self):
        return OutputLinear(self.dim)

    def loss(self, preds, targets):
        return mse_loss(preds, targets)

    def criterion(self, preds, targets):
        """Mean squared error."""
        return mse_loss(preds, np.asarray(targets, dtype=preds.dtype))[0]


TaskHead = Exclusive | JointBlocks | Regression


def head_for(net: NetworkState):
    spec = net.head
    if isinstance(spec, OutputSoftmax):
        return Exclusive(spec.classes)
    if isinstance(spec, OutputBlockSoftmax):
        return JointBlocks(spec.block_sizes)
    return Regression(spec.dim)


# --------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    targets: np.ndarray  # (N,) int, (N, blocks) int, or (N, dim) float

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        self.targets = np.asarray(self.targets)
        if self.images.ndim != 4 or len(self.images) != len(self.targets):
            raise DimensionError(f"dataset images {self.images.shape} vs targets {self.targets.shape}")

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.targets[idx])


USAGE_SPLITS = {"Training": 0, "PublicTest": 1, "PrivateTest": 2, "train": 0, "valid": 1, "test": 2}


def split_dataset(items, fractions=(0.8, 0.1, 0.1), seed=0, usage=None):
    """Seeded shuffle then contiguous split into (train, valid, test) lists.

    When ``usage`` tags are given (FER2013's Usage column or train/valid/test),
    they decide the split instead and item order is preserved.
    """
    items = list(items)
    if usage is not None:
        if len(usage) != len(items):
            raise DataError(f"{len(usage)} usage tags for {len(items)} items")
        parts = ([], [], [])
        for item, tag in zip(items, usage):
            try:
                parts[USAGE_SPLITS[tag]].append(item)
            except KeyError:
                raise DataError(f"unknown usage tag {tag!r}") from None
    else:
        if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
            raise ParameterError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
        order = SeededRng(seed).generator.permutation(len(items))
        n_train = int(round(fractions[0] * len(items)))
        n_valid = int(round(fractions[1] * len(items)))
        shuffled = [items[i] for i in order]
        parts = (shuffled[:n_train], shuffled[n_train : n_train + n_valid], shuffled[n_train + n_valid :])
    for name, part in zip(("train", "valid", "test"), parts):
        if not part:
            raise DataError(f"{name} split is empty")
    return parts


# --------------------------------------------------------------------------
# optimisation


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear decay from lr_start to lr_end over config.epochs; clamps past the end."""
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    frac = min(epoch / config.epochs, 1.0)
    return config.lr_start + (config.lr_end - config.lr_start) * frac


def sgd_momentum_step(param, grad, buffer, lr, momentum):
    """buffer' = momentum * buffer - lr * grad; param' = param + buffer'."""
    dt = param.dtype.type
    new_buf = dt(momentum) * buffer - dt(lr) * grad
    return param + new_buf, new_buf


def _sgd_inplace(param, grad, buffer, lr, momentum):
    # same arithmetic as sgd_momentum_step, without the temporaries
    dt = param.dtype.type
    buffer *= dt(momentum)
    grad *= dt(lr)
    buffer -= grad
    param += buffer


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    valid_criterion: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    def __len__(self):
        return len(self.lr)

    def rows(self):
        return [(e, self.train_loss[e], self.valid_criterion[e], self.lr[e]) for e in range(len(self))]

    def to_csv(self, path, comments=()):
        with open(path, "w", newline="") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "valid_criterion", "lr"])
            for e, tl, vc, lr in self.rows():
                w.writerow([e, repr(float(tl)), repr(float(vc)), repr(float(lr))])


def _params_snapshot(net):
    return [None if w is None else w.copy() for w in net.weights], [None if b is None else b.copy() for b in net.biases]


def train(net: NetworkState, head, train_set: Dataset, valid_set: Dataset, config: TrainConfig, progress=None):
    """Train ``net`` in place; returns (net restored to its best epoch, TrainLog)."""
    if len(train_set) == 0 or len(valid_set) == 0:
        raise DataError("train and validation sets must be non-empty")
    if head.output_spec() != net.head:
        raise ParameterError(f"head {head} does not match the network's output layer {net.head}")
    shuffle = SeededRng(config.seed).spawn(SHUFFLE_STREAM)
    log = TrainLog()
    best, best_params = np.inf, None
    t0 = time.perf_counter()
    n = len(train_set)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        net.mode = "train"
        order = shuffle.generator.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            preds, cache = network_forward(net, train_set.images[idx])
            loss, glog = head.loss(preds, train_set.targets[idx])
            gws, gbs = network_backward(net, cache, glog)
            del cache
            for i in net.param_layers():
                _sgd_inplace(net.weights[i], gws[i], net.momentum_w[i], lr, config.momentum)
                _sgd_inplace(net.biases[i], gbs[i], net.momentum_b[i], lr, config.momentum)
            total += loss * len(idx)
        crit = head.criterion(predict(net, valid_set.images, config.batch_size), valid_set.targets)
        log.train_loss.append(total / n)
        log.valid_criterion.append(crit)
        log.lr.append(lr)
        if crit < best:
            best, log.best_epoch, best_params = crit, epoch, _params_snapshot(net)
        if progress is not None:
            progress(epoch, total / n, crit, lr)
        logger.info("epoch %d loss %.5f valid %.5f lr %.6f", epoch, total / n, crit, lr)
        if config.target_criterion is not None and crit <= config.target_criterion:
            break
        if config.patience and epoch - log.best_epoch >= config.patience:
            break
    log.seconds = time.perf_counter() - t0
    net.weights, net.biases = best_params
    net.mode = "eval"
    return net, log


def evaluate(net: NetworkState, head, test_set: Dataset, batch_size=100):
    """Eval-mode predictions (probabilities or raw vectors) and the matching targets."""
    return predict(net, test_set.images, batch_size), test_set.targets
