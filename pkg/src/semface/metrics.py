"""Evaluation: confusion matrices, per-class precision, one-vs-all ROC/AUC,
age-bin resolution accuracy, pose error and first-layer weight similarity."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .losses import LabelError
from .tensor import DimensionError, ParameterError

AGE_BINS = 17


class MetricError(ValueError):
    """A metric that is undefined for the given inputs."""


def _labels(x, k, what):
    x = np.asarray(x, dtype=np.int64)
    if x.size and (x.min() < 0 or x.max() >= k):
        raise LabelError(f"{what} contains a class index outside 0..{k - 1}")
    return x


def confusion_and_precision(preds, truths, k):
    """Returns (confusion counts [true, pred], per-class precision, average precision, accuracy).

    Classes that were never predicted have precision NaN and are left out of
    the average.
    """
    preds, truths = _labels(preds, k, "preds"), _labels(truths, k, "truths")
    if preds.shape != truths.shape:
        raise DimensionError(f"{preds.shape[0]} predictions for {truths.shape[0]} truths")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, np.diag(cm) / np.maximum(predicted, 1), np.nan)
    ap = float(np.nanmean(precision)) if np.any(predicted > 0) else float("nan")
    acc = float(np.trace(cm) / cm.sum()) if cm.sum() else float("nan")
    return cm, precision, ap, acc


def roc_auc(scores, truths, c):
    """One-vs-all ROC for class ``c``: (points as (fpr, tpr) rows, trapezoidal AUC).

    ``scores`` is (N, k) class probabilities or a length-N score for class c.
    Tied scores form a single threshold step.
    """
    scores = np.asarray(scores, dtype=np.float64)
    s = scores[:, c] if scores.ndim == 2 else scores
    pos = np.asarray(truths) == c
    if s.shape != pos.shape:
        raise DimensionError(f"{s.shape[0]} scores for {pos.shape[0]} truths")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC for class {c} is undefined: truths contain only one class")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(pos)[last_of_group]
    fp = np.cumsum(~pos)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return np.stack([fpr, tpr], axis=1), auc


def age_resolution_accuracy(preds, truths, n_bins=AGE_BINS):
    """(exact-bin accuracy, within-one-bin accuracy); bins are ordered 5-year intervals."""
    preds, truths = _labels(preds, n_bins, "preds"), _labels(truths, n_bins, "truths")
    if preds.shape != truths.shape or preds.size == 0:
        raise DimensionError(f"need equal, non-empty label vectors, got {preds.shape} and {truths.shape}")
    d = np.abs(preds - truths)
    return float(np.mean(d == 0)), float(np.mean(d <= 1))


def pose_error(pred_angles, true_angles):
    """Mean absolute error per axis, in the angles' own units."""
    p, t = np.asarray(pred_angles, dtype=np.float64), np.asarray(true_angles, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"pose arrays differ: {p.shape} vs {t.shape}")
    return tuple(float(v) for v in np.mean(np.abs(p - t), axis=0))


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"vectors differ in length: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def mean_cosine(pred, truth):
    """Average per-row cosine similarity between two (N, d) arrays."""
    return float(np.mean([cosine_similarity(p, t) for p, t in zip(pred, truth)]))


# --------------------------------------------------------------------------
# weight similarity


@dataclass
class SimilarityTable:
    names: list
    scores: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", *self.names])
            for name, row in zip(self.names, self.scores):
                w.writerow([name, *(f"{v:.6f}" for v in row)])

    def heatmap(self, cell=16):
        """uint8 image, one cell x cell block per entry, -1 -> 0 and +1 -> 255."""
        levels = np.round((np.clip(self.scores, -1, 1) + 1) * 127.5).astype(np.uint8)
        return np.kron(levels, np.ones((cell, cell), dtype=np.uint8))


def first_layer_weights(net):
    i = net.param_layers()[0]
    return net.weights[i]


def matched_similarity(wa, wb):
    """Greedy one-to-one matching of filters by cosine; mean over the matched pairs."""
    a = wa.reshape(wa.shape[0], -1).astype(np.float64)
    b = wb.reshape(wb.shape[0], -1).astype(np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-300)
    sim = a @ b.T
    free = np.ones_like(sim, dtype=bool)
    picked = []
    for _ in range(min(sim.shape)):
        masked = np.where(free, sim, -np.inf)
        i, j = np.unravel_index(np.argmax(masked), sim.shape)
        picked.append(sim[i, j])
        free[i, :] = False
        free[:, j] = False
    return float(np.mean(picked))


def first_layer_similarity(nets: dict, mode="flat", require_same_seed=True):
    """Cosine similarity table between first-layer weights of named networks."""
    if mode not in ("flat", "matched"):
        raise ParameterError(f"mode must be 'flat' or 'matched', got {mode!r}")
    names = list(nets)
    weights = [first_layer_weights(nets[n]) for n in names]
    for n, w in zip(names[1:], weights[1:]):
        if w.shape != weights[0].shape:
            raise DimensionError(f"first layer of {n!r} has shape {w.shape}, expected {weights[0].shape}")
    if require_same_seed and len({nets[n].seed for n in names}) > 1:
        raise ParameterError("networks must share their initialisation seed")
    k = len(names)
    scores = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            s = cosine_similarity(weights[i], weights[j]) if mode == "flat" else matched_similarity(weights[i], weights[j])
            scores[i, j] = scores[j, i] = s
    return SimilarityTable(names, scores)


# --------------------------------------------------------------------------
# CSV writers


def write_confusion_csv(path, cm, class_names=None):
    names = class_names or [str(i) for i in range(len(cm))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, cm):
            w.writerow([name, *map(int, row)])


def write_precision_csv(path, precision, ap, acc, class_names=None):
    names = class_names or [str(i) for i in range(len(precision))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision"])
        for name, p in zip(names, precision):
            w.writerow([name, "absent" if np.isnan(p) else f"{p:.6f}"])
        w.writerow(["average_precision", f"{ap:.6f}"])
        w.writerow(["accuracy", f"{acc:.6f}"])


def write_roc_csv(path, curves):
    """``curves``: mapping class name -> (points, auc)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "fpr", "tpr", "auc"])
        for name, (pts, auc) in curves.items():
            for fpr, tpr in pts:
                w.writerow([name, f"{fpr:.6f}", f"{tpr:.6f}", f"{auc:.6f}"])


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
