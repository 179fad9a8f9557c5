"""Glue between a RunConfig and the library: loading a preprocessed manifest into
datasets, running one training, and computing every metric table for a task.
The command-line tools are thin wrappers over these functions."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import dataio
from .aam import POSE_SCALE, split_regression
from .config import TASK_LABELS, RunConfig
from .layers import block_slices
from .metrics import (
    MetricError,
    age_resolution_accuracy,
    confusion_and_precision,
    mean_cosine,
    pose_error,
    roc_auc,
    write_rows_csv,
)
from .network import build_network, infer_shapes
from .preprocess import fit_pixel_stats, gcn_image, preprocess_pipeline, resize
from .tensor import DTYPE, DataError, DimensionError
from .train import Dataset, evaluate, head_for, split_dataset, train

logger = logging.getLogger(__name__)


@dataclass
class TaskData:
    train: Dataset
    valid: Dataset
    test: Dataset
    aam_dim: int | None = None
    skipped: int = 0  # rows without a label for this task


def _network_image(path, size, stats):
    if path.endswith(".npy"):
        img = dataio.load_image(path)
        if img.shape != (size, size):
            raise DimensionError(f"{path}: array is {img.shape}, input size is {size}")
        return img[None]
    return preprocess_pipeline(dataio.load_image(path), stats=stats, out_size=size, align=False)


def _targets(cfg: RunConfig, rows):
    """(targets, keep mask, aam_dim)."""
    if cfg.task == "aam":
        vecs = [r.regression_target() for r in rows]
        keep = np.array([v is not None for v in vecs])
        dims = {len(v) for v in vecs if v is not None}
        if len(dims) > 1:
            raise DataError(f"regression targets have mixed lengths {sorted(dims)}")
        if not dims:
            raise DataError("no row carries an AAM vector and pose")
        dim = dims.pop()
        k = dim - 2
        t = np.array([[*v[:k], *(np.asarray(v[k:]) / POSE_SCALE)] for v in vecs if v is not None], dtype=DTYPE)
        return t, keep, dim
    if cfg.task == "joint":
        t = np.array([[r.labels.get(lab, -1) for lab in cfg.joint_labels] for r in rows], dtype=np.int64)
        keep = (t >= 0).any(axis=1)
        return t[keep], keep, None
    lab = TASK_LABELS[cfg.task]
    keep = np.array([lab in r.labels for r in rows])
    return np.array([r.labels[lab] for r in rows if lab in r.labels], dtype=np.int64), keep, None


def split_indices(cfg: RunConfig, rows):
    given = [r.split for r in rows]
    if all(s is not None for s in given):
        return [[i for i, s in enumerate(given) if s == name] for name in dataio.SPLITS]
    if any(s is not None for s in given):
        raise DataError("either every manifest row has a split or none does")
    return [list(p) for p in split_dataset(range(len(rows)), seed=cfg.seed)]


def load_task_data(cfg: RunConfig, manifest_path=None):
    """Datasets for the config's task; pixel statistics come from cfg.stats or,
    when unset, are fitted on the training split."""
    manifest_path = manifest_path or cfg.data
    if not manifest_path:
        raise DataError("no data manifest configured")
    rows = dataio.read_manifest(manifest_path)
    if not rows:
        raise DataError(f"{manifest_path} has no rows")
    targets, keep, aam_dim = _targets(cfg, rows)
    idx = np.flatnonzero(keep)
    kept = [rows[i] for i in idx]
    parts = split_indices(cfg, kept)
    paths = [dataio.resolve(manifest_path, r.path) for r in kept]
    stats = dataio.load_pixel_stats(cfg.stats) if cfg.stats else None
    if stats is not None and stats.shape != (cfg.input_size, cfg.input_size):
        raise DimensionError(f"pixel statistics are {stats.shape}, input size is {cfg.input_size}")
    if stats is None and any(not p.endswith(".npy") for p in paths):
        faces = [gcn_image(resize(dataio.load_image(paths[i]), cfg.input_size)) for i in parts[0] if not paths[i].endswith(".npy")]
        if faces:
            stats = fit_pixel_stats(faces, source="train split")
    images = np.stack([_network_image(p, cfg.input_size, stats) for p in paths])
    sets = []
    for name, part in zip(dataio.SPLITS, parts):
        if not part:
            raise DataError(f"{name} split is empty")
        sets.append(Dataset(images[part], targets[part]))
    return TaskData(*sets, aam_dim=aam_dim, skipped=len(rows) - len(kept))


def layer_lines(net):
    shapes = infer_shapes(net.specs, net.input_shape)
    lines = [f"input {tuple(net.input_shape)}"]
    lines += [f"layer {i} {spec} -> {tuple(s)}" for i, (spec, s) in enumerate(zip(net.specs, shapes))]
    return lines


def run_training(cfg: RunConfig, data: TaskData, progress=None):
    net = build_network(cfg.specs(data.aam_dim), (1, cfg.input_size, cfg.input_size), cfg.seed)
    head = head_for(net)
    net, log = train(net, head, data.train, data.valid, cfg.train_config(), progress)
    return net, head, log


# --------------------------------------------------------------------------
# metric tables


def _f(v):
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def classification_tables(probs, truths, k, prefix="", age=False):
    """{filename: (header, rows)} for one exclusive label group, plus a summary dict."""
    preds = np.argmax(probs, axis=1)
    cm, precision, ap, acc = confusion_and_precision(preds, truths, k)
    tables = {
        f"{prefix}confusion.csv": (["true\\pred", *map(str, range(k))], [[str(i), *map(int, row)] for i, row in enumerate(cm)]),
        f"{prefix}precision.csv": (
            ["class", "precision"],
            [[str(c), "absent" if np.isnan(p) else f"{p:.6f}"] for c, p in enumerate(precision)]
            + [["average_precision", _f(ap)], ["accuracy", _f(acc)]],
        ),
    }
    roc_rows, aucs = [], {}
    for c in range(k):
        try:
            pts, auc = roc_auc(probs, truths, c)
        except MetricError:
            roc_rows.append([str(c), "", "", "undefined"])
            continue
        aucs[c] = auc
        roc_rows += [[str(c), f"{fpr:.6f}", f"{tpr:.6f}", f"{auc:.6f}"] for fpr, tpr in pts]
    tables[f"{prefix}roc.csv"] = (["class", "fpr", "tpr", "auc"], roc_rows)
    summary = {"accuracy": acc, "average_precision": ap, "mean_auc": float(np.mean(list(aucs.values()))) if aucs else float("nan")}
    if age:
        exact, adjacent = age_resolution_accuracy(preds, truths)
        tables[f"{prefix}age_resolution.csv"] = (["resolution", "accuracy"], [["+-2.5y", f"{exact:.6f}"], ["+-5y", f"{adjacent:.6f}"]])
        summary.update(age_exact=exact, age_adjacent=adjacent)
    return tables, summary


def task_tables(cfg: RunConfig, head, preds, targets):
    """All metric tables for the task and a flat summary dict."""
    if cfg.task == "aam":
        k = preds.shape[1] - 2
        pc, pp = split_regression(preds, k)
        tc, tp = split_regression(targets, k)
        cos = mean_cosine(pc, tc)
        yaw, pitch = pose_error(pp, tp)
        summary = {"cosine_similarity": cos, "yaw_mae_deg": yaw, "pitch_mae_deg": pitch}
        return {"aam.csv": (["metric", "value"], [[k_, f"{v:.6f}"] for k_, v in summary.items()])}, summary
    if cfg.task == "joint":
        tables, summary, block_rows = {}, {}, []
        for lab, sl, j in zip(cfg.joint_labels, block_slices(head.block_sizes), range(len(cfg.joint_labels))):
            present = targets[:, j] >= 0
            if not present.any():
                block_rows.append([lab, "absent"])
                continue
            t, s = classification_tables(preds[present, sl], targets[present, j], sl.stop - sl.start, f"{lab}_", lab == "age_bin")
            tables.update(t)
            block_rows.append([lab, f"{s['accuracy']:.6f}"])
            summary.update({f"{lab}_{k_}": v for k_, v in s.items()})
        accs = [float(r[1]) for r in block_rows if r[1] != "absent"]
        summary["accuracy"] = float(np.mean(accs))
        tables["blocks.csv"] = (["label", "accuracy"], block_rows)
        return tables, summary
    k = preds.shape[1]
    return classification_tables(preds, targets, k, age=cfg.task == "age")


def headline(cfg: RunConfig, summary):
    return ("test_cosine", summary["cosine_similarity"]) if cfg.task == "aam" else ("test_accuracy", summary["accuracy"])


def write_tables(out_dir, tables):
    written = []
    for name, (header, rows) in sorted(tables.items()):
        path = os.path.join(out_dir, name)
        write_rows_csv(path, header, rows)
        written.append(path)
    return written


def evaluate_split(cfg: RunConfig, net, data: TaskData, split="test"):
    ds = getattr(data, split)
    head = head_for(net)
    preds, targets = evaluate(net, head, ds, cfg.batch_size)
    return task_tables(cfg, head, preds, targets)
