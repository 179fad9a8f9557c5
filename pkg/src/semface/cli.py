"""``semface`` command line: preprocess, train, eval, sweep, weightsim, aamgen
(plus facegen for a procedural stand-in corpus).

Every command writes under ``--out`` and finishes by listing what it produced
in ``outputs.tsv`` (path, size, sha256). Exit status is 0 when everything
succeeded, 1 when some rows or grid points failed (each one is reported on
stderr) and 2 for errors that stop the command before any output.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import aam as A
from . import dataio, facegen
from .config import ConfigError, RunConfig, load_config
from .experiment import (
    evaluate_split,
    headline,
    layer_lines,
    load_task_data,
    run_training,
    write_tables,
)
from .metrics import first_layer_similarity, write_rows_csv
from .network import infer_shapes
from .preprocess import (
    PreprocessError,
    align_face,
    fit_pixel_stats,
    gcn_image,
    preprocess_pipeline,
    resize,
)
from .tensor import DataError, DimensionError, ParameterError, SeededRng

logger = logging.getLogger("semface")

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2
OUTPUTS = "outputs.tsv"
FER_SPLITS = {"Training": "train", "PublicTest": "valid", "PrivateTest": "test"}


class Failures:
    """Row or grid-point failures, echoed to stderr as they happen."""

    def __init__(self):
        self.items = []

    def add(self, where, exc):
        self.items.append((where, str(exc)))
        print(f"FAILED {where}: {exc}", file=sys.stderr)

    def __bool__(self):
        return bool(self.items)


def write_outputs_manifest(out_dir):
    rows = []
    for root, _, files in os.walk(out_dir):
        for name in files:
            full = os.path.join(root, name)
            rel = os.path.relpath(full, out_dir)
            if rel == OUTPUTS:
                continue
            with open(full, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            rows.append((rel.replace(os.sep, "/"), os.path.getsize(full), digest))
    with open(os.path.join(out_dir, OUTPUTS), "w") as fh:
        fh.write("path\tbytes\tsha256\n")
        for rel, size, digest in sorted(rows):
            fh.write(f"{rel}\t{size}\t{digest}\n")


def _config(args, **overrides):
    cfg = load_config(args.config, **overrides)
    base = os.path.dirname(os.path.abspath(args.config))
    fix = {k: os.path.join(base, getattr(cfg, k)) for k in ("data", "stats") if getattr(cfg, k) and not os.path.isabs(getattr(cfg, k))}
    return cfg.with_overrides(**fix) if fix else cfg


# --------------------------------------------------------------------------
# preprocess


def _source_rows(path):
    """(ManifestRow, lazily loaded image) pairs from a manifest TSV or a FER2013 CSV."""
    if path.endswith(".csv"):
        for i, r in enumerate(dataio.parse_fer_csv(path)):
            yield dataio.ManifestRow(f"fer{i:06d}", None, {"emotion": r.emotion}, FER_SPLITS[r.usage]), (lambda img=r.image: img)
        return
    for r in dataio.read_manifest(path):
        yield r, (lambda p=dataio.resolve(path, r.path): dataio.load_image(p))


def cmd_preprocess(args):
    stats = None
    if args.stats:
        stats = dataio.load_pixel_stats(args.stats)
        if stats.shape != (args.size, args.size):
            raise DimensionError(f"pixel statistics {args.stats} are {stats.shape}, output size is {args.size}")
    align = not args.no_align and not args.input.endswith(".csv")
    fails = Failures()
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    out_rows, crops = [], []
    for i, (row, load) in enumerate(_source_rows(args.input)):
        try:
            img = load()
            if align:
                if row.eyes is None:
                    raise PreprocessError("align", "row has no eye landmarks")
                crop = align_face(img, row.eyes, args.size)
            else:
                crop = resize(img, args.size)
        except (PreprocessError, DimensionError, ValueError, OSError) as exc:
            fails.add(f"row {i + 1} ({row.path})", exc)
            continue
        crop8 = dataio.to_uint8(crop)
        name = f"images/img{i:06d}.pgm"
        dataio.write_pgm(os.path.join(args.out, name), crop8)
        out_rows.append(dataio.ManifestRow(name, None, dict(row.labels), row.split, row.pose, row.aam))
        crops.append(crop8)
    dataio.write_manifest(out_rows, os.path.join(args.out, "manifest.tsv"))
    if args.fit_stats:
        train = [gcn_image(c.astype(np.float32)) for c, r in zip(crops, out_rows) if r.split == "train"]
        if not train:
            raise DataError("no rows tagged train to fit pixel statistics on")
        stats = fit_pixel_stats(train, source=f"{os.path.basename(args.input)} train rows")
        dataio.save_pixel_stats(stats, os.path.join(args.out, "stats.fst"))
    print(f"preprocessed {len(out_rows)} rows, {len(fails.items)} failed")
    return fails


# --------------------------------------------------------------------------
# train / eval


def cmd_train(args):
    cfg = _config(args)
    data = load_task_data(cfg)
    os.makedirs(args.out, exist_ok=True)

    def progress(epoch, loss, crit, lr):
        logger.info("epoch %d train_loss %.5f valid %.5f lr %.6f", epoch, loss, crit, lr)

    net, head, log = run_training(cfg, data, progress)
    dataio.save_model(net, os.path.join(args.out, "model.fgr"))
    comments = [*cfg.to_lines(), *layer_lines(net), f"best_epoch {log.best_epoch}"]
    log.to_csv(os.path.join(args.out, "train_log.csv"), comments)
    final = log.valid_criterion[log.best_epoch]
    print(f"final validation criterion {final:.6f} (epoch {log.best_epoch})")
    return Failures()


def cmd_eval(args):
    cfg = _config(args)
    net = dataio.load_model(args.model)
    data = load_task_data(cfg)
    if tuple(net.input_shape) != data.train.images.shape[1:]:
        raise DimensionError(f"model input {net.input_shape} does not match data {data.train.images.shape[1:]}")
    tables, summary = evaluate_split(cfg, net, data, args.split)
    os.makedirs(args.out, exist_ok=True)
    tables["summary.csv"] = (["metric", "value"], [[k, f"{v:.6f}"] for k, v in summary.items()])
    write_tables(args.out, tables)
    for k, v in summary.items():
        print(f"{k} {v:.6f}")
    return Failures()


# --------------------------------------------------------------------------
# sweep


def sweep_grid(cfg: RunConfig, axes):
    """(axis names, list of override dicts) in grid order."""
    if axes == "depth_width":
        names, values = ("depth", "width"), (cfg.sweep_depth, cfg.sweep_width)
    elif axes == "lcn_pool":
        names, values = ("lcn_placement", "pool_placement"), (cfg.sweep_lcn, cfg.sweep_pool)
    elif axes == "dropout":
        names, values = ("dropout_fc", "dropout_conv"), (cfg.sweep_dropout_fc, cfg.sweep_dropout_conv)
    elif axes == "input_size":
        names, values = ("input_size",), (cfg.sweep_input_size,)
    else:
        raise ConfigError(f"unknown sweep axes {axes!r}")
    points = []
    for combo in itertools.product(*values):
        over = dict(zip(names, combo))
        if axes == "depth_width":
            # masks follow the depth: LCN and pooling after conv-1 only
            over.update(lcn_placement=None, pool_placement=None)
        if axes == "input_size":
            over["stats"] = ""  # statistics are refitted at each size
        points.append(over)
    return names, points


def _run_point(cfg: RunConfig, over):
    t0 = time.perf_counter()
    try:
        point = cfg.with_overrides(**over)
        data = load_task_data(point)
        infer_shapes(point.specs(data.aam_dim), (1, point.input_size, point.input_size))
        net, _, _ = run_training(point, data)
        _, summary = evaluate_split(point, net, data, "test")
        return headline(point, summary)[1], None, time.perf_counter() - t0
    except Exception as exc:  # a failed point is reported, the grid goes on
        return None, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0


def cmd_sweep(args):
    cfg = _config(args)
    names, points = sweep_grid(cfg, args.axes)
    metric = "test_cosine" if cfg.task == "aam" else "test_accuracy"
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_point, [cfg] * len(points), points))
    else:
        results = [_run_point(cfg, p) for p in points]
    fails = Failures()
    os.makedirs(args.out, exist_ok=True)
    rows, timing = [], []
    for i, (over, (value, err, secs)) in enumerate(zip(points, results)):
        axis_vals = ["none" if over[n] is None else str(over[n]) for n in names]
        if err:
            fails.add(f"grid point {i} {dict(zip(names, axis_vals))}", err)
        rows.append([i, *axis_vals, "" if value is None else f"{value:.6f}", "failed" if err else "ok"])
        timing.append([i, f"{secs:.3f}"])
    write_rows_csv(os.path.join(args.out, "sweep.csv"), ["point", *names, metric, "status"], rows)
    write_rows_csv(os.path.join(args.out, "timings.csv"), ["point", "runtime_s"], timing)
    print(f"{len(rows)} grid points, {len(fails.items)} failed")
    return fails


# --------------------------------------------------------------------------
# weightsim / aamgen / facegen


def cmd_weightsim(args):
    if len(args.models) < 2:
        raise ParameterError("weightsim needs at least two models")
    names = args.names.split(",") if args.names else [os.path.splitext(os.path.basename(m))[0] for m in args.models]
    if len(names) != len(args.models) or len(set(names)) != len(names):
        raise ParameterError("need one distinct name per model")
    nets = {n: dataio.load_model(m) for n, m in zip(names, args.models)}
    os.makedirs(args.out, exist_ok=True)
    for mode in ("flat", "matched"):
        table = first_layer_similarity(nets, mode)
        table.to_csv(os.path.join(args.out, f"similarity_{mode}.csv"))
        dataio.write_pgm(os.path.join(args.out, f"similarity_{mode}.pgm"), table.heatmap())
    return Failures()


def cmd_aamgen(args):
    rows = dataio.read_manifest(args.data)
    stats = dataio.load_pixel_stats(args.stats) if args.stats else None
    fit_rows = [r for r in rows if r.split == "train"] or rows
    images = []
    for r in fit_rows:
        img = dataio.load_image(dataio.resolve(args.data, r.path))
        images.append(preprocess_pipeline(img, stats=stats, out_size=img.shape[0], align=False)[0])
    model = A.fit_pca(images, args.variance)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_appearance_model(model, os.path.join(args.out, "aam.fam"))
    print(f"appearance model: {model.k} components from {len(images)} faces")
    if args.n == 0:
        return Failures()
    rng = SeededRng(args.seed).spawn(1)
    samples = A.sample_synthetic(model, rng, args.n)
    order = SeededRng(args.seed).spawn(2).generator.permutation(args.n)
    n_train, n_valid = int(round(0.8 * args.n)), int(round(0.1 * args.n))
    split = {}
    for j, i in enumerate(order):
        split[int(i)] = "train" if j < n_train else "valid" if j < n_train + n_valid else "test"
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    out_rows, worst = [], 0.0
    for i, (img, target) in enumerate(samples):
        name = f"images/synth{i:06d}.npy"
        np.save(os.path.join(args.out, name), np.ascontiguousarray(img, dtype="<f4"), allow_pickle=False)
        out_rows.append(dataio.ManifestRow(name, None, {}, split[i], target.pose, tuple(map(float, target.coeffs))))
        worst = max(worst, float(np.max(np.abs(A.encode(model, A.decode(model, target.coeffs)) - target.coeffs))))
    dataio.write_manifest(out_rows, os.path.join(args.out, "manifest.tsv"))
    print(f"wrote {args.n} synthetic faces; max coefficient recovery error at pose (0,0) {worst:.3e}")
    return Failures()


def cmd_facegen(args):
    facegen.write_corpus(args.out, args.n, args.seed, args.size, noise=args.noise)
    print(f"wrote {args.n} procedural faces to {args.out}")
    return Failures()


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="semface", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="align, crop and normalise a corpus")
    s.add_argument("input", help="manifest .tsv or FER2013 .csv")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=48)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--fit-stats", action="store_true", help="fit pixel statistics on rows tagged train")
    g.add_argument("--stats", help="existing pixel statistics file")
    s.add_argument("--no-align", action="store_true", help="resize instead of aligning on the eyes")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train one network")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics for a saved model")
    s.add_argument("config")
    s.add_argument("--model", required=True)
    s.add_argument("--split", choices=dataio.SPLITS, default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid of independent trainings")
    s.add_argument("config")
    s.add_argument("--axes", required=True, choices=("depth_width", "lcn_pool", "dropout", "input_size"))
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("weightsim", help="first-layer similarity between models")
    s.add_argument("models", nargs="+")
    s.add_argument("--names", help="comma-separated task names (default: file stems)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_weightsim)

    s = sub.add_parser("aamgen", help="fit the appearance model and sample synthetic faces")
    s.add_argument("data", help="preprocessed manifest")
    s.add_argument("--stats")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--variance", type=float, default=0.95)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_aamgen)

    s = sub.add_parser("facegen", help="write a procedural face corpus with a manifest")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--noise", type=float, default=3.0, help="pixel noise std")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_facegen)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        fails = args.func(args)
    except (ConfigError, DataError, DimensionError, ParameterError, PreprocessError, dataio.ParseError, dataio.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    write_outputs_manifest(args.out)
    if fails:
        print(f"{len(fails.items)} failure(s)", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
