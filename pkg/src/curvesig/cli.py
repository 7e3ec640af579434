"""Command-line entry point: ``curvesig <command> [flags]``.

Every command writes its tabular output as CSV (header row, dot decimal) and a
``<output>.manifest.json`` run manifest next to it. Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .axiomatic import axiomatic_signature
from .datasets import (generate_collections, generate_dataset, load_collections, load_curves,
                       save_collections, save_curves, write_json_atomic)
from .errors import DataError, DegenerateError, NumericalError
from .nn import load_checkpoint, save_checkpoint
from .training import (EpochMetrics, TrainingConfig, TrainingDiverged, estimator_signatures, evaluate_model,
                       pearson_experiment, train)
from .matching import DEFAULT_FLAVORS, DEFAULT_RATES, run_benchmark

log = logging.getLogger("curvesig")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "CURVESIG_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _fmt(v) -> str:
    # shortest round-trip repr keeps CSVs exact and byte-stable
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


def write_csv_atomic(header, rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "curvesig": pkg}


def write_manifest(output, args, inputs, outputs, started: float) -> None:
    """RunManifest: command, flag snapshot, seed, paths, versions and wall-clock."""
    config = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "versions": _versions(),
        "wall_clock": {"started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
                       "seconds": round(time.time() - started, 3)},
    }
    write_json_atomic(doc, Path(str(output) + ".manifest.json"))


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _flavors(text: str) -> list[tuple[float, float]]:
    out = []
    for item in text.split(";"):
        vals = _floats(item)
        if len(vals) != 2:
            raise UsageError(f"a flavor is 'det,cond', got {item!r}")
        out.append((vals[0], vals[1]))
    return out


def _estimator(spec: str):
    if spec in ("euclidean", "equiaffine"):
        return spec
    path = Path(spec)
    if not path.exists():
        raise DataError(f"estimator {spec!r} is neither 'euclidean', 'equiaffine' nor an existing checkpoint")
    return load_checkpoint(path)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> list[Path]:
    rng = np.random.default_rng(args.seed)
    if args.collections is not None:
        if args.collections < 1 or args.members < 2:
            raise UsageError("--collections must be >= 1 and --members >= 2")
        cols = generate_collections(args.collections, args.members, rng, deform_magnitude=args.deform,
                                    harmonics=args.harmonics, decay=args.decay, samples=args.samples)
        save_collections(cols, args.out)
    else:
        if args.curves is None or args.curves < 1:
            raise UsageError("--curves must be >= 1")
        ds = generate_dataset(args.curves, rng, split=args.split, harmonics=args.harmonics,
                              decay=args.decay, samples=args.samples)
        save_curves(ds, args.out)
    return [args.out]


def cmd_train(args) -> list[Path]:
    cfg = TrainingConfig(half_width=args.half_width, negatives=args.negatives, batch_tuplets=args.batch,
                         group=args.group, epochs=args.epochs, steps_per_epoch=args.steps, seed=args.seed,
                         lr=args.lr, lr_final=args.lr if args.lr_final is None else args.lr_final,
                         first_block_width=args.width, layers_per_block=args.layers, num_blocks=args.blocks)
    tr, va = load_curves(args.train), load_curves(args.val)
    metrics_path = args.metrics or Path(str(args.out_ckpt) + ".metrics.csv")
    try:
        ckpt, metrics = train(tr, va, cfg, progress=lambda m: log.info(
            "epoch %d: train %.4f val %.4f", m.epoch, m.train_loss, m.val_loss))
    except TrainingDiverged as exc:
        save_checkpoint(exc.checkpoint, args.out_ckpt)
        raise
    save_checkpoint(ckpt, args.out_ckpt)
    write_csv_atomic(EpochMetrics.FIELDS, (m.row() for m in metrics), metrics_path)
    return [args.out_ckpt, metrics_path]


def cmd_signature(args) -> list[Path]:
    ds = load_curves(args.curve)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} curves")
    curve = ds.curves[args.index]
    if args.ckpt is not None:
        sig = evaluate_model(load_checkpoint(args.ckpt), curve)
    else:
        sig = axiomatic_signature(curve, args.axiomatic)
    rows = ((i, x, y, k, ks, v) for i, ((x, y), (k, ks), v)
            in enumerate(zip(curve.points, sig.points, sig.valid)))
    write_csv_atomic(("index", "x", "y", "kappa", "kappa_s", "valid"), rows, args.out)
    return [args.out]


def cmd_benchmark(args) -> list[Path]:
    cols = load_collections(args.collections)
    report = run_benchmark(cols, _estimator(args.estimator), flavors=_flavors(args.flavors),
                           rates=_floats(args.rates), seed=args.seed, workers=args.threads)
    tmp = Path(args.out).with_name(f".{Path(args.out).name}.tmp")
    tmp.write_text(report.to_csv())
    os.replace(tmp, args.out)
    print(report.format_table(f"Success rate ({args.estimator})"))
    return [args.out]


def cmd_pearson(args) -> list[Path]:
    counts = [int(c) for c in _floats(args.counts)]
    if not counts or min(counts) < 2:
        raise UsageError("--counts must list integers >= 2")
    if args.curves is not None:
        curves = load_curves(args.curves).curves
    else:
        curves = generate_dataset(args.num_curves, np.random.default_rng(args.seed), samples=args.samples).curves
    sigs = estimator_signatures(curves, _estimator(args.estimator))
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    series = pearson_experiment(sigs, counts, np.random.default_rng([args.seed, 1]), repeats=args.repeats)
    write_csv_atomic(("M", "abs_rho"), series, args.out)
    return [args.out]


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker / BLAS thread cap (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="curvesig", description="Learned and axiomatic curve invariants.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="generate a curve dataset or benchmark collections")
    g.add_argument("--out", type=Path, required=True)
    kind = g.add_mutually_exclusive_group(required=True)
    kind.add_argument("--curves", type=int, help="number of curves in a dataset")
    kind.add_argument("--collections", type=int, help="number of benchmark collections")
    g.add_argument("--members", type=int, default=10)
    g.add_argument("--deform", type=float, default=0.1, help="deformation magnitude (fraction of diameter)")
    g.add_argument("--split", default="train", choices=("train", "validation", "evaluation"))
    g.add_argument("--samples", type=int, default=256)
    g.add_argument("--harmonics", type=int, default=6)
    g.add_argument("--decay", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train the invariant network")
    t.add_argument("--train", type=Path, required=True)
    t.add_argument("--val", type=Path, required=True)
    t.add_argument("--out-ckpt", type=Path, required=True)
    t.add_argument("--metrics", type=Path, help="metrics CSV (default <out-ckpt>.metrics.csv)")
    t.add_argument("--group", default="affine", choices=("euclidean", "equiaffine", "affine"))
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--steps", type=int, default=200, help="steps per epoch")
    t.add_argument("--half-width", type=int, default=8)
    t.add_argument("--negatives", type=int, default=4)
    t.add_argument("--batch", type=int, default=32, help="tuplets per batch")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-final", type=float, default=None)
    t.add_argument("--width", type=int, default=128, help="first block width")
    t.add_argument("--layers", type=int, default=3, help="layers per block")
    t.add_argument("--blocks", type=int, default=4)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("signature", parents=[common], help="per-point signature of one curve")
    est = s.add_mutually_exclusive_group(required=True)
    est.add_argument("--ckpt", type=Path)
    est.add_argument("--axiomatic", choices=("euclidean", "equiaffine"))
    s.add_argument("--curve", type=Path, required=True, help="curve dataset file")
    s.add_argument("--index", type=int, default=0, help="curve index within the file")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_signature)

    b = sub.add_parser("benchmark", parents=[common], help="shape-matching benchmark")
    b.add_argument("--collections", type=Path, required=True)
    b.add_argument("--estimator", required=True, help="checkpoint path, 'euclidean' or 'equiaffine'")
    b.add_argument("--flavors", default=";".join(f"{d:g},{c:g}" for d, c in DEFAULT_FLAVORS),
                   help="'det,cond;det,cond;...'")
    b.add_argument("--rates", default=",".join(f"{r:g}" for r in DEFAULT_RATES))
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path, required=True)
    b.set_defaults(func=cmd_benchmark)

    r = sub.add_parser("pearson", parents=[common], help="|rho| between kappa and kappa_s versus sample count")
    r.add_argument("--estimator", default="euclidean")
    r.add_argument("--curves", type=Path, help="curve dataset (default: generate from --seed)")
    r.add_argument("--num-curves", type=int, default=100)
    r.add_argument("--samples", type=int, default=512)
    r.add_argument("--counts", default="100,1000,10000")
    r.add_argument("--repeats", type=int, default=20, help="independent draws averaged per count")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", type=Path, required=True)
    r.set_defaults(func=cmd_pearson)
    return p


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"curvesig: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    inputs = [v for k, v in vars(args).items()
              if isinstance(v, Path) and k in ("train", "val", "curve", "curves", "collections", "ckpt")]
    try:
        with threadpool_limits(limits=args.threads):
            outputs = args.func(args)
        write_manifest(outputs[0], args, inputs, outputs, started)
    except UsageError as exc:
        print(f"curvesig: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DegenerateError) as exc:
        print(f"curvesig: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"curvesig: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
