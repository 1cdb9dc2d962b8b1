"""Command line entry point: ``scalevec {gen-data,train,eval,check}``.

Exit codes: 0 success, 1 usage or validation error, 2 numeric failure,
3 a check suite ran but did not pass.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from scalevec import __version__, data, kernels
from scalevec.errors import NumericError, ScalevecError
from scalevec.layers import ScaleSpec

log = logging.getLogger("scalevec")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3

# acceptance thresholds for the check suites
ORACLE_TOL = 1e-12
GRAD_TOL = 1e-4
EQ_MIN_AGREEMENT = 0.8
EQ_MAX_RHO_ERR = 0.15


class UsageExit(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageExit(message)


def _sizes(text):
    try:
        return data.check_sizes(int(t) for t in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _on_off(text):
    t = text.lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _data_root(args):
    return Path(args.data_dir or os.environ.get("SCALEVEC_DATA_DIR", "."))


def _source_images(args):
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise UsageExit("--images and --labels must be given together")
        images = data.read_idx(args.images)
        labels = data.read_idx(args.labels)
        if images.ndim != 3 or labels.ndim != 1:
            raise UsageExit("--images must be an image IDX file and --labels a label IDX file")
        return images, labels
    return data.load_mnist(_data_root(args))


def _resolve_fold(args):
    """``--fold`` is a path, or an index into ``<data dir>/fold_<i>.mscl``."""
    text = str(args.fold)
    if text.isdigit():
        return _data_root(args) / f"fold_{int(text)}.mscl"
    return Path(text)


def _spec(args):
    return ScaleSpec.from_scales(args.scales, args.scale_factor, args.angle_range)


def _threads(args):
    n = 1 if args.deterministic else args.threads
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _emit(report, out):
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _resolved(args):
    d = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    d["backend"] = kernels.BACKEND
    d["version"] = __version__
    return d


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args):
    images, labels = _source_images(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.folds < 1:
        raise UsageExit("--folds must be at least 1")
    folds, scales = [], []
    for f in range(args.folds):
        seed = args.seed + f
        fold = data.generate_fold(images, labels, seed, args.sizes)
        path = out / f"fold_{f}.mscl"
        crc = data.save_fold(fold, path)
        scales += [s.scales for s in fold.splits().values()]
        folds.append({
            "index": f, "seed": seed, "path": path.name, "crc32": f"{crc:08x}",
            "sizes": [len(fold.train), len(fold.val), len(fold.test)],
            "scale_stats": {k: data.scale_stats(s.scales) for k, s in fold.splits().items()},
        })
        log.info("fold %d written (crc %08x)", f, crc)
    manifest = {"config": _resolved(args), "n_source_images": int(len(images)), "folds": folds,
                "scale_stats": data.scale_stats(np.concatenate(scales))}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"folds": [(fd["path"], fd["crc32"]) for fd in folds],
                      "scale_mean": manifest["scale_stats"]["mean"]}))
    return EXIT_OK


def _train_configs(args):
    from scalevec.models import ModelConfig
    from scalevec.training import TrainConfig

    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    mc = dict(overrides.get("model", {}))
    tc = dict(overrides.get("train", {}))
    mc.setdefault("variant", args.variant)
    if mc["variant"] != "standard":
        mc.setdefault("scale_spec", _spec(args).as_dict())
    mc.setdefault("shift_angles", args.shift_angles)
    for key, val in (("epochs", args.epochs), ("batch_size", args.batch), ("lr", args.lr), ("lam", args.lam),
                     ("seed", args.seed), ("precision", args.precision), ("deterministic", args.deterministic),
                     ("limit_train", args.limit_train)):
        tc.setdefault(key, val)
    return ModelConfig.from_dict(mc), TrainConfig(**tc)


def cmd_train(args):
    from scalevec.models import build_model, save_checkpoint
    from scalevec.training import evaluate, train

    mcfg, tcfg = _train_configs(args)
    fold_path = _resolve_fold(args)
    fold = data.load_fold(fold_path)
    model = build_model(mcfg, seed=tcfg.seed, dtype=tcfg.dtype)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    provenance = {"model": mcfg.as_dict(), "train": tcfg.as_dict(), "fold": str(fold_path),
                  "backend": kernels.BACKEND, "version": __version__}
    fields = ["epoch", "train_loss", "val_error_pct", "val_scale_rmse", "wall_seconds"]
    with metrics_path.open("w", newline="") as fh:
        fh.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()

        def on_epoch(row):
            writer.writerow({k: row[k] for k in fields})
            fh.flush()

        t0 = time.perf_counter()
        result = train(model, fold, tcfg, on_epoch=on_epoch)
    test = evaluate(model, fold.test, tcfg.eval_batch) if len(fold.test) else None
    save_checkpoint(model, out, {"train": tcfg.as_dict(), "fold": str(fold_path), "best_epoch": result.best_epoch})
    print(json.dumps({"checkpoint": str(out), "metrics": str(metrics_path), "best_epoch": result.best_epoch,
                      "best_val_error_pct": result.best_val_error, "test": test,
                      "seconds": time.perf_counter() - t0}, default=float))
    return EXIT_OK


def cmd_eval(args):
    from scalevec.models import load_checkpoint
    from scalevec.training import evaluate

    dtype = np.float64 if args.precision in ("float64", "64") else np.float32
    model, config = load_checkpoint(args.checkpoint, dtype=dtype)
    fold_path = _resolve_fold(args)
    fold = data.load_fold(fold_path)
    split = fold.splits()[args.split]
    if args.limit:
        split = split.head(args.limit)
    report = evaluate(model, split)
    report.update({"split": args.split, "fold": str(fold_path), "checkpoint": str(args.checkpoint),
                   "config": config})
    _emit(report, args.out)
    return EXIT_OK


def cmd_check(args):
    from scalevec import verify

    report = {"suite": args.suite, "seed": args.seed, "config": _resolved(args)}
    if args.suite == "oracle":
        res = verify.oracle_suite(args.cases, args.seed)
        passed = res["max_rel_err"] <= ORACLE_TOL
    elif args.suite == "grad":
        images, labels = _check_digits(args, 4)
        rng = np.random.default_rng(args.seed)
        scales = rng.uniform(0.3, 1.0, len(labels))
        res = verify.grad_suite(images, labels, scales, n_coords=args.coords, seed=args.seed)
        passed = res["max_rel_err"] < GRAD_TOL and res["n_checked"] >= args.coords
    else:
        spec = _spec(args)
        images, _ = _check_digits(args, args.count)
        steps = [args.steps, -args.steps] if args.steps else [0]
        res = verify.equivariance_suite(images, steps, args.seed, spec)
        passed = all(r["fraction_argmax_shifted"] >= EQ_MIN_AGREEMENT and r["magnitude_rel_err_median"] <= EQ_MAX_RHO_ERR
                     for r in res.values())
        res = {"by_steps": {str(k): v for k, v in res.items()},
               "thresholds": {"min_agreement": EQ_MIN_AGREEMENT, "max_rho_rel_err": EQ_MAX_RHO_ERR}}
    report.update(res)
    report["passed"] = bool(passed)
    _emit(report, args.out)
    return EXIT_OK if passed else EXIT_CHECK


def _check_digits(args, count):
    if args.images or args.labels:
        images, labels = _source_images(args)
    else:
        images, labels = data.load_mnist(_data_root(args))
    if len(images) < count:
        raise UsageExit(f"need {count} digits, found {len(images)}")
    # spread the pick over the file so every class is likely present
    idx = np.linspace(0, len(images) - 1, count).round().astype(int)
    return images[idx], labels[idx]


# -- parser ----------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--data-dir", help="data root (default $SCALEVEC_DATA_DIR)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, fixed ordering")
    p.add_argument("--out", help="output path")


def _add_spec(p):
    p.add_argument("--scales", type=int, default=8)
    p.add_argument("--scale-factor", type=float, default=1.25)
    p.add_argument("--angle-range", type=float, default=120.0)


def _add_source(p):
    p.add_argument("--images", help="image IDX file (instead of the MNIST files in the data dir)")
    p.add_argument("--labels", help="label IDX file matching --images")


def build_parser():
    parser = Parser(prog="scalevec", description="Scale-equivariant CNNs on MNIST-scale.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="generate MNIST-scale folds")
    _add_common(p)
    _add_source(p)
    p.add_argument("--folds", type=int, default=6)
    p.add_argument("--sizes", type=_sizes, default=data.SPLIT_SIZES, help="train,val,test (default 10000,2000,50000)")
    p.set_defaults(func=cmd_gen_data, out="folds")

    p = sub.add_parser("train", help="train one model on one fold")
    _add_common(p)
    _add_spec(p)
    p.add_argument("--fold", required=True, help="fold file, or index into the data dir")
    p.add_argument("--variant", choices=("standard", "invariant", "equivariant"), default="equivariant")
    p.add_argument("--config", help="JSON file with 'model' and 'train' overrides")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--shift-angles", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--precision", choices=("float32", "float64", "32", "64"), default="float32")
    p.add_argument("--limit-train", type=int, default=None)
    p.add_argument("--metrics", help="per-epoch CSV (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train, out="model.ckpt")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fold split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--precision", choices=("float32", "float64", "32", "64"), default="float32")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run a verification suite")
    _add_common(p)
    _add_spec(p)
    _add_source(p)
    p.add_argument("suite", choices=("oracle", "grad", "equivariance"))
    p.add_argument("--cases", type=int, default=200, help="oracle: random instances")
    p.add_argument("--coords", type=int, default=500, help="grad: stable coordinates")
    p.add_argument("--steps", type=int, default=1, help="equivariance: pyramid steps (checked as +/-)")
    p.add_argument("--count", type=int, default=50, help="equivariance: number of digits")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit:
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args):
            return args.func(args)
    except UsageExit as e:
        print(f"scalevec: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"scalevec: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ScalevecError, ValueError, OSError, KeyError) as e:
        print(f"scalevec: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
