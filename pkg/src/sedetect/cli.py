"""Command-line interface.

Exit codes: 0 success, 2 usage/validation/IO error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .config import RunConfig, load_run_config
from .errors import DivergenceError, SEDetectError
from .model import build_scaled_model, load_weights, save_weights
from .training import fit, predict_proba, train_test_split

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("sedetect")


class UsageError(Exception):
    pass


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in
                 ("preset", "arch", "epochs", "batch_size", "folds", "seed",
                  "learning_rate", "cross_validate")}
    return load_run_config(getattr(args, "config", None), **overrides)


def _load_model(args, cfg: RunConfig):
    _require_file(args.weights, "weights file")
    model = build_scaled_model(cfg.model_config(), seed=cfg.train.seed)
    load_weights(model, args.weights)
    return model


def _load_eval_data(args, cfg: RunConfig, model):
    _require_file(args.data, "dataset")
    ds = data.read_container(args.data)
    if ds.size != model.config.input_size:
        raise UsageError(f"dataset side {ds.size} does not match model input {model.config.input_size}")
    if args.split == "test":
        _, test_idx = train_test_split(len(ds), cfg.train.split_ratio, ds.labels, cfg.train.seed)
        ds = ds.subset(test_idx)
    return ds


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_dataset_build(args) -> int:
    ds, skipped = data.ingest_directory(args.src, args.size)
    data.write_container(ds, args.out)
    n0, n1 = ds.class_counts()
    print(f"fake: {n0}, real: {n1}")
    print(f"skipped: {len(skipped)}")
    for path, reason in skipped:
        print(f"  {path}: {reason}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(count=args.n, size=args.size, seed=args.seed)
    ds = data.generate_synthetic(spec)
    data.write_container(ds, args.out)
    n0, n1 = ds.class_counts()
    print(f"wrote {args.out}: {len(ds)} images at {args.size}x{args.size} (fake: {n0}, real: {n1})")
    return EXIT_OK


def cmd_train(args) -> int:
    _require_file(args.data, "dataset")
    cfg = _run_config(args)
    ds = data.read_container(args.data)
    model = build_scaled_model(cfg.model_config(), seed=cfg.train.seed)
    if ds.size != model.config.input_size:
        raise UsageError(f"dataset side {ds.size} does not match model input {model.config.input_size}")
    training_log = fit(model, ds, cfg.train)
    save_weights(model, args.weights_out)
    if args.log_out:
        Path(args.log_out).write_text(training_log.to_csv())
    last = training_log.final()[-1]
    print(f"arch: {cfg.arch}, parameters: {model.param_count()}")
    print(f"final epoch {last.epoch}: loss {last.mean_train_loss:.6f}, train accuracy {last.train_accuracy:.4f}")
    print(f"test accuracy: {training_log.test_accuracy:.4f} ({len(training_log.test_indices)} samples)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args, cfg)
    ds = _load_eval_data(args, cfg, model)
    report = metrics.classification_report(predict_proba(model, ds.images), ds.labels)
    print(report.render("CNN+SE" if cfg.arch == "se" else "CNN"), end="")
    if args.report_out:
        Path(args.report_out).write_text(report.to_kv())
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args, cfg)
    _require_file(args.image, "image")
    try:
        image = data.load_image(args.image, model.config.input_size)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {args.image}: {exc}") from None
    p = predict_proba(model, image[None]).astype(np.float64)[0]
    label = data.CLASS_NAMES[int(p.argmax())]
    print(f"{label} fake p={p[0]:.8f} real p={p[1]:.8f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _run_config(args)
    model = build_scaled_model(cfg.model_config(), seed=cfg.train.seed)
    print(f"{'layer':<12} {'kind':<10} {'output shape':<22} {'parameters':>12}")
    for name, kind, shape, count in model.layer_table():
        shape_txt = "x".join(str(d) for d in shape[1:])
        print(f"{name:<12} {kind:<10} {shape_txt:<22} {count:>12,}")
    total = model.param_count()
    se_total = sum(c for _, kind, _, c in model.layer_table() if kind == "se")
    print(f"total parameters: {total}")
    print(f"se parameters: {se_total}")
    print(f"payload bytes: {4 * total}")
    print(f"serialized bytes: {model.serialized_size_bytes()}")
    print(f"payload size: {4 * total / 2**20:.2f} MiB ({4 * total / 1e6:.2f} MB)")
    return EXIT_OK


def cmd_roc(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args, cfg)
    ds = _load_eval_data(args, cfg, model)
    probs = predict_proba(model, ds.images).astype(np.float64)
    scores = probs[:, args.cls]
    curve = metrics.roc_points(scores, ds.labels, args.cls)
    Path(args.out).write_text(curve.to_csv())
    area = metrics.auc(scores, ds.labels, args.cls)
    print(f"AUC class {args.cls} ({data.CLASS_NAMES[args.cls]}): {area:.4f}")
    print(f"auc={area!r}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_model_opts(p, with_train=False):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--preset", choices=["desk", "reference"])
    p.add_argument("--arch", choices=["se", "baseline"])
    p.add_argument("--seed", type=int)
    if with_train:
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--cross-validate", dest="cross_validate", choices=["true", "false"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-build", help="ingest fake/ and real/ image folders")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=224)
    p.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("synth", help="write a synthetic two-class container")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validate and train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--weights-out", dest="weights_out", required=True)
    p.add_argument("--log-out", dest="log_out")
    _add_model_opts(p, with_train=True)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "classification report"),
                              ("roc", cmd_roc, "export ROC points and print AUC")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--weights", required=True)
        p.add_argument("--split", choices=["all", "test"], default="all",
                       help="evaluate every sample or only the held-out test split")
        _add_model_opts(p)
        if name == "eval":
            p.add_argument("--report-out", dest="report_out")
        else:
            p.add_argument("--out", required=True)
            p.add_argument("--class", dest="cls", type=int, choices=[0, 1], default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--image", required=True)
    p.add_argument("--weights", required=True)
    _add_model_opts(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="parameter table and model size")
    _add_model_opts(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, SEDetectError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
