"""Command-line pipeline: stats, gen-fixture, train, eval, explain.

Exit codes: 0 success, 1 internal or numeric error, 2 usage/config error
(including a dataset root that does not follow the directory layout),
3 data error (undecodable image, empty split).
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np
import yaml

from . import dataio, gradcam, metrics, modelio
from .graph import GraphError, freeze
from .templates import TEMPLATES, build_model
from .trainer import TrainConfig, fit, predict

logger = logging.getLogger("cxrcam")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


DEFAULT_CONFIG = {
    "dataset": {"root": None, "preprocess": {"size": 64, "value_range": None, "channels": 3}},
    "model": {"template": "mini_vgg", "head_units": None, "head_activation": "relu",
              "trainable_last": None, "seed": 0},
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "output": {"dir": "run"},
}


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _set(config, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    override = value
    for part in reversed(dotted.split(".")):
        override = {part: override}
    _merge(config, override)


def load_config(path=None, sets=(), flags=None):
    """Defaults <- config file <- ``--set`` assignments <- dedicated flags.

    Paths in the file are resolved against the file's directory; paths from
    flags against the working directory.
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        _merge(config, data)
        base = os.path.dirname(os.path.abspath(path))
        for section, key in (("dataset", "root"), ("output", "dir")):
            if config[section][key] is not None:
                config[section][key] = os.path.join(base, config[section][key])
    for assignment in sets:
        _set(config, assignment)
    for dotted, value in (flags or {}).items():
        if value is not None:
            section, key = dotted.split(".")
            config[section][key] = value
    for section, key in (("dataset", "root"), ("output", "dir")):
        if config[section][key] is not None:
            config[section][key] = os.path.abspath(config[section][key])
    if config["model"]["template"] not in TEMPLATES:
        raise ConfigError(f"model.template must be one of {TEMPLATES}")
    return config


def _train_config(config):
    try:
        return TrainConfig(**config["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc


def _preprocess(config):
    pp = dict(config["dataset"]["preprocess"])
    default = dataio.default_preprocess(config["model"]["template"], pp.get("size") or 64)
    try:
        return dataio.PreprocessSpec(int(pp.get("size") or default.size),
                                     pp.get("value_range") or default.value_range,
                                     int(pp.get("channels") or default.channels))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load(manifest, split, spec):
    if manifest.split_size(split) == 0:
        raise DataError(f"split {split!r} under {manifest.root!r} has no images")
    return dataio.load_split(manifest, split, spec)


# -- commands ----------------------------------------------------------------

def cmd_stats(args):
    manifest = dataio.scan_dataset(args.dataset)
    print(dataio.format_distribution(dataio.class_distribution(manifest)))
    return EXIT_OK


def _parse_per_class(text):
    parts = [int(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 0:
        raise ConfigError("--per-class takes N or TRAIN,VAL,TEST")
    return dict(zip(dataio.SPLITS, parts))


def cmd_gen_fixture(args):
    manifest = dataio.gen_fixture(args.out, _parse_per_class(args.per_class), args.size,
                                  args.seed, args.with_confound)
    print(f"wrote {manifest.total} images to {manifest.root}")
    return EXIT_OK


def cmd_train(args):
    config = load_config(args.config, args.set, {
        "dataset.root": args.dataset, "output.dir": args.out, "model.template": args.template,
        "train.epochs": args.epochs, "train.base_lr": args.lr, "model.seed": args.seed,
    })
    if config["dataset"]["root"] is None:
        raise ConfigError("dataset.root is required (config file or --dataset)")
    tcfg = _train_config(config)
    spec = _preprocess(config)
    mcfg = config["model"]
    manifest = dataio.scan_dataset(config["dataset"]["root"])
    data = {s: _load(manifest, s, spec) for s in ("train", "val")}
    model, params = build_model(mcfg["template"], data["train"].tensor.shape[1:],
                                len(manifest.classes), head_units=mcfg["head_units"],
                                head_activation=mcfg["head_activation"], seed=mcfg["seed"])
    params = freeze(model, params, mcfg["trainable_last"])
    params, history = fit(model, params, data, tcfg)
    out = config["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    meta = {"template": mcfg["template"], "classes": list(manifest.classes),
            "preprocess": spec.to_dict(), "train": asdict(tcfg)}
    modelio.save_model(os.path.join(out, "model.cxr"), model, params, meta)
    history.to_csv(os.path.join(out, "history.csv"))
    with open(os.path.join(out, "run_config.yaml"), "w") as f:
        yaml.safe_dump(config, f, sort_keys=True)
    last = history.records[-1] if history.records else None
    if last:
        print(f"trained {len(history)} epochs: val_acc {last['val_acc']:.4f} "
              f"val_loss {last['val_loss']:.4f}")
    print(f"model written to {os.path.join(out, 'model.cxr')}")
    return EXIT_OK


def _open_model(path):
    try:
        model, params, meta = modelio.load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path!r}: {exc}") from exc
    except (modelio.ModelFileError, GraphError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid model file {path!r}: {exc}") from exc
    spec = dataio.PreprocessSpec(**meta.get("preprocess", {}))
    classes = tuple(meta.get("classes", dataio.CLASSES))
    return model, params, spec, classes


def cmd_eval(args):
    model, params, spec, classes = _open_model(args.model)
    manifest = dataio.scan_dataset(args.dataset, classes)
    batch = _load(manifest, args.split, spec)
    probs = predict(model, params, batch.tensor)
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("non-finite probabilities")
    rep = metrics.report(probs, batch.labels, classes)
    os.makedirs(args.out, exist_ok=True)
    rep.write(os.path.join(args.out, "report.txt"))
    rep.write_confusion_csv(os.path.join(args.out, "confusion.csv"))
    metrics.write_roc_csv(probs, batch.labels, classes, os.path.join(args.out, "roc.csv"))
    print(rep.to_text(), end="")
    return EXIT_OK


def first_n_round_robin(manifest, split, n):
    """Indices of the first ``n`` images of a split, taking classes in turn."""
    per_class, start = [], 0
    for cls in manifest.classes:
        count = manifest.count(split, cls)
        per_class.append(list(range(start, start + count)))
        start += count
    picked, depth = [], 0
    while len(picked) < n and any(depth < len(c) for c in per_class):
        for idx in per_class:
            if depth < len(idx) and len(picked) < n:
                picked.append(idx[depth])
        depth += 1
    return picked


def cmd_explain(args):
    model, params, spec, classes = _open_model(args.model)
    if args.layer and args.layer not in model.conv_layer_ids():
        raise ConfigError(f"--layer must name a conv layer: {model.conv_layer_ids()}")
    if not 0.0 <= args.alpha <= 1.0:
        raise ConfigError("--alpha must be in [0, 1]")
    if args.images:
        images = np.stack([dataio.decode_image(p, spec) for p in args.images])
        labels = []
        for p in args.images:
            parent = os.path.basename(os.path.dirname(os.path.abspath(p)))
            labels.append(classes.index(parent) if parent in classes else None)
        paths = list(args.images)
    else:
        if not args.dataset:
            raise ConfigError("give image paths or --dataset with --first-n")
        manifest = dataio.scan_dataset(args.dataset, classes)
        idx = first_n_round_robin(manifest, args.split, args.first_n)
        if not idx:
            raise DataError(f"split {args.split!r} has no images")
        batch = dataio.load_batch(manifest, args.split, idx, spec)
        images, labels, paths = batch.tensor, list(batch.labels), batch.files
    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    rows = gradcam.batch_explain(model, params, images, args.out, classes, labels, stems,
                                 args.layer, args.alpha, spec.value_range)
    for r in rows:
        print(f"{r['filename']}: pred {r['pred']} ({r['confidence']})")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="cxrcam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="print the class distribution table of a dataset")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen-fixture", help="write a synthetic 4-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", default="50,20,20", help="N or TRAIN,VAL,TEST per class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-confound", action="store_true",
                   help="mark every NORMAL image with a corner box")
    p.set_defaults(func=cmd_gen_fixture)

    p = sub.add_parser("train", help="train a model; writes model.cxr and history.csv")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--template", choices=TEMPLATES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model; writes report.txt and confusion.csv")
    p.add_argument("model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write Grad-CAM overlays and a manifest")
    p.add_argument("model")
    p.add_argument("images", nargs="*")
    p.add_argument("--dataset")
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    p.add_argument("--first-n", type=int, default=4)
    p.add_argument("--layer")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--out", default="explain")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, dataio.DatasetError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, dataio.ImageDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
