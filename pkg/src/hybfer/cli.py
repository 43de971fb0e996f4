"""Command-line entry points: data prep, codebooks, training, evaluation.

Exit codes form a stable scripting contract: 0 success, 1 I/O or data
failure, 2 usage error, 3 numeric divergence. Every successful run writes
exactly one JSON manifest beside its outputs recording the resolved
configuration, the seed, timestamps, and a sha256 checksum of each artifact
it produced. No command mutates its input files.
"""

import argparse
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import model_zoo as mz
from . import nn_core as nn
from . import sift_features as sf
from .data_pipeline import (DatasetSplits, LabeledSample, augment_ten,
                            expression_name, kfold_indices, load_fer_csv,
                            write_fer_csv)
from .errors import (DataError, DivergenceError, FormatError, ParseError,
                     ShapeError, StateError)

MODEL_BY_FLAG = {"cnn": "cnn_only", "cnn-sift": "cnn_sift", "cnn-dsift": "cnn_dsift"}
SOURCE_BY_VARIANT = {"cnn_only": "none", "cnn_sift": "sift_bag", "cnn_dsift": "dense_sift"}
SPLIT_ATTR = {"train": "train", "public": "public_test", "private": "private_test"}


# ---------------------------------------------------------------------------
# shared plumbing


def _utc_now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_out(args, path):
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        return os.path.join(args.out_dir, path)
    return path


def _write_manifest(command, args, started, inputs, outputs, path=None):
    config = {key: value for key, value in sorted(vars(args).items())
              if not key.startswith("_") and key != "func"}
    manifest = {
        "command": command,
        "config": config,
        "seed": args.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": {str(p): _sha256(p) for p in outputs},
        "started": started,
        "finished": _utc_now(),
    }
    if path is None:
        path = str(outputs[0]) + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def _read_csv(path, num_classes=7):
    try:
        return load_fer_csv(path, num_classes)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _read_codebook(path):
    try:
        return sf.load_codebook(path)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _read_checkpoint(path):
    try:
        return mz.load_checkpoint(path)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _epoch_line(entry, total):
    line = (f"epoch {entry['epoch']}/{total}"
            f" train_loss={entry['train_loss']:.4f}"
            f" train_acc={entry['train_acc']:.4f}")
    if entry["val_acc"] is not None:
        line += f" val_acc={entry['val_acc']:.4f}"
    return line


def _load_models(checkpoint_paths, args):
    """Checkpoints as (graph, feature source) pairs ready for evaluation."""
    ckpts = [_read_checkpoint(p) for p in checkpoint_paths]
    classes = sorted({c.num_classes for c in ckpts})
    if len(classes) > 1:
        raise DataError(f"checkpoints disagree on class count: {classes}")
    book = None
    if any(c.variant == "cnn_sift" for c in ckpts):
        if not args.codebook:
            args._parser.error("--codebook is required with cnn-sift checkpoints")
        book = _read_codebook(args.codebook)
    models = []
    for ckpt in ckpts:
        source = book if ckpt.variant == "cnn_sift" else SOURCE_BY_VARIANT[ckpt.variant]
        models.append((mz.graph_from_checkpoint(ckpt), source))
    return models, classes[0]


# ---------------------------------------------------------------------------
# subcommands


def run_train(args):
    variant = MODEL_BY_FLAG[args.model]
    source = SOURCE_BY_VARIANT[variant]
    codebook = None
    if variant == "cnn_sift":
        if not args.codebook:
            args._parser.error("--codebook is required with --model cnn-sift")
        codebook = _read_codebook(args.codebook)
    started = _utc_now()
    data = _read_csv(args.data)
    # the bag-of-keypoints side input is as wide as the codebook
    size_kwargs = {} if codebook is None else {"side_dim": codebook.k}
    model = mz.build_model(variant, nn.make_rng(args.seed), **size_kwargs)
    config = mz.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.learning_rate, seed=args.seed,
                            augment=args.augment, feature_source=source,
                            codebook=codebook)
    out = _resolve_out(args, args.out)
    history_path = out + ".history.jsonl"
    with open(history_path, "w", encoding="utf-8") as hist:
        def on_epoch(entry):
            hist.write(json.dumps(entry) + "\n")
            hist.flush()
            print(_epoch_line(entry, config.epochs), flush=True)

        ckpt, _ = mz.train(model, data, config, nn.make_rng(args.seed),
                           on_epoch=on_epoch)
    mz.save_checkpoint(ckpt, out)
    inputs = [args.data] + ([args.codebook] if args.codebook else [])
    _write_manifest("train", args, started, inputs, [out, history_path])
    return 0


def run_evaluate(args):
    started = _utc_now()
    models, num_classes = _load_models(args.checkpoint, args)
    data = _read_csv(args.data, num_classes)
    samples = getattr(data, SPLIT_ATTR[args.split])
    if not samples:
        raise DataError(f"{args.data}: split {args.split!r} has no rows")
    metrics = mz.evaluate(models, samples)
    print(f"accuracy={metrics.accuracy:.4f}")
    confusion_path = _resolve_out(args, args.confusion)
    k = metrics.confusion.shape[0]
    with open(confusion_path, "w", encoding="utf-8") as fh:
        fh.write("actual," + ",".join(f"pred_{j}" for j in range(k)) + "\n")
        for i in range(k):
            fh.write(f"{i}," + ",".join(str(int(v)) for v in metrics.confusion[i]) + "\n")
    inputs = list(args.checkpoint) + [args.data]
    if args.codebook:
        inputs.append(args.codebook)
    _write_manifest("evaluate", args, started, inputs, [confusion_path])
    return 0


def run_fit_codebook(args):
    started = _utc_now()
    data = _read_csv(args.data)
    descriptors = []
    for sample in data.train:
        descriptors.extend(sf.extract_descriptors(sample.image))
    if len(descriptors) < args.k:
        raise DataError(f"{len(descriptors)} descriptors cannot seed {args.k} clusters;"
                        " use a smaller --k")
    book = sf.kmeans_fit(descriptors, args.k, nn.make_rng(args.seed))
    out = _resolve_out(args, args.out)
    sf.save_codebook(out, book)
    print(f"descriptors={len(descriptors)}")
    print(f"objective={book.objective_trace[-1]:.6f}")
    _write_manifest("fit-codebook", args, started, [args.data], [out])
    return 0


def run_predict(args):
    started = _utc_now()
    models, num_classes = _load_models(args.checkpoint, args)
    data = _read_csv(args.data, num_classes)
    samples = getattr(data, SPLIT_ATTR[args.split])
    if not 0 <= args.index < len(samples):
        raise DataError(f"--index {args.index} outside [0, {len(samples)})"
                        f" for split {args.split!r}")
    image = samples[args.index].image
    rows = []
    for graph, source in models:
        side = mz.compute_side_features([image], source)
        rows.append(mz.forward_probs(graph, image, None if side is None else side[0]))
    agg = mz.aggregate(rows)
    label = mz.predict_label(agg)
    print(f"label={label}")
    print(f"name={expression_name(label, num_classes)}")
    print("probs=" + ",".join(f"{p:.6f}" for p in agg))
    inputs = list(args.checkpoint) + [args.data]
    if args.codebook:
        inputs.append(args.codebook)
    _write_manifest("predict", args, started, inputs, [],
                    path=_resolve_out(args, "predict.manifest.json"))
    return 0


def run_augment(args):
    started = _utc_now()
    data = _read_csv(args.data)
    rng = nn.make_rng(args.seed)
    out_samples = []
    for sample in data.train:
        out_samples.append(sample)
        for image in augment_ten(sample.image, rng):
            out_samples.append(LabeledSample(image, sample.label, "train"))
    passthrough = list(data.public_test) + list(data.private_test)
    out_samples.extend(passthrough)
    out = _resolve_out(args, args.out)
    write_fer_csv(out, out_samples)
    print(f"training_rows={len(data.train)}"
          f" augmented_rows={len(data.train) * 10}"
          f" passthrough_rows={len(passthrough)}")
    _write_manifest("augment", args, started, [args.data], [out])
    return 0


def run_finetune(args):
    started = _utc_now()
    source_ckpt = _read_checkpoint(args.checkpoint)
    source = SOURCE_BY_VARIANT[source_ckpt.variant]
    codebook = None
    if source_ckpt.variant == "cnn_sift":
        if not args.codebook:
            args._parser.error("--codebook is required to fine-tune a cnn-sift checkpoint")
        codebook = _read_codebook(args.codebook)
    data = _read_csv(args.data, num_classes=6)
    config = mz.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.learning_rate, seed=args.seed,
                            augment=args.augment, feature_source=source,
                            codebook=codebook)
    out = _resolve_out(args, args.out)
    rng = nn.make_rng(args.seed)
    eval_source = codebook if source_ckpt.variant == "cnn_sift" else source
    if args.folds:
        # cross-validation protocol: pool every row, ignore the Usage column
        samples = data.all_samples()
        folds = kfold_indices(len(samples), args.folds, rng)
        accuracies = []
        with open(out, "w", encoding="utf-8") as fh:
            for i, held_idx in enumerate(folds, start=1):
                held_set = {int(j) for j in held_idx}
                held = [samples[j] for j in held_idx]
                rest = [s for j, s in enumerate(samples) if j not in held_set]
                tuned, _ = mz.fine_tune(source_ckpt, DatasetSplits(rest, [], []),
                                        config, rng)
                metrics = mz.evaluate([(mz.graph_from_checkpoint(tuned), eval_source)], held)
                accuracies.append(metrics.accuracy)
                record = {"fold": i, "train_size": len(rest),
                          "heldout_size": len(held), "accuracy": metrics.accuracy}
                fh.write(json.dumps(record) + "\n")
                fh.flush()
                print(f"fold {i}/{args.folds} train={len(rest)} heldout={len(held)}"
                      f" acc={metrics.accuracy:.4f}", flush=True)
        print(f"mean_accuracy={float(np.mean(accuracies)):.4f}")
        outputs = [out]
    else:
        history_path = out + ".history.jsonl"
        with open(history_path, "w", encoding="utf-8") as hist:
            def on_epoch(entry):
                hist.write(json.dumps(entry) + "\n")
                hist.flush()
                print(_epoch_line(entry, config.epochs), flush=True)

            tuned, _ = mz.fine_tune(source_ckpt, data, config, rng, on_epoch=on_epoch)
        mz.save_checkpoint(tuned, out)
        outputs = [out, history_path]
    inputs = [args.checkpoint, args.data] + ([args.codebook] if args.codebook else [])
    _write_manifest("finetune", args, started, inputs, outputs)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hybfer",
        description="Facial-expression recognition: CNN + SIFT hybrid models.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func, _parser=p)
        p.add_argument("--out-dir", default=None,
                       help="directory receiving all outputs (created if missing)")
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
        return p

    p = add("train", run_train, "train one model variant on a FER-format CSV")
    p.add_argument("--model", required=True, choices=sorted(MODEL_BY_FLAG))
    p.add_argument("--data", required=True, help="FER-format CSV")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--codebook", default=None,
                   help="codebook file (required for cnn-sift)")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=False,
                   help="expand each training image with its ten variants")

    p = add("evaluate", run_evaluate,
            "report accuracy of one or more checkpoints on a split")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path (repeat to aggregate)")
    p.add_argument("--data", required=True, help="FER-format CSV")
    p.add_argument("--split", required=True, choices=sorted(SPLIT_ATTR))
    p.add_argument("--codebook", default=None)
    p.add_argument("--confusion", default="confusion.csv",
                   help="confusion-matrix CSV output path")

    p = add("fit-codebook", run_fit_codebook,
            "fit a K-means codebook over keypoint descriptors of the training split")
    p.add_argument("--data", required=True, help="FER-format CSV")
    p.add_argument("--out", required=True, help="codebook output path")
    p.add_argument("--k", type=int, default=2048)

    p = add("predict", run_predict, "predict the expression of one sample")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path (repeat to aggregate)")
    p.add_argument("--data", required=True, help="FER-format CSV")
    p.add_argument("--split", default="train", choices=sorted(SPLIT_ATTR))
    p.add_argument("--index", type=int, default=0,
                   help="sample position within the chosen split")
    p.add_argument("--codebook", default=None)

    p = add("augment", run_augment,
            "write a CSV with every training row followed by its ten variants")
    p.add_argument("--data", required=True, help="FER-format CSV")
    p.add_argument("--out", required=True, help="augmented CSV output path")

    p = add("finetune", run_finetune,
            "continue training a checkpoint on a six-class CSV")
    p.add_argument("--checkpoint", required=True, help="source checkpoint")
    p.add_argument("--data", required=True, help="six-class FER-format CSV")
    p.add_argument("--out", required=True,
                   help="checkpoint output path (per-fold metrics JSONL with --folds)")
    p.add_argument("--codebook", default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="expand each training image with its ten variants")
    p.add_argument("--folds", type=int, default=None,
                   help="run k-fold cross-validation over all rows instead of one fit")

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, DataError, ParseError, FormatError, ShapeError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
