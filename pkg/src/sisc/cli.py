"""Command-line pipeline: synth, prepare, train, eval, explain.

Every command resolves its configuration as defaults < config file < flags,
echoes the resolved values into the output directory, and keeps the exit
code contract: 0 success, 2 usage or data problems, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .crm import (
    crm_all_classes,
    generate_crm,
    localization_score,
    write_map_pgm,
    write_map_raw,
)
from .data import (
    AnnotationRecord,
    NoduleSample,
    RadiologistEntry,
    SplitPlan,
    assign_label,
    augment,
    augment_plan,
    batch_from_samples,
    count_labels,
    crop_nodule,
    filter_excluded,
    load_manifest,
    load_slice,
    merge_annotations,
    minmax_normalize,
    read_shard,
    split,
    synth_generate,
    write_manifest,
    write_shard,
)
from .errors import ConfigurationError, DataError, NumericError, SiscError
from .metrics import (
    confusion,
    metrics,
    roc_auc,
    write_metrics_report,
    write_roc_csv,
)
from .sequencer import (
    CellConfig,
    FinalCellConfig,
    SequencerConfig,
    TrainSchedule,
    build_sequencer,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

CRM_VARIANT_FLAGS = {
    "literal": "literal-eq2",
    "deconvnet": "deconvnet-relu",
    "guided": "guided",
}


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(","))


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


# defaults follow the published training recipe where one exists
DEFAULTS = {
    "seed": 0,
    "epochs": 200,
    "batch_size": 128,
    "lr": 1e-5,
    "dropout": 0.25,
    "bn_momentum": 0.99,
    "variant": "I",
    "crm_variant": "literal",
    "scale": "none",
    "crop_size": 96,
    "n": 400,
    "size": 96,
    "folds": 0,
    "cells": (16, 32, 64),
    "conv_count": 3,
    "final_channels": 128,
    "kernel": 3,
    "ratios": (0.8, 0.1, 0.1),
}

KEY_PARSERS = {
    "seed": int, "epochs": int, "batch_size": int, "crop_size": int,
    "n": int, "size": int, "folds": int, "conv_count": int,
    "final_channels": int, "kernel": int,
    "lr": float, "dropout": float, "bn_momentum": float,
    "variant": str, "crm_variant": str, "scale": str,
    "cells": _int_tuple, "ratios": _float_tuple,
}


def read_config_file(path) -> dict:
    """Flat `key = value` lines; blank lines and # comments ignored."""
    values = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8")
                                  .splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path} line {line_no}: expected "
                                     f"'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KEY_PARSERS:
            raise ConfigurationError(f"{path} line {line_no}: unknown key "
                                     f"{key!r}")
        try:
            values[key] = KEY_PARSERS[key](value)
        except ValueError as exc:
            raise ConfigurationError(f"{path} line {line_no}: bad value for "
                                     f"{key!r}: {exc}") from None
    return values


def resolve_config(args, keys) -> dict:
    cfg = {key: DEFAULTS[key] for key in keys}
    config_path = getattr(args, "config", None)
    if config_path:
        for key, value in read_config_file(config_path).items():
            if key in cfg:
                cfg[key] = value
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def write_config_echo(out_dir: Path, command: str, cfg: dict,
                      paths: dict) -> None:
    lines = [f"command = {command}"]
    for key in sorted(paths):
        lines.append(f"{key} = {paths[key]}")
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n",
                                        encoding="utf-8")


def _make_out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_config(cfg: dict, input_size: int) -> SequencerConfig:
    cells = tuple(CellConfig(channels=c, conv_count=cfg["conv_count"],
                             kernel=cfg["kernel"],
                             dropout_rate=cfg["dropout"],
                             bn_momentum=cfg["bn_momentum"])
                  for c in cfg["cells"])
    final = FinalCellConfig(channels=cfg["final_channels"],
                            kernel=cfg["kernel"],
                            dropout_rate=cfg["dropout"],
                            bn_momentum=cfg["bn_momentum"])
    return SequencerConfig(cells=cells, final_cell=final,
                           input_size=input_size)


def _predict_probs(model, samples, chunk: int = 256) -> np.ndarray:
    x, _ = batch_from_samples(samples)
    rows = []
    for start in range(0, len(x), chunk):
        probs, _ = forward(model, x[start:start + chunk], "infer")
        rows.append(probs.reshape(probs.shape[0], -1))
    return np.concatenate(rows, axis=0)


def _mask_centroid(mask: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(mask)
    return int(round(xs.mean())), int(round(ys.mean()))


def cmd_synth(args) -> int:
    cfg = resolve_config(args, ["n", "seed", "size"])
    out = _make_out_dir(args.out)
    write_config_echo(out, "synth", cfg, {"out": out})
    samples = synth_generate(cfg["n"], np.random.default_rng(cfg["seed"]),
                             size=cfg["size"])
    slices = out / "slices"
    masks = out / "masks"
    slices.mkdir(exist_ok=True)
    masks.mkdir(exist_ok=True)
    records = []
    for sample in samples:
        np.save(slices / f"{sample.sample_id}.npy",
                sample.image.astype(np.float32))
        np.save(masks / f"{sample.sample_id}.npy", sample.mask)
        cx, cy = _mask_centroid(sample.mask)
        records.append(_manifest_record(sample, cx, cy))
    write_manifest(records, out / "manifest.csv")
    # slices stay raw (the archive analog); the training-ready shard gets
    # the same per-image scaling prepare applies
    ready = [replace(s, image=minmax_normalize(s.image)) for s in samples]
    write_shard(ready, out / "data.shard")
    counts = count_labels(samples)
    print(f"wrote {len(samples)} samples to {out}: "
          f"benign {counts['benign']} / malignant {counts['malignant']}")
    return 0


def _manifest_record(sample: NoduleSample, cx: int, cy: int) -> AnnotationRecord:
    entry = RadiologistEntry(rad_id="synth", center=(float(cx), float(cy)),
                             score=sample.malignancy_score)
    return AnnotationRecord(image_path=f"slices/{sample.sample_id}.npy",
                            nodule_id=sample.sample_id, slice_idx=0,
                            entries=(entry,))


def _samples_from_manifest(manifest_path: Path, variant: str,
                           crop_size: int) -> list[NoduleSample]:
    samples = []
    for record in load_manifest(manifest_path):
        slice_image = load_slice(manifest_path.parent / record.image_path)
        center, score = merge_annotations(record)
        window = crop_nodule(slice_image, center, size=crop_size)
        samples.append(NoduleSample(
            image=minmax_normalize(window), malignancy_score=score,
            label=assign_label(score, variant),
            sample_id=f"{record.nodule_id}.s{record.slice_idx}",
            source_id=record.nodule_id))
    return samples


def _augment_targets(variant: str, scale: str,
                     train_counts: dict) -> dict:
    """Scale the published growth factors down to this training part."""
    plan = augment_plan(variant, scale)
    baseline = augment_plan(variant, "before")
    targets = {}
    for label in ("benign", "malignant"):
        factor = plan[label] / baseline[label]
        targets[label] = max(int(round(factor * train_counts[label])),
                             train_counts[label])
    return targets


def cmd_prepare(args) -> int:
    cfg = resolve_config(args, ["variant", "seed", "scale", "crop_size",
                                "ratios"])
    out = _make_out_dir(args.out)
    manifest_path = Path(args.manifest)
    write_config_echo(out, "prepare", cfg,
                      {"manifest": manifest_path, "out": out})
    samples = _samples_from_manifest(manifest_path, cfg["variant"],
                                     cfg["crop_size"])
    raw_counts = count_labels(samples)
    kept = filter_excluded(samples)
    parts = split(kept, SplitPlan(seed=cfg["seed"], ratios=cfg["ratios"]))
    stats = [f"variant = {cfg['variant']}",
             f"pre-augmentation benign = {raw_counts['benign']}",
             f"pre-augmentation malignant = {raw_counts['malignant']}",
             f"excluded = {raw_counts['excluded']}"]
    if cfg["scale"] != "none":
        targets = _augment_targets(cfg["variant"], cfg["scale"],
                                   count_labels(parts["train"]))
        parts["train"] = augment(parts["train"], targets,
                                 np.random.default_rng([cfg["seed"], 1]))
    for name in ("train", "val", "test"):
        write_shard(parts[name], out / f"{name}.shard")
        counts = count_labels(parts[name])
        stats.append(f"{name} benign = {counts['benign']}")
        stats.append(f"{name} malignant = {counts['malignant']}")
    (out / "stats.txt").write_text("\n".join(stats) + "\n", encoding="utf-8")
    for line in stats:
        print(line)
    return 0


def _load_training_parts(data_dir: Path, seed: int):
    train_path = data_dir / "train.shard"
    if train_path.exists():
        train_part = read_shard(train_path)
        val_part = read_shard(data_dir / "val.shard")
        return train_part, val_part, False
    single = data_dir / "data.shard"
    if not single.exists():
        raise DataError(f"no train.shard or data.shard under {data_dir}")
    parts = split(read_shard(single), SplitPlan(seed=seed))
    return parts["train"], parts["val"], True


def cmd_train(args) -> int:
    cfg = resolve_config(args, ["seed", "epochs", "batch_size", "lr",
                                "dropout", "bn_momentum", "cells",
                                "conv_count", "final_channels", "kernel"])
    out = _make_out_dir(args.out)
    data_dir = Path(args.data)
    train_part, val_part, internal_split = _load_training_parts(
        data_dir, cfg["seed"])
    side = train_part[0].image.shape[0]
    write_config_echo(out, "train", cfg,
                      {"data": data_dir, "out": out,
                       "input_size": side,
                       "internal_split": str(internal_split).lower()})
    model = build_sequencer(_model_config(cfg, side),
                            np.random.default_rng(cfg["seed"]))
    schedule = TrainSchedule(epochs=cfg["epochs"],
                             batch_size=cfg["batch_size"], lr=cfg["lr"],
                             seed=cfg["seed"])
    model, result = train(model, batch_from_samples(train_part),
                          batch_from_samples(val_part), schedule)
    lines = ["epoch,train_loss,train_accuracy,val_loss,val_accuracy"]
    for row in result.history:
        print(f"epoch {row.epoch}: train_loss {row.train_loss:.4f} "
              f"train_acc {row.train_accuracy:.4f} "
              f"val_loss {row.val_loss:.4f} val_acc {row.val_accuracy:.4f}")
        lines.append(f"{row.epoch},{row.train_loss:.6f},"
                     f"{row.train_accuracy:.6f},{row.val_loss:.6f},"
                     f"{row.val_accuracy:.6f}")
    (out / "history.csv").write_text("\n".join(lines) + "\n",
                                     encoding="utf-8")
    save_checkpoint(model, out / "checkpoint.sisc")
    print(f"best epoch {result.best_epoch} "
          f"val_accuracy {result.best_val_accuracy:.4f}")
    return 0


def _fold_metrics(model, fold_samples) -> tuple[float, float, float, float]:
    probs = _predict_probs(model, fold_samples)
    actual = [s.label for s in fold_samples]
    predicted = ["malignant" if p else "benign"
                 for p in np.argmax(probs, axis=1)]
    accuracy, sensitivity, specificity = metrics(confusion(predicted, actual))
    auc = roc_auc(probs[:, 1], actual).auc
    return accuracy, sensitivity, specificity, auc


def cmd_eval(args) -> int:
    cfg = resolve_config(args, ["seed", "folds"])
    out = _make_out_dir(args.out)
    data_dir = Path(args.data)
    checkpoint_path = Path(args.checkpoint)
    write_config_echo(out, "eval", cfg,
                      {"checkpoint": checkpoint_path, "data": data_dir,
                       "out": out})
    model = load_checkpoint(checkpoint_path)
    shard = data_dir / "test.shard"
    if not shard.exists():
        shard = data_dir / "data.shard"
    if not shard.exists():
        raise DataError(f"no test.shard or data.shard under {data_dir}")
    samples = read_shard(shard)
    side = samples[0].image.shape[0]
    if side != model.config.input_size:
        raise DataError(f"checkpoint expects {model.config.input_size}px "
                        f"images but {shard.name} holds {side}px")
    if cfg["folds"] >= 2:
        folds = split(samples, SplitPlan(seed=cfg["seed"],
                                         folds=cfg["folds"]))
        rows = [_fold_metrics(model, fold) for fold in folds]
    else:
        rows = [_fold_metrics(model, samples)]
    write_metrics_report(rows, out / "metrics.csv")
    probs = _predict_probs(model, samples)
    curve = roc_auc(probs[:, 1], [s.label for s in samples])
    write_roc_csv(curve, out / "roc.csv")
    names = ("accuracy", "sensitivity", "specificity", "auc")
    for i, name in enumerate(names):
        column = [row[i] for row in rows]
        if len(column) > 1:
            mean = float(np.mean(column))
            std = float(np.std(column, ddof=1))
            print(f"{name} = {mean:.4f} ± {std:.4f}")
        else:
            print(f"{name} = {column[0]:.4f}")
    return 0


def cmd_explain(args) -> int:
    cfg = resolve_config(args, ["crm_variant"])
    out = _make_out_dir(args.out)
    checkpoint_path = Path(args.checkpoint)
    image_path = Path(args.image)
    paths = {"checkpoint": checkpoint_path, "image": image_path, "out": out}
    if args.mask:
        paths["mask"] = Path(args.mask)
    write_config_echo(out, "explain", cfg, paths)
    if cfg["crm_variant"] not in CRM_VARIANT_FLAGS:
        raise ConfigurationError(
            f"crm_variant must be one of {sorted(CRM_VARIANT_FLAGS)}, got "
            f"{cfg['crm_variant']!r}")
    variant = CRM_VARIANT_FLAGS[cfg["crm_variant"]]
    model = load_checkpoint(checkpoint_path)
    # prepare min-max normalizes every crop; inference must see the same
    image = minmax_normalize(load_slice(image_path))
    class_id, prob = predict(model, image)
    print(f"class {class_id} p={prob:.4f}")
    if args.class_id is not None:
        maps = [generate_crm(model, image, args.class_id, variant)]
    else:
        maps = crm_all_classes(model, image, variant)
    mask = None
    if args.mask:
        mask = np.load(paths["mask"])
    for crm in maps:
        stem = out / f"map_class{crm.class_id}"
        write_map_pgm(crm, stem.with_suffix(".pgm"))
        write_map_raw(crm, stem.with_suffix(".crm"))
        if mask is not None:
            score = localization_score(crm, mask)
            print(f"localization class {crm.class_id} = {score:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sisc",
        description="radiomic sequencer pipeline: synthesize data, prepare "
                    "datasets, train, evaluate, and explain predictions")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub):
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--config", default=None,
                         help="flat key = value configuration file")
        sub.add_argument("--out", required=True, help="output directory")

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--n", type=int, default=None)
    synth.add_argument("--size", type=int, default=None)
    add_common(synth)
    synth.set_defaults(func=cmd_synth)

    prepare = commands.add_parser("prepare",
                                  help="label, split, and augment a dataset")
    prepare.add_argument("--manifest", required=True)
    prepare.add_argument("--variant", choices=("I", "B", "M"), default=None)
    prepare.add_argument("--scale",
                         choices=("none", "15k", "30k", "60k"), default=None)
    prepare.add_argument("--crop-size", dest="crop_size", type=int,
                         default=None)
    add_common(prepare)
    prepare.set_defaults(func=cmd_prepare)

    train_cmd = commands.add_parser("train", help="train a sequencer")
    train_cmd.add_argument("--data", required=True,
                           help="directory holding prepared shards")
    train_cmd.add_argument("--epochs", type=int, default=None)
    train_cmd.add_argument("--batch-size", dest="batch_size", type=int,
                           default=None)
    train_cmd.add_argument("--lr", type=float, default=None)
    train_cmd.add_argument("--dropout", type=float, default=None)
    train_cmd.add_argument("--bn-momentum", dest="bn_momentum", type=float,
                           default=None)
    add_common(train_cmd)
    train_cmd.set_defaults(func=cmd_train)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint")
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--data", required=True)
    eval_cmd.add_argument("--folds", type=int, default=None)
    add_common(eval_cmd)
    eval_cmd.set_defaults(func=cmd_eval)

    explain = commands.add_parser("explain",
                                  help="render critical response maps")
    explain.add_argument("--checkpoint", required=True)
    explain.add_argument("--image", required=True, help="2-d .npy slice")
    explain.add_argument("--class", dest="class_id", type=int, default=None)
    explain.add_argument("--crm-variant", dest="crm_variant",
                         choices=tuple(CRM_VARIANT_FLAGS), default=None)
    explain.add_argument("--mask", default=None,
                         help="optional ground-truth mask .npy")
    add_common(explain)
    explain.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (SiscError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
