"""Command-line entry point: synth, train, evaluate, localize, augment-preview, preprocess.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attention import normalize_attention
from .attn_augment import attention_dimming, attention_mixup, attention_patching, threshold_region
from .config import FIELD_TYPES, ConfigError, RunConfig, parse_value, read_config_file, resolve
from .dataset import DataError, SynthSpec, load_manifest, load_samples, save_image, stratified_folds, \
    synthesize_dataset, write_dataset
from .metrics import localize, roc_auc, summarize_folds
from .preprocess import preprocess_image, resize
from .rng import stream
from .trainer import CheckpointError, NonFiniteLossError, PreparedData, checkpoint_save, evaluate, load_model, \
    predict, prepare, set_deterministic, train_fold

log = logging.getLogger("magsd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_STEP = 0.05


class UsageError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _new_run_dir(out: str) -> Path:
    base = Path(out) / datetime.now().strftime("run-%Y%m%d-%H%M%S")
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    return path


def _load_data(manifest_path: str):
    if not manifest_path:
        raise UsageError("--manifest is required")
    manifest = load_manifest(manifest_path)
    return manifest, load_samples(manifest)


def _run_config_of(payload: dict) -> RunConfig:
    """The run configuration a checkpoint was trained with (defaults if absent)."""
    raw = payload.get("extra", {}).get("run_config", {})
    return RunConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items() if k in FIELD_TYPES})


def _check_classes(payload: dict, classes: Sequence[str]) -> None:
    trained = payload["classes"]
    if len(trained) != len(classes):
        raise DataError(f"manifest has {len(classes)} classes but the checkpoint was trained on {len(trained)}")
    if list(trained) != list(classes):
        raise DataError(f"manifest classes {list(classes)} differ from checkpoint classes {trained}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    spec = SynthSpec(classes=args.classes, per_class=args.per_class, size=args.size, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    samples = synthesize_dataset(spec)
    classes = [f"class{k}" for k in range(args.classes)]
    try:
        path = write_dataset(samples, classes, args.out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"wrote {len(samples)} images and {path}")
    return EXIT_OK


def _train_flag_values(args) -> dict:
    values = {}
    for key in FIELD_TYPES:
        text = getattr(args, key, None)
        if text is not None:
            values[key] = parse_value(key, text)
    return values


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    config = resolve(file_values, _train_flag_values(args))
    manifest, samples = _load_data(config.manifest)
    set_deterministic(config.deterministic)

    run_dir = Path(args.run_dir) if args.run_dir else _new_run_dir(config.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(config.to_dict(), run_dir / "config.json")

    classes = manifest.classes
    data = prepare(samples, config.preprocess_config())
    split = stratified_folds(samples, config.k, config.seed)
    model_config = config.model_config(len(classes))
    reports = []
    for fold in config.fold_indices():
        fold_dir = run_dir / f"fold{fold}"
        fold_dir.mkdir(exist_ok=True)
        log.info("fold %d/%d: %d train, %d held out", fold + 1, config.k,
                 len(split.train_ids(fold)), len(split.test_ids(fold)))
        state, report = train_fold(data, fold, split, model_config, config.train_config(), config.augment_config(),
                                   config.stochastic_config(), classes, fold_dir / "train_log.csv")
        checkpoint_save(state, fold_dir / "model.pt", model_config, classes, config.seed,
                        {"run_config": config.to_dict(), "fold": fold, "k": config.k})
        test = data.subset(split.test_ids(fold))
        probs, _ = predict(state.model, test.images)
        _write_predictions(fold_dir / "heldout.csv", test, probs, classes)
        reports.append(report)
        log.info("fold %d accuracy %.4f", fold, report.metrics.multiclass_accuracy)

    metrics = {
        "classes": classes,
        "folds": [dict(report.to_dict(), fold=f) for f, report in zip(config.fold_indices(), reports)],
        "aggregate": summarize_folds(reports),
    }
    _dump_json(metrics, run_dir / "metrics.json")
    agg = metrics["aggregate"]["multiclass_accuracy"]
    print(f"run dir: {run_dir}")
    print(f"held-out accuracy: {agg['mean']:.4f} +/- {agg['std']:.4f} over {len(reports)} fold(s)")
    return EXIT_OK


def _write_predictions(path: Path, data: PreparedData, probs: np.ndarray, classes: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "prediction"] + [f"p_{c}" for c in classes])
        for i, y, p in zip(data.ids, data.labels, probs):
            w.writerow([i, classes[y], classes[int(p.argmax())]] + [f"{v:.6f}" for v in p])


def _load_for_inference(args):
    model, payload = load_model(args.checkpoint)
    manifest, samples = _load_data(args.manifest)
    _check_classes(payload, manifest.classes)
    return model, payload, manifest, samples


def cmd_evaluate(args) -> int:
    model, payload, manifest, samples = _load_for_inference(args)
    classes = manifest.classes
    if args.roc_class is not None and args.roc_class not in classes:
        raise UsageError(f"--roc-class {args.roc_class!r} is not one of {classes}")
    data = prepare(samples, _run_config_of(payload).preprocess_config())
    report, probs = evaluate(model, data, classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report.to_dict(), out / "metrics.json")
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\prediction"] + classes)
        for name, row in zip(classes, report.confusion):
            w.writerow([name] + row.tolist())
    for c, name in enumerate(classes):
        if args.roc_class is not None and name != args.roc_class:
            continue
        positive = data.labels == c
        if positive.all() or not positive.any():
            log.warning("ROC for %s skipped: the class is absent or universal", name)
            continue
        curve = roc_auc(probs[:, c], positive)
        with open(out / f"roc_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
                w.writerow([t, f, p])
    print(f"accuracy {report.metrics.multiclass_accuracy:.4f}  macro AUC {report.auc_macro:.4f}  -> {out}")
    return EXIT_OK


def _parse_threshold(text: str) -> list[float] | float:
    if text == "sweep":
        n = int(round(1 / SWEEP_STEP))
        return [round(i * SWEEP_STEP, 10) for i in range(n + 1)]
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"--threshold takes a number or 'sweep', got {text!r}") from None


def cmd_localize(args) -> int:
    thresholds = _parse_threshold(args.threshold)
    model, payload, manifest, samples = _load_for_inference(args)
    annotated = [s for s in samples if s.annotation is not None]
    if not annotated:
        raise DataError("no annotated samples in the manifest")
    data = prepare(annotated, _run_config_of(payload).preprocess_config())
    _, attention = predict(model, data.images)

    out = Path(args.out)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    sweep = thresholds if isinstance(thresholds, list) else [thresholds]
    rows = []
    for t in sweep:
        ious = [localize(a, s.image.shape, t, s.annotation_box()).iou for a, s in zip(attention, annotated)]
        rows.append((t, float(np.mean(ious))))
    best_t, best_iou = max(rows, key=lambda r: r[1]) if len(rows) > 1 else rows[0]
    if isinstance(thresholds, list):
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "mean_iou"])
            w.writerows(rows)

    entries = []
    for a, s in zip(attention, annotated):
        res = localize(a, s.image.shape, best_t, s.annotation_box())
        entries.append({"id": s.id, "iou": res.iou, "box": res.box.to_dict() if res.box else None})
        stem = Path(s.id).with_suffix("").as_posix().replace("/", "_")
        save_image(out / "heatmaps" / f"{stem}.png", res.heatmap)
    _dump_json({"threshold": best_t, "mean_iou": best_iou, "samples": entries}, out / "localization.json")
    print(f"threshold {best_t:.2f}  mean box IoU {best_iou:.4f} over {len(entries)} samples -> {out}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    model, payload = load_model(args.checkpoint)
    config = _run_config_of(payload)
    if args.image:
        from .dataset import load_image

        image = load_image(args.image)
    else:
        manifest, samples = _load_data(args.manifest)
        if not 0 <= args.index < len(samples):
            raise UsageError(f"--index {args.index} out of range for {len(samples)} samples")
        image = samples[args.index].image
    x = preprocess_image(image, config.preprocess_config())
    _, attention = predict(model, x[None])
    rng = stream(args.seed, "preview")
    n_maps = attention.shape[1]
    j = args.map if args.map is not None else int(rng.integers(n_maps))
    if not 0 <= j < n_maps:
        raise UsageError(f"--map must lie in [0, {n_maps})")
    aug = config.augment_config()
    a_star = normalize_attention(attention[0], j)
    size = x.shape
    mixed = attention_mixup(x, threshold_region(a_star, aug.theta_m, size), aug.draw_gamma(rng))
    patched = attention_patching(x, threshold_region(a_star, aug.theta_m, size), rng)
    dimmed = attention_dimming(x, a_star, aug.theta_d, aug.dim_factor)
    sheet = np.concatenate([x, mixed, patched, dimmed], axis=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "preview.png", sheet)
    save_image(out / f"attention_map{j}.png", resize(a_star.astype(np.float32), size).clip(0, 1))
    print(f"map {j}: panels original | mixup | patching | dimming -> {out / 'preview.png'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    flags = {k: parse_value(k, getattr(args, k)) for k in ("clahe", "clip_limit", "tiles", "input_size")
             if getattr(args, k) is not None}
    config = resolve({}, flags).preprocess_config()
    manifest, samples = _load_data(args.manifest)
    out = Path(args.out)
    for s in samples:
        target = out / s.id
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(target.with_suffix(".png"), preprocess_image(s.image, config))
    print(f"wrote {len(samples)} preprocessed images -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

_TRAIN_FLAGS = {
    "manifest": "training manifest CSV",
    "out": "parent directory for timestamped run dirs",
    "epochs": None, "batch_size": None, "lr": None, "momentum": None, "weight_decay": None,
    "theta": "confidence gate for the soft target",
    "augs": "comma list from mixup,patch,dim (empty string: none)",
    "scales": "comma list of pyramid levels from 1,2,3",
    "pooling": "attention | gap | gmp",
    "consistency": "soft | l2 | none",
    "clahe": "on | off",
    "seed": None,
    "deterministic": "on | off",
    "k": "number of cross-validation folds",
    "folds": "run only the first N folds (0: all)",
    "input_size": "network input side, a multiple of 32",
    "num_maps": "attention maps per image",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magsd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="k-fold training with per-fold checkpoints and metrics")
    p.add_argument("--config", help="key = value file (or a run's config.json); flags override it")
    p.add_argument("--run-dir", help="exact output directory instead of a timestamped one")
    listed = set(_TRAIN_FLAGS)
    for key, help_text in _TRAIN_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, help=help_text)
    for key in FIELD_TYPES:
        if key not in listed:
            p.add_argument("--" + key.replace("_", "-"), dest=key, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="inference-only metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="eval")
    p.add_argument("--roc-class", help="write the ROC curve of this class only")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("localize", help="attention-based localization against annotations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", default="0.5", help="a number in [0, 1] or 'sweep'")
    p.add_argument("--out", default="localization")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("augment-preview", help="show the three attention-guided augmentations of one image")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--manifest")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--map", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="preview")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("preprocess", help="write CLAHE-enhanced, resized copies of a manifest's images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    for key in ("clahe", "clip_limit", "tiles", "input_size"):
        p.add_argument("--" + key.replace("_", "-"), dest=key)
    p.set_defaults(func=cmd_preprocess)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"magsd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"magsd {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"magsd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
