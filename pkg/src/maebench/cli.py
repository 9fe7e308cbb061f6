"""Command-line runner: ``maebench <command> [options]``.

Exit status is 0 on success, 2 for configuration errors, 3 for data errors
and 4 for numeric or checkpoint-integrity errors. Failures print a JSON
object ``{"error", "message", "details"}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import tensor as T
from .adapters import (FinetuneData, detections_and_truth, finetune_loop, model_from_finetune,
                       model_from_pretrained, predict_detections, predict_scores)
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, load_config, resolve_threads, write_run_record
from .data import (AugmentConfig, Box, ImageDataset, Manifest, SampleRecord, chest_region,
                   denormalize, eval_transform, image_stats, load_image, normalize, parse_manifest,
                   resize_cubic, save_pgm, train_transform, validate_record, write_manifest)
from .errors import ConfigError, DataError, MaebenchError, NumericError, SchemaError, ValidationError
from .mae import mae_from_config, pretrain_loop
from .metrics import MetricReport, classification_report, detection_report, format_value, macro_average
from .rng import seeded_rng
from .vit import unpatchify

logger = logging.getLogger("maebench")

IMAGE_SUFFIXES = (".pgm", ".png")


# -- shared helpers --------------------------------------------------------
def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    return cfg


def _threads(args, cfg: ExperimentConfig) -> int:
    return resolve_threads(getattr(args, "threads", None), cfg.run.threads)


def _required_path(value, field: str, *, must_exist: bool = True) -> Path:
    if not value:
        raise ConfigError(f"{field} is required", details=[field])
    path = Path(value)
    if must_exist and not path.exists():
        raise DataError(f"{field}: no such file: {path}", details=[field])
    return path


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = _required_path(args.out or cfg.run.out, "--out", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(value, field: str) -> Manifest:
    return parse_manifest(_required_path(value, field))


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _augment_dict(aug: AugmentConfig) -> dict:
    out = dataclasses.asdict(aug)
    out["crop_scale"] = list(aug.crop_scale)
    out["crop_ratio"] = list(aug.crop_ratio)
    return out


def _stored_augment(ckpt) -> AugmentConfig:
    raw = dict(ckpt.config.get("augment") or {})
    for key in ("crop_scale", "crop_ratio"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return AugmentConfig(**raw) if raw else AugmentConfig(resize_side=64, out_side=32)


def _label_array(manifest: Manifest) -> np.ndarray:
    values, known = manifest.label_matrix()
    return np.where(known, values, np.nan)


def _model_boxes(manifest: Manifest, side: int) -> list:
    """Ground-truth boxes rescaled from original pixels to the ``side`` x ``side`` model input."""
    out = []
    for r in manifest.records:
        w, h = r.width, r.height
        if w is None or h is None:
            h, w = load_image(manifest.image_path(r)).shape
        sx, sy = side / w, side / h
        out.append([(b.class_id, b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy) for b in r.boxes])
    return out


def _select_split(manifest: Manifest, split: Optional[str]) -> Manifest:
    if not split or split == "all":
        return manifest
    sub = manifest.split(split)
    if not sub.records:
        raise DataError(f"manifest has no records in split {split!r}", details=["--split"])
    return sub


# -- ingest ------------------------------------------------------------------
def _read_label_csv(path: Path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip().lower() != "image":
        raise ValidationError(f"{path}: first header column must be 'image'", details=["--labels"])
    header = [h.strip() for h in rows[0]]
    split_col = header.index("split") if "split" in header else None
    class_cols = [i for i in range(1, len(header)) if i != split_col]
    classes = [header[i] for i in class_cols]
    table = {}
    for n, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"{path}: line {n} has {len(row)} fields, expected {len(header)}")
        labels = []
        for i in class_cols:
            cell = row[i].strip()
            if cell in ("", "/"):
                labels.append(None)
            elif cell in ("0", "1"):
                labels.append(int(cell))
            else:
                raise ValidationError(f"{path}: line {n}: invalid label {cell!r} for {header[i]!r}")
        split = row[split_col].strip() if split_col is not None else "train"
        table[row[0].strip()] = (tuple(labels), split or "train")
    return classes, table


def _read_box_csv(path: Path, classes: list) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"image", "class", "x_min", "y_min", "x_max", "y_max"}
        if not reader.fieldnames or not need <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain {sorted(need)}", details=["--boxes"])
        for n, row in enumerate(reader, start=2):
            name = row["class"].strip()
            if name in classes:
                k = classes.index(name)
            elif name.isdigit() and int(name) < len(classes):
                k = int(name)
            else:
                raise ValidationError(f"{path}: line {n}: unknown class {name!r}")
            try:
                coords = [float(row[c]) for c in ("x_min", "y_min", "x_max", "y_max")]
            except ValueError:
                raise ValidationError(f"{path}: line {n}: non-numeric box coordinate") from None
            out.setdefault(row["image"].strip(), []).append(Box(k, *coords))
    return out


def cmd_ingest(args) -> int:
    src = _required_path(args.dir, "--dir")
    out = _required_path(args.out, "--out", must_exist=False)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.labels:
        classes, table = _read_label_csv(_required_path(args.labels, "--labels"))
        names = list(table)
    else:
        classes, table = [], {}
        names = sorted(str(p.relative_to(src)) for p in src.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    boxes = _read_box_csv(_required_path(args.boxes, "--boxes"), classes) if args.boxes else {}
    unknown = sorted(set(boxes) - set(names))
    if unknown:
        raise ValidationError("box rows for images without a label row", details=unknown[:20])

    crop_dir = out.parent / (out.stem + "_images")
    records, images = [], []
    seen = set()
    for name in names:
        img = load_image(src / name)
        rid = str(Path(name).with_suffix(""))
        if rid in seen:
            raise ValidationError(f"duplicate image id {rid!r}")
        seen.add(rid)
        image_boxes = boxes.get(name, [])
        path = (src / name).resolve()
        if args.chest_crop:
            top, left, bottom, right = chest_region(img)
            img = img[top:bottom, left:right]
            kept = []
            for b in image_boxes:
                nb = Box(b.class_id, max(b.x_min - left, 0.0), max(b.y_min - top, 0.0),
                         min(b.x_max - left, float(img.shape[1])), min(b.y_max - top, float(img.shape[0])))
                if nb.x_min < nb.x_max and nb.y_min < nb.y_max:
                    kept.append(nb)
                else:
                    logger.warning("%s: box %s lies outside the chest crop; dropped", rid, b)
            image_boxes = kept
            path = crop_dir / f"{rid}.pgm"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_pgm(path, img, maxval=65535)
        labels, split = table.get(name, ((), "train"))
        record = SampleRecord(rid, os.path.relpath(path, out.parent.resolve()), labels, tuple(image_boxes),
                              split, int(img.shape[1]), int(img.shape[0]))
        validate_record(record, len(classes))
        records.append(record)
        images.append(img)
    if images:
        mean, std = image_stats(images)
    else:
        mean, std = 0.5, 0.25
    manifest = Manifest(classes, records, mean, std, out.parent, args.name or out.stem)
    write_manifest(out, manifest)
    _emit({"manifest": str(out), "records": len(records), "classes": classes,
           "mean": mean, "std": std})
    return 0


# -- pretrain ------------------------------------------------------------------
def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.pretrain.epochs = args.epochs
        cfg.pretrain.warmup_epochs = min(cfg.pretrain.warmup_epochs, args.epochs)
    cfg.pretrain.validate()
    threads = _threads(args, cfg)
    manifest = _manifest(args.data or cfg.data.manifest, "--data")
    out = _out_dir(args, cfg)
    cfg.data.manifest = str(Path(args.data or cfg.data.manifest))
    aug = cfg.augment_config(manifest.mean, manifest.std)
    dataset = ImageDataset(manifest, aug.resize_side)
    if cfg.augment.enabled:
        transform = lambda img, rng: train_transform(img, aug, rng)  # noqa: E731
    else:
        transform = lambda img, rng: eval_transform(img, aug)  # noqa: E731
    write_run_record(out, "pretrain", cfg, {"manifest": cfg.data.manifest}, threads)
    model = _new_mae(cfg)
    result = pretrain_loop(dataset, model, cfg.pretrain, transform=transform, out_dir=out,
                           threads=threads, extra_config={"augment": _augment_dict(aug)})
    _emit({"out": str(out), "epochs": len(result.epoch_losses), "best_epoch": result.best_epoch,
           "first_loss": result.epoch_losses[0], "last_loss": result.epoch_losses[-1]})
    return 0


def _new_mae(cfg: ExperimentConfig):
    return mae_from_config({"encoder": cfg.encoder.to_dict(), "decoder": cfg.decoder.to_dict()},
                           seed=cfg.run.seed)


# -- finetune ------------------------------------------------------------------
def _finetune_data(manifest: Manifest, task: str, side: int, resize_side: int) -> FinetuneData:
    images = ImageDataset(manifest, resize_side)
    if task == "localization":
        return FinetuneData(images, boxes=_model_boxes(manifest, side))
    labels = _label_array(manifest)
    if task == "multiclass":
        bad = [r.id for r, row in zip(manifest.records, labels) if np.isnan(row).any() or row.sum() != 1]
        if bad:
            raise ValidationError("multiclass records need exactly one positive label", details=bad[:20])
    return FinetuneData(images, labels=labels)


def cmd_finetune(args) -> int:
    cfg = _config(args)
    ft = cfg.finetune
    if args.task:
        ft.task = args.task
    if args.shots is not None:
        ft.shots = args.shots
    elif ft.task == "localization" and ft.shots is None:
        ft.shots = 50
    if args.epochs is not None:
        ft.epochs = args.epochs
        ft.warmup_epochs = min(ft.warmup_epochs, args.epochs)
    threads = _threads(args, cfg)
    enc_path = _required_path(args.encoder, "--encoder")
    if args.train or args.val:
        train_m = _manifest(args.train or cfg.data.train, "--train")
        val_m = _manifest(args.val or cfg.data.val, "--val")
        inputs = {"train": args.train or cfg.data.train, "val": args.val or cfg.data.val}
    else:
        source = args.data or cfg.data.manifest or cfg.data.train
        full = _manifest(source, "--data")
        train_m, val_m = full.split("train"), full.split("val")
        inputs = {"manifest": source}
        if not val_m.records:
            raise DataError("manifest has no 'val' records; pass --val", details=["--val"])
    if train_m.classes != val_m.classes:
        raise SchemaError("train and val manifests have different class lists",
                          details=[f"train: {train_m.classes}", f"val: {val_m.classes}"])
    ft.num_classes = len(train_m.classes)
    if ft.task == "binary" and ft.num_classes != 1:
        raise ConfigError(f"binary task needs exactly one class column, got {ft.num_classes}",
                          details=["finetune.task"])
    ft.validate()
    out = _out_dir(args, cfg)
    inputs["encoder"] = str(enc_path)
    write_run_record(out, "finetune", cfg, inputs, threads)

    ckpt = load_checkpoint(enc_path)
    model, loaded, fresh = model_from_pretrained(ckpt, ft, seed=ft.seed)
    logger.info("loaded %d encoder tensors; %d head tensors initialised fresh", len(loaded), len(fresh))
    side = model.encoder.config.image_side
    aug = cfg.augment.resolve(side, train_m.mean, train_m.std)
    train = _finetune_data(train_m, ft.task, side, aug.resize_side)
    val = _finetune_data(val_m, ft.task, side, aug.resize_side)
    evaluate_tf = lambda img: eval_transform(img, aug)  # noqa: E731
    train_tf = None
    if ft.augment and ft.task != "localization":
        train_tf = lambda img, rng: train_transform(img, aug, rng)  # noqa: E731
    result = finetune_loop(train, val, model, ft, train_m.classes, out_dir=out, transform=train_tf,
                           eval_transform=evaluate_tf, threads=threads,
                           extra_config={"augment": _augment_dict(aug)})
    _emit({"out": str(out), "best_epoch": result.best_epoch, "best_metric": result.best_metric,
           "metric": result.history[-1]["metric_name"], "epochs": len(result.history)})
    return 0


# -- evaluate ------------------------------------------------------------------
def cmd_evaluate(args) -> int:
    cfg = _config(args)
    threads = _threads(args, cfg)
    ckpt_path = _required_path(args.checkpoint, "--checkpoint")
    source = args.data or cfg.data.test or cfg.data.manifest
    manifest = _select_split(_manifest(source, "--data"), args.split)
    if not manifest.records:
        raise DataError("manifest has no records to evaluate", details=["--data"])
    ckpt = load_checkpoint(ckpt_path)
    model, ft, classes = model_from_finetune(ckpt)
    if classes != manifest.classes:
        raise SchemaError("checkpoint and manifest class lists differ",
                          details=[f"checkpoint: {classes}", f"manifest: {manifest.classes}"])
    out = _out_dir(args, cfg)
    write_run_record(out, "evaluate", cfg, {"checkpoint": ckpt_path, "manifest": source}, threads)
    aug = _stored_augment(ckpt)
    side = model.encoder.config.image_side
    images = ImageDataset(manifest, aug.resize_side)
    tf = lambda img: eval_transform(img, aug)  # noqa: E731
    name = manifest.name or Path(source).stem
    seed = cfg.run.seed
    if ft.task == "localization":
        preds = predict_detections(model, images, ft, tf, threads=threads)
        gts = _model_boxes(manifest, side)
        p, g = detections_and_truth(preds, gts)
        report = detection_report(p, g, classes, dataset=name, seed=seed, n_images=len(images))
        with open(out / "predictions.jsonl", "w") as fh:
            for r, dets in zip(manifest.records, preds):
                w, h = r.width, r.height
                if w is None or h is None:
                    h, w = load_image(manifest.image_path(r)).shape
                sx, sy = w / side, h / side
                for box, k, score in dets:
                    fh.write(json.dumps({"id": r.id, "class": classes[k], "score": score,
                                         "box": [box[0] * sx, box[1] * sy, box[2] * sx, box[3] * sy]}) + "\n")
    else:
        scores = predict_scores(model, images, tf, threads=threads)
        report = classification_report(scores, _label_array(manifest), classes, threshold=args.threshold,
                                       n_bootstrap=args.bootstrap, level=args.level, seed=seed,
                                       dataset=name, task=ft.task)
    (out / "report.json").write_text(report.dumps() + "\n")
    print(report.dumps())
    return 0


# -- reconstruct ---------------------------------------------------------------
def reconstruct_image(ckpt, image: np.ndarray, mask_ratio: float, seed: int) -> dict:
    """Original / masked / reconstruction views of ``image`` at its own size.

    Masked regions are filled with mid-gray; the reconstruction pastes the
    decoder's predictions for masked patches over the visible original. When
    the model was trained on per-patch normalised targets the predictions
    are mapped back with each target patch's own mean and spread.
    """
    ckpt.require_kind("pretrain")
    model = mae_from_config(ckpt.config["model"])
    model.load_state_dict(ckpt.params, strict=True)
    aug = _stored_augment(ckpt)
    enc = model.encoder.config
    side, p = enc.image_side, enc.patch_side
    small = np.clip(resize_cubic(image, side), 0.0, 1.0)
    x = normalize(small, aug.mean, aug.std)[None, None].astype(np.float32)
    with T.no_grad():
        _, pred, plan, patches = model.forward(x, mask_ratio, seeded_rng(seed, 4),
                                               ckpt.config["pretrain"].get("normalize_targets", True))
    pred = pred.data.astype(np.float64)[0]
    target = patches.astype(np.float64)[0]
    if ckpt.config["pretrain"].get("normalize_targets", True):
        mean = target.mean(axis=-1, keepdims=True)
        std = np.sqrt(target.var(axis=-1, keepdims=True) + 1e-6)
        pred = pred * std + mean
    mask = plan.mask[0].astype(bool)
    composite = np.where(mask[:, None], pred, target)
    recon_small = np.clip(denormalize(unpatchify(composite, p, side, side)[0], aug.mean, aug.std), 0.0, 1.0)
    pixel_mask = unpatchify(np.repeat(mask[:, None], p * p, axis=1).astype(np.float64), p, side, side)[0] > 0.5

    visible = small[~pixel_mask]
    gray = float(visible.mean()) if visible.size else 0.5
    masked_mse = float(np.mean((recon_small - small)[pixel_mask] ** 2)) if pixel_mask.any() else 0.0
    baseline_mse = float(np.mean((gray - small[pixel_mask]) ** 2)) if pixel_mask.any() else 0.0

    h, w = image.shape
    rows = np.minimum(((np.arange(h) + 0.5) * side / h).astype(int), side - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * side / w).astype(int), side - 1)
    big_mask = pixel_mask[np.ix_(rows, cols)]
    masked = np.where(big_mask, 0.5, image)
    recon = np.where(big_mask, np.clip(resize_cubic(recon_small, (h, w)), 0.0, 1.0), image)
    return {"original": image, "masked": masked, "reconstruction": recon,
            "masked_patches": int(mask.sum()), "num_patches": int(mask.size),
            "masked_mse": masked_mse, "mean_gray_mse": baseline_mse}


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    ckpt_path = _required_path(args.checkpoint or args.encoder, "--checkpoint")
    image_path = _required_path(args.image, "--image")
    if not 0.0 <= args.mask_ratio < 1.0:
        raise ConfigError(f"--mask-ratio must lie in [0, 1), got {args.mask_ratio}", details=["--mask-ratio"])
    out = _out_dir(args, cfg)
    ckpt = load_checkpoint(ckpt_path)
    ckpt.require_kind("pretrain")
    views = reconstruct_image(ckpt, load_image(image_path), args.mask_ratio, cfg.run.seed)
    for key in ("original", "masked", "reconstruction"):
        save_pgm(out / f"{key}.pgm", views[key], maxval=65535)
    summary = {k: v for k, v in views.items() if not isinstance(v, np.ndarray)}
    summary.update(mask_ratio=args.mask_ratio, seed=cfg.run.seed)
    (out / "reconstruct.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_run_record(out, "reconstruct", cfg, {"checkpoint": ckpt_path, "image": image_path}, 1)
    _emit(summary)
    return 0


# -- report --------------------------------------------------------------------
def render_report(reports: list, metric: str, fmt: str = "text", scale: float = 100.0, digits: int = 1,
                  names: Optional[list] = None) -> str:
    """Rows = datasets, columns = classes + Mean; absent cells are "/"; means recomputed."""
    if not reports:
        raise DataError("no reports to render")
    classes = reports[0].classes
    for r in reports[1:]:
        if r.classes != classes:
            raise SchemaError("reports have different class lists",
                              details=[f"{reports[0].dataset}: {classes}", f"{r.dataset}: {r.classes}"])
    header = ["Dataset", *classes, "Mean"]
    rows = []
    for i, r in enumerate(reports):
        values = [r.per_class.get(c, {}).get(metric) for c in classes]
        try:
            mean = macro_average(values)
        except MaebenchError:
            mean = None
        label = (names[i] if names else None) or r.dataset or f"report{i + 1}"
        rows.append([label, *(format_value(v, digits, scale) for v in values),
                     format_value(mean, digits, scale)])
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    widths = [max(len(str(row[j])) for row in [header, *rows]) for j in range(len(header))]
    lines = ["  ".join(str(c).rjust(w) if j else str(c).ljust(w) for j, (c, w) in enumerate(zip(row, widths)))
             for row in [header, *rows]]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    reports, names = [], []
    for p in args.inputs:
        path = _required_path(p, "inputs")
        try:
            reports.append(MetricReport.from_json(json.loads(path.read_text())))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: not a metric report ({exc})", details=[str(path)]) from None
        names.append(reports[-1].dataset or path.stem)
    metric = args.metric or ("ap50" if reports[0].task == "localization" else "auc")
    text = render_report(reports, metric, args.format, args.scale, args.digits, names)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# -- synth ---------------------------------------------------------------------
def cmd_synth(args) -> int:
    from . import synthetic

    out = _required_path(args.out, "--out", must_exist=False)
    (out / "images").mkdir(parents=True, exist_ok=True)
    split = lambda i: "val" if i % 4 == 3 else "train"  # noqa: E731
    if args.kind == "phantom":
        images = synthetic.structured_images(args.n, args.side, args.seed)
        rows = [[f"img{i:04d}.pgm", split(i)] for i in range(args.n)]
        header = ["image", "split"]
        boxes = []
    elif args.kind == "quadrant":
        images, y = synthetic.quadrant_images(args.n, args.side, args.seed)
        rows = [[f"img{i:04d}.pgm", str(int(y[i])), split(i)] for i in range(args.n)]
        header = ["image", "positive", "split"]
        boxes = []
    else:
        images, per_image = synthetic.box_images(args.n, args.side, 2, args.seed)
        rows = [[f"img{i:04d}.pgm", *(str(int(any(b[0] == k for b in per_image[i]))) for k in range(2)),
                 split(i)] for i in range(args.n)]
        header = ["image", "bright", "brighter", "split"]
        boxes = [[f"img{i:04d}.pgm", header[1 + b[0]], *b[1:]] for i in range(args.n) for b in per_image[i]]
    for i, img in enumerate(images):
        save_pgm(out / "images" / f"img{i:04d}.pgm", img, maxval=65535)
    with open(out / "labels.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([header, *rows])
    if boxes:
        with open(out / "boxes.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([["image", "class", "x_min", "y_min", "x_max", "y_max"], *boxes])
    _emit({"out": str(out), "images": len(images), "kind": args.kind})
    return 0


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maebench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int, help="overrides [run] seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (fallback: $MAEBENCH_THREADS)")
        if data:
            p.add_argument("--data", help="dataset manifest (JSONL)")
        return p

    p = sub.add_parser("ingest", help="build a manifest from an image directory")
    p.add_argument("--dir", required=True, help="image directory")
    p.add_argument("--labels", help="CSV: image,<class...>[,split]; 1/0, '/' or blank = unannotated")
    p.add_argument("--boxes", help="CSV: image,class,x_min,y_min,x_max,y_max")
    p.add_argument("--out", required=True, help="manifest path to write")
    p.add_argument("--name", help="dataset name stored in the header")
    p.add_argument("--chest-crop", action="store_true", help="crop each image to its Otsu foreground region")
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("pretrain", help="masked-autoencoder pretraining"))
    p.add_argument("--epochs", type=int, help="overrides [pretrain] epochs")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("finetune", help="adapt a pretrained encoder to a labelled task"))
    p.add_argument("--task", choices=("binary", "multiclass", "multilabel", "localization"))
    p.add_argument("--encoder", help="pretraining checkpoint")
    p.add_argument("--train", help="training manifest")
    p.add_argument("--val", help="validation manifest")
    p.add_argument("--shots", type=int, help="per-class cap on training samples")
    p.add_argument("--epochs", type=int, help="overrides [finetune] epochs")
    p.set_defaults(func=cmd_finetune)

    p = common(sub.add_parser("evaluate", help="score a fine-tuned checkpoint, write report.json"))
    p.add_argument("--checkpoint", help="fine-tuning checkpoint")
    p.add_argument("--split", help="only evaluate records of this split")
    p.add_argument("--threshold", type=float, default=0.5, help="decision threshold for F1/ACC")
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for the macro-AUROC CI")
    p.add_argument("--level", type=float, default=0.95, help="CI level")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("reconstruct", help="write original/masked/reconstruction images"), data=False)
    p.add_argument("--checkpoint", help="pretraining checkpoint")
    p.add_argument("--encoder", help="alias of --checkpoint")
    p.add_argument("--image", required=True, help="input image (PGM or PNG)")
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="tabulate metric reports (rows = datasets, columns = classes)")
    p.add_argument("inputs", nargs="+", help="report.json files")
    p.add_argument("--metric", choices=("auc", "aupr", "f1", "acc", "ap50"))
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--scale", type=float, default=100.0, help="multiply values before display")
    p.add_argument("--digits", type=int, default=1)
    p.add_argument("--out", help="also write the table here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic image set with labels.csv")
    p.add_argument("--kind", choices=("phantom", "quadrant", "boxes"), default="phantom")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except MaebenchError as exc:
        err = exc.to_json()
        code = exc.exit_code
    except OSError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "details": []}
        code = DataError.exit_code
    except FloatingPointError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "details": []}
        code = NumericError.exit_code
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
