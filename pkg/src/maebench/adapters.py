"""Downstream adaptation of a pretrained encoder.

Classification reuses the encoder (all patches visible) and feeds its
pooled feature to a two-layer MLP. Localization attaches a single-scale,
anchor-free head to the patch tokens. Fine-tuning keeps the epoch with the
best validation metric (macro AUROC, or macro AP50 for localization).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, LoadError
from .mae import lr_schedule
from .metrics import (Detection, GroundTruth, UndefinedMetricError, ap50, auroc,
                      macro_average)
from .nn import Linear, Module, no_decay_names
from .optim import AdamW
from .rng import seeded_rng
from .tensor import Tensor
from .vit import ViTConfig, ViTEncoder

logger = logging.getLogger(__name__)

TASKS = ("binary", "multiclass", "multilabel", "localization")
POOLS = (None, "cls", "mean")


@dataclass
class FinetuneConfig:
    task: str = "multilabel"
    num_classes: int = 1
    label_smoothing: float = 0.1
    batch_size: int = 16
    epochs: int = 50
    warmup_epochs: int = 10
    peak_lr: float = 1e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    freeze_encoder: bool = False
    shots: Optional[int] = None
    head_hidden: int = 0  # 0 -> encoder width
    pool: Optional[str] = None  # None -> class token if the encoder has one, else mean
    zero_init_head: bool = False
    augment: bool = False
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    seed: int = 0

    def problems(self) -> list:
        out = []
        if self.task not in TASKS:
            out.append(f"task must be one of {TASKS}, got {self.task!r}")
        if self.num_classes < 1:
            out.append("num_classes must be >= 1")
        if self.task == "multiclass" and self.num_classes < 2:
            out.append("multiclass needs num_classes >= 2")
        if not 0 <= self.label_smoothing < 1:
            out.append(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.shots is not None and self.shots < 1:
            out.append("shots must be >= 1 when set")
        if self.pool not in POOLS:
            out.append(f"pool must be 'cls', 'mean' or unset, got {self.pool!r}")
        if self.batch_size < 1 or self.epochs < 1:
            out.append("batch_size and epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            out.append("warmup_epochs must lie in [0, epochs]")
        if self.peak_lr < 0 or self.min_lr < 0:
            out.append("learning rates must be >= 0")
        return out

    def validate(self) -> "FinetuneConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid fine-tuning configuration", details=problems)
        return self


def desk_finetune_config(**overrides) -> FinetuneConfig:
    """Desk-scale fine-tuning used by the smoke runs (10 epochs, short warmup)."""
    base = dict(epochs=10, warmup_epochs=1, peak_lr=3e-4, min_lr=1e-6)
    base.update(overrides)
    return FinetuneConfig(**base)


# -- heads ---------------------------------------------------------------
class MlpHead(Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng, zero_init: bool = False):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng, std=0.0 if zero_init else 0.02)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Classifier(Module):
    def __init__(self, encoder_config: ViTConfig, config: FinetuneConfig, seed: int = 0):
        rng = seeded_rng(seed)
        self.encoder = ViTEncoder(encoder_config, rng)
        d = encoder_config.embed_dim
        head_rng = seeded_rng(seed, 7)
        self.head = MlpHead(d, config.head_hidden or d, config.num_classes, head_rng,
                            config.zero_init_head)
        self.task = config.task
        if config.pool == "cls" and not encoder_config.class_token:
            raise ConfigError("pool = cls needs an encoder with a class token")
        self.pool = config.pool

    def forward(self, images) -> Tensor:
        return classifier_forward(images, self.encoder, self.head, self.pool)

    def probabilities(self, logits: np.ndarray) -> np.ndarray:
        if self.task == "multiclass":
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-logits))


def classifier_forward(images, encoder: ViTEncoder, head: MlpHead, pool: Optional[str] = None) -> Tensor:
    feats = encoder.features(images, pool)
    if feats.shape[-1] != head.fc1.in_features:
        raise ConfigError(f"head expects {head.fc1.in_features} features, encoder gives {feats.shape[-1]}")
    return head(feats)


def predict_class(probabilities) -> int:
    """Index of the largest probability; ties go to the lowest index."""
    p = np.asarray(probabilities).reshape(-1)
    if p.size == 0:
        raise ContractError("cannot predict a class from an empty probability vector")
    return int(np.argmax(p))


# -- losses --------------------------------------------------------------
def smoothed_targets(target, num_classes: int, eps: float, task: str) -> np.ndarray:
    """Soft targets: ``(1-eps)*onehot + eps/K`` (multiclass) or ``(1-eps)*y + eps/2``."""
    if not 0 <= eps < 1:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {eps}")
    if task == "multiclass":
        idx = np.asarray(target, dtype=np.int64).reshape(-1)
        onehot = np.zeros((idx.size, num_classes))
        onehot[np.arange(idx.size), idx] = 1.0
        return (1.0 - eps) * onehot + eps / num_classes
    y = np.asarray(target, dtype=np.float64)
    return (1.0 - eps) * y + eps / 2.0


def smoothed_loss(logits: Tensor, target, eps: float, task: str) -> Tensor:
    """Label-smoothed cross-entropy.

    ``target`` is a class-index vector for ``multiclass`` and a ``[b, k]``
    0/1 matrix otherwise, where NaN marks an unannotated entry that is
    excluded from the loss.
    """
    k = logits.shape[-1]
    soft = smoothed_targets(target, k, eps, task)
    if task == "multiclass":
        logp = T.log_softmax(logits, axis=-1)
        return T.tsum(logp * Tensor(soft.astype(logits.dtype))) * (-1.0 / logits.shape[0])
    soft = soft.reshape(logits.shape)
    known = ~np.isnan(soft)
    n = int(known.sum())
    if n == 0:
        return T.tsum(logits * 0.0)
    y = np.where(known, soft, 0.0).astype(logits.dtype)
    per = T.softplus(logits) - logits * Tensor(y)
    return T.tsum(per * Tensor(known.astype(logits.dtype))) * (1.0 / n)


# -- localization --------------------------------------------------------
class LocalizationModel(Module):
    """Per-cell objectness, box regression (centre offset, log size) and class logits."""

    def __init__(self, encoder_config: ViTConfig, config: FinetuneConfig, seed: int = 0):
        rng = seeded_rng(seed)
        self.encoder = ViTEncoder(encoder_config, rng)
        self.det_head = Linear(encoder_config.embed_dim, 5 + config.num_classes, seeded_rng(seed, 7),
                               std=0.0 if config.zero_init_head else 0.02)
        self.task = "localization"

    def forward(self, images) -> Tensor:
        tokens = self.encoder.forward(images)
        pre = self.encoder.prefix_tokens
        return self.det_head(tokens[:, pre:, :] if pre else tokens)


def decode_cells(outputs: np.ndarray, grid_side: int, patch_side: int, score_threshold: float,
                 nms_iou: float = 0.5) -> list:
    """Turn ``[n_cells, 5 + K]`` head outputs into NMS-filtered ``(box, class, score)`` tuples.

    Cell ``(r, c)`` with offsets ``(dx, dy)`` and log sizes ``(lw, lh)`` decodes to
    centre ``((c + 0.5 + dx) p, (r + 0.5 + dy) p)`` and size ``(p e^lw, p e^lh)``.
    """
    out = np.asarray(outputs, dtype=np.float64)
    p = float(patch_side)
    obj = 1.0 / (1.0 + np.exp(-out[:, 0]))
    cls_logits = out[:, 5:]
    z = np.exp(cls_logits - cls_logits.max(axis=1, keepdims=True))
    cls_prob = z / z.sum(axis=1, keepdims=True)
    cls = np.argmax(cls_prob, axis=1)
    score = obj * cls_prob[np.arange(len(out)), cls]
    rows, cols = np.divmod(np.arange(len(out)), grid_side)
    cx = (cols + 0.5 + out[:, 1]) * p
    cy = (rows + 0.5 + out[:, 2]) * p
    w = p * np.exp(np.clip(out[:, 3], -10, 10))
    h = p * np.exp(np.clip(out[:, 4], -10, 10))
    side = grid_side * p
    boxes = np.stack([np.clip(cx - w / 2, 0, side), np.clip(cy - h / 2, 0, side),
                      np.clip(cx + w / 2, 0, side), np.clip(cy + h / 2, 0, side)], axis=1)
    valid = (score >= score_threshold) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    results = []
    for k in np.unique(cls[valid]):
        idx = np.nonzero(valid & (cls == k))[0]
        for j in kernels.nms(boxes[idx], score[idx], nms_iou):
            i = idx[j]
            results.append((tuple(boxes[i]), int(k), float(score[i])))
    results.sort(key=lambda r: -r[2])
    return results


def localization_forward(images, model: LocalizationModel, score_threshold: float,
                         nms_iou: float = 0.5) -> list:
    with T.no_grad():
        out = model.forward(images).data
    cfg = model.encoder.config
    return [decode_cells(o, cfg.grid_side, cfg.patch_side, score_threshold, nms_iou) for o in out]


def localization_targets(boxes_per_image: Sequence, grid_side: int, patch_side: int, num_classes: int):
    """Assign each box to the cell holding its centre: ``(obj, reg, cls, pos_mask)``."""
    b = len(boxes_per_image)
    n = grid_side * grid_side
    obj = np.zeros((b, n))
    reg = np.zeros((b, n, 4))
    cls = np.zeros((b, n), dtype=np.int64)
    p = float(patch_side)
    for i, boxes in enumerate(boxes_per_image):
        for class_id, x0, y0, x1, y1 in boxes:
            cx, cy = (x0 + x1) / 2 / p, (y0 + y1) / 2 / p
            c = min(int(cx), grid_side - 1)
            r = min(int(cy), grid_side - 1)
            cell = r * grid_side + c
            obj[i, cell] = 1.0
            reg[i, cell] = (cx - c - 0.5, cy - r - 0.5, math.log((x1 - x0) / p), math.log((y1 - y0) / p))
            cls[i, cell] = class_id
    return obj, reg, cls, obj > 0


def localization_loss(outputs: Tensor, boxes_per_image, config: FinetuneConfig, grid_side: int,
                      patch_side: int) -> Tensor:
    k = outputs.shape[-1] - 5
    obj, reg, cls, pos = localization_targets(boxes_per_image, grid_side, patch_side, k)
    dt = outputs.dtype
    loss = smoothed_loss(outputs[:, :, 0], obj, 0.0, "multilabel")
    if pos.any():
        idx = np.nonzero(pos)
        picked = outputs[idx]
        diff = picked[:, 1:5] - Tensor(reg[idx].astype(dt))
        loss = loss + T.mean(diff * diff) * 4.0
        if k > 1:
            loss = loss + smoothed_loss(picked[:, 5:], cls[idx], config.label_smoothing, "multiclass")
    return loss


# -- few-shot ------------------------------------------------------------
def few_shot_indices(groups: dict, shots: Optional[int], seed: int) -> dict:
    """Per-group seeded subsample of ``min(shots, available)`` indices (sorted)."""
    out = {}
    for key in sorted(groups):
        idx = np.asarray(sorted(groups[key]), dtype=np.int64)
        if shots is not None and idx.size > shots:
            rng = seeded_rng(seed, 11, int(key))
            idx = np.sort(rng.choice(idx, size=shots, replace=False))
        out[key] = idx
    return out


def label_groups(labels: np.ndarray, task: str) -> dict:
    """Training indices per class used by few-shot capping."""
    labels = np.asarray(labels, dtype=np.float64)
    if task == "multiclass":
        return {k: np.nonzero(np.nan_to_num(labels[:, k]) > 0.5)[0] for k in range(labels.shape[1])}
    if task == "binary":
        y = labels[:, 0]
        return {0: np.nonzero(y < 0.5)[0], 1: np.nonzero(y > 0.5)[0]}
    return {k: np.nonzero(labels[:, k] > 0.5)[0] for k in range(labels.shape[1])}


# -- fine-tuning ---------------------------------------------------------
@dataclass
class FinetuneData:
    """Images plus targets: a ``[n, K]`` label matrix (NaN = unannotated) or per-image boxes."""

    images: Sequence
    labels: Optional[np.ndarray] = None
    boxes: Optional[list] = None

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "FinetuneData":
        idx = [int(i) for i in idx]
        return FinetuneData(
            _Subset(self.images, idx),
            None if self.labels is None else self.labels[idx],
            None if self.boxes is None else [self.boxes[i] for i in idx],
        )


class _Subset:
    def __init__(self, base, idx):
        self.base, self.idx = base, idx

    def __len__(self):
        return len(self.idx)

    def __getitem__(self, i):
        return self.base[self.idx[i]]


@dataclass
class FinetuneResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: Optional[float] = None
    best: Optional[Checkpoint] = None


def build_model(encoder_config: ViTConfig, config: FinetuneConfig, seed: int = 0) -> Module:
    if config.task == "localization":
        return LocalizationModel(encoder_config, config, seed)
    return Classifier(encoder_config, config, seed)


def model_from_pretrained(ckpt: Checkpoint, config: FinetuneConfig, seed: int = 0):
    """Fresh downstream model whose encoder is copied from a pretraining checkpoint.

    Returns ``(model, loaded_names, fresh_names)`` in the model's namespace.
    """
    ckpt.require_kind("pretrain")
    enc_cfg = ViTConfig(**ckpt.config["model"]["encoder"])
    model = build_model(enc_cfg, config, seed)
    enc = {k[len("encoder."):]: v for k, v in ckpt.params.items() if k.startswith("encoder.")}
    model.encoder.load_state_dict(enc, strict=True)
    names = set(model.named_parameters())
    loaded = {f"encoder.{k}" for k in enc}
    return model, loaded, names - loaded


def finetune_checkpoint(model: Module, config: FinetuneConfig, classes: Sequence[str], meta: dict,
                        extra: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(
        kind="finetune",
        config={"model": {"encoder": model.encoder.config.to_dict()}, "finetune": asdict(config),
                "classes": list(classes), **(extra or {})},
        params={k: v.copy() for k, v in model.state_dict().items()},
        meta=dict(meta),
    )


def model_from_finetune(ckpt: Checkpoint) -> tuple:
    """``(model, FinetuneConfig, classes)`` restored from a fine-tuning checkpoint."""
    ckpt.require_kind("finetune")
    config = FinetuneConfig(**ckpt.config["finetune"])
    model = build_model(ViTConfig(**ckpt.config["model"]["encoder"]), config, config.seed)
    model.load_state_dict(ckpt.params, strict=True)
    if config.freeze_encoder:
        model.encoder.freeze()
    return model, config, list(ckpt.config["classes"])


def _deterministic(transform):
    return None if transform is None else (lambda img, rng: transform(img))


def predict_scores(model: Module, images: Sequence, transform=None, batch_size: int = 64,
                   threads: int = 1) -> np.ndarray:
    """Class probabilities ``[n, K]``; ``transform(image)`` is the deterministic eval path."""
    from .data import batch_iterator

    out = []
    with T.no_grad():
        for _, batch in batch_iterator(images, batch_size, 0, shuffle=False,
                                       transform=_deterministic(transform), threads=threads):
            out.append(model.probabilities(model.forward(batch).data.astype(np.float64)))
    return np.concatenate(out, axis=0)


def predict_detections(model: LocalizationModel, images: Sequence, config: FinetuneConfig,
                       transform=None, batch_size: int = 64, threads: int = 1) -> list:
    from .data import batch_iterator

    out = []
    for _, batch in batch_iterator(images, batch_size, 0, shuffle=False,
                                   transform=_deterministic(transform), threads=threads):
        out.extend(localization_forward(batch, model, config.score_threshold, config.nms_iou))
    return out


def detections_and_truth(per_image_preds: list, per_image_boxes: list) -> tuple:
    preds = [Detection(i, box, k, s) for i, dets in enumerate(per_image_preds) for box, k, s in dets]
    gts = [GroundTruth(i, tuple(b[1:5]), int(b[0])) for i, boxes in enumerate(per_image_boxes) for b in boxes]
    return preds, gts


def validation_metric(model: Module, data: FinetuneData, config: FinetuneConfig,
                      transform=None, threads: int = 1) -> Optional[float]:
    """Macro AUROC (classification) or macro AP50 (localization); ``None`` if undefined."""
    try:
        if config.task == "localization":
            preds, gts = detections_and_truth(predict_detections(model, data.images, config, transform,
                                                                   threads=threads), data.boxes)
            values = []
            for k in range(config.num_classes):
                try:
                    values.append(ap50(preds, gts, k))
                except UndefinedMetricError:
                    values.append(None)
            return macro_average(values)
        scores = predict_scores(model, data.images, transform, threads=threads)
        values = []
        for k in range(scores.shape[1]):
            try:
                values.append(auroc(scores[:, k], data.labels[:, k]))
            except UndefinedMetricError:
                values.append(None)
        return macro_average(values)
    except UndefinedMetricError:
        return None


def _train_targets(data: FinetuneData, idx, task: str):
    if task == "localization":
        return [data.boxes[int(i)] for i in idx]
    y = data.labels[idx]
    if task == "multiclass":
        return np.argmax(np.nan_to_num(y), axis=1)
    return y


def finetune_loop(train: FinetuneData, val: FinetuneData, model: Module, config: FinetuneConfig,
                  classes: Sequence[str], out_dir=None, transform=None, eval_transform=None,
                  threads: int = 1, extra_config: Optional[dict] = None) -> FinetuneResult:
    """Train for ``config.epochs`` epochs, keeping the best-validation checkpoint.

    ``transform(image, rng)`` is the training-time path and ``eval_transform(image)``
    the deterministic one used for validation (and for training when
    ``transform`` is None). Ties in the validation metric go to the earlier epoch.
    """
    from .data import batch_iterator

    config.validate()
    if len(val) == 0:
        raise ConfigError("validation set is empty")
    if len(train) == 0:
        raise ConfigError("training set is empty")
    if config.shots is not None:
        groups = (label_groups(train.labels, config.task) if config.task != "localization"
                  else {k: [i for i, bx in enumerate(train.boxes) if any(b[0] == k for b in bx)]
                        for k in range(config.num_classes)})
        picked = few_shot_indices(groups, config.shots, config.seed)
        train = train.subset(np.concatenate([picked[k] for k in sorted(picked)]))
        logger.info("few-shot subsample: %d training samples", len(train))
    if config.freeze_encoder:
        model.encoder.freeze()
    named = model.trainable_parameters()
    opt = AdamW(named, lr=0.0, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay,
                no_decay=no_decay_names(named))
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    sched = dict(peak_lr=config.peak_lr, min_lr=config.min_lr,
                 warmup_steps=config.warmup_epochs * steps_per_epoch,
                 total_steps=config.epochs * steps_per_epoch)
    if transform is None:
        transform = _deterministic(eval_transform)
    enc_cfg = model.encoder.config
    result = FinetuneResult()
    best_value = -math.inf
    step = 0
    hist_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        hist_file = open(out_dir / "history.jsonl", "w")
    try:
        for epoch in range(1, config.epochs + 1):
            losses = []
            for idx, images in batch_iterator(train.images, config.batch_size, config.seed, epoch,
                                              transform=transform, threads=threads):
                target = _train_targets(train, idx, config.task)
                out = model.forward(images)
                if config.task == "localization":
                    loss = localization_loss(out, target, config, enc_cfg.grid_side, enc_cfg.patch_side)
                else:
                    loss = smoothed_loss(out, target, config.label_smoothing, config.task)
                loss.backward()
                step += 1
                opt.state.lr = lr_schedule(step, **sched)
                opt.step()
                opt.zero_grad()
                losses.append(loss.item())
            metric = validation_metric(model, val, config, eval_transform, threads)
            record = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)),
                      "metric": metric, "lr": opt.state.lr,
                      "metric_name": "ap50" if config.task == "localization" else "auroc"}
            result.history.append(record)
            if hist_file:
                hist_file.write(json.dumps(record) + "\n")
            value = -math.inf if metric is None else metric
            if result.best is None or value > best_value:
                best_value = value
                result.best_epoch = epoch
                result.best_metric = metric
                result.best = finetune_checkpoint(
                    model, config, classes,
                    {"epoch": epoch, "step": step, "metric": metric, "metric_name": record["metric_name"]},
                    extra_config,
                )
    finally:
        if hist_file:
            hist_file.close()
    if out_dir is not None:
        save_checkpoint(result.best, out_dir / "best.ckpt")
    return result
