"""Masked-autoencoder pretraining.

The encoder sees only a random subset of patch tokens. The decoder
receives the encoded visible tokens, one shared learnable mask token per
hidden patch, restores the original patch order, and regresses the pixels
of every patch. Only hidden patches contribute to the loss.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NumericError
from .nn import LayerNorm, Linear, Module, no_decay_names
from .optim import AdamW
from .rng import seeded_rng, truncated_normal
from .tensor import Tensor
from .vit import Block, PRESETS, ViTConfig, ViTEncoder, patchify, sincos_pos_embed

logger = logging.getLogger(__name__)


@dataclass
class MaskPlan:
    """Per-sample shuffle bookkeeping; arrays are ``[b, n]``."""

    ids_shuffle: np.ndarray
    ids_restore: np.ndarray
    len_keep: int
    mask: np.ndarray  # 1 = hidden, in original patch order

    @property
    def num_patches(self) -> int:
        return self.ids_shuffle.shape[-1]

    @property
    def num_masked(self) -> int:
        return self.num_patches - self.len_keep


def keep_count(num_patches: int, mask_ratio: float) -> int:
    """Visible patches for a ratio, rounded half-up: 196 @ 0.75 -> 49."""
    return int(math.floor(num_patches * (1.0 - mask_ratio) + 0.5))


def make_mask_plan(batch: int, num_patches: int, mask_ratio: float, rng) -> MaskPlan:
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    len_keep = min(max(keep_count(num_patches, mask_ratio), 1), num_patches)
    ids_shuffle = np.stack([rng.permutation(num_patches) for _ in range(batch)])
    ids_restore = T.inverse_permutation(ids_shuffle)
    mask = np.ones((batch, num_patches), dtype=np.uint8)
    mask[:, :len_keep] = 0
    mask = np.take_along_axis(mask, ids_restore, axis=1)
    return MaskPlan(ids_shuffle, ids_restore, len_keep, mask)


def random_masking(tokens: Tensor, mask_ratio: float, rng) -> tuple:
    """Keep a uniformly random subset of ``round(n * (1 - ratio))`` tokens per sample.

    ``tokens`` are patch tokens only (``[b, n, d]``); any class token is
    attached afterwards and never masked.
    """
    b, n, _ = tokens.shape
    plan = make_mask_plan(b, n, mask_ratio, rng)
    visible = T.gather_rows(tokens, plan.ids_shuffle[:, : plan.len_keep])
    return visible, plan


class MAEDecoder(Module):
    def __init__(self, config: ViTConfig, encoder_dim: int, prefix_tokens: int, rng):
        self.config = config
        d = config.embed_dim
        self.prefix_tokens = prefix_tokens
        self.embed = Linear(encoder_dim, d, rng)
        self.mask_token = Tensor(truncated_normal(rng, (1, d), dtype=T.get_default_dtype()),
                                 requires_grad=True)
        self._pos_embed = sincos_pos_embed(d, config.grid_side, prefix_tokens > 0).astype(
            T.get_default_dtype()
        )
        self.blocks = [Block(d, config.num_heads, config.mlp_ratio, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(d)
        self.pred = Linear(d, config.patch_dim, rng)

    def forward(self, latent: Tensor, plan: MaskPlan) -> Tensor:
        return decode_with_mask_tokens(latent, plan, self)


def decode_with_mask_tokens(latent: Tensor, plan: MaskPlan, decoder: MAEDecoder) -> Tensor:
    """Per-patch pixel predictions ``[b, n, patch_dim]`` from encoded visible tokens."""
    pre = decoder.prefix_tokens
    b, m, _ = latent.shape
    if m - pre != plan.len_keep or plan.ids_restore.shape[0] != b:
        raise ContractError(
            f"latent has {m - pre} visible tokens for batch {b}; plan keeps {plan.len_keep} "
            f"for batch {plan.ids_restore.shape[0]}"
        )
    x = decoder.embed(latent)
    d = x.shape[-1]
    n = plan.num_patches
    rest = x[:, pre:, :]
    if plan.num_masked:
        tokens = T.broadcast_to(T.reshape(decoder.mask_token, (1, 1, d)), (b, plan.num_masked, d))
        rest = T.concat([rest, tokens], axis=1)
    rest = T.gather_rows(rest, plan.ids_restore)
    if pre:
        rest = T.concat([x[:, :pre, :], rest], axis=1)
    x = rest + Tensor(decoder._pos_embed.astype(x.dtype, copy=False))
    for blk in decoder.blocks:
        x = blk(x)
    out = decoder.pred(decoder.norm(x))
    return out[:, pre:, :] if pre else out


def normalized_targets(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + eps)


def mae_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, normalize_targets: bool = True) -> Tensor:
    """Mean squared error over hidden patches, averaged per sample then over the batch."""
    target = np.asarray(target)
    mask = np.asarray(mask)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.ndim == 2:
        pred, target, mask = T.reshape(pred, (1,) + pred.shape), target[None], mask[None]
    if normalize_targets:
        target = normalized_targets(target)
    counts = mask.sum(axis=1).astype(pred.dtype)
    if np.any(counts == 0):
        warnings.warn("mask plan hides no patches; reconstruction loss defined as 0", RuntimeWarning)
        return T.tsum(pred * 0.0)
    diff = pred - Tensor(target.astype(pred.dtype, copy=False))
    per_patch = T.mean(diff * diff, axis=-1)
    weights = mask.astype(pred.dtype) / counts[:, None]
    return T.tsum(per_patch * Tensor(weights)) * (1.0 / mask.shape[0])


class MaskedAutoencoder(Module):
    def __init__(self, encoder_config: ViTConfig, decoder_config: ViTConfig, seed: int = 0):
        if (encoder_config.image_side, encoder_config.patch_side, encoder_config.in_channels) != (
            decoder_config.image_side, decoder_config.patch_side, decoder_config.in_channels
        ):
            raise ConfigError("encoder and decoder disagree on image_side/patch_side/in_channels")
        rng = seeded_rng(seed)
        self.encoder = ViTEncoder(encoder_config, rng)
        self.decoder = MAEDecoder(decoder_config, encoder_config.embed_dim,
                                  self.encoder.prefix_tokens, rng)

    @property
    def config(self) -> dict:
        return {"encoder": self.encoder.config.to_dict(), "decoder": self.decoder.config.to_dict()}

    def forward_encoder(self, patches: Tensor, mask_ratio: float, rng) -> tuple:
        x = self.encoder.embed(patches)
        x, plan = random_masking(x, mask_ratio, rng)
        return self.encoder.encode(self.encoder.attach_cls(x)), plan

    def forward(self, images, mask_ratio: float, rng, normalize_targets: bool = True) -> tuple:
        """Returns ``(loss, pred, plan, patches)``."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        if images.ndim == 3:
            images = images[None]
        patches = patchify(images.astype(T.get_default_dtype(), copy=False),
                           self.encoder.config.patch_side)
        latent, plan = self.forward_encoder(Tensor(patches), mask_ratio, rng)
        pred = decode_with_mask_tokens(latent, plan, self.decoder)
        loss = mae_loss(pred, patches, plan.mask, normalize_targets)
        return loss, pred, plan, patches


def mae_from_config(config: dict, seed: int = 0) -> MaskedAutoencoder:
    return MaskedAutoencoder(ViTConfig(**config["encoder"]), ViTConfig(**config["decoder"]), seed)


# -- schedule ------------------------------------------------------------
def lr_schedule(step: int, *, peak_lr: float, min_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup 0 -> peak over ``warmup_steps``, then half-cosine to ``min_lr`` at ``total_steps``."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return min_lr
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span
    return min_lr + (peak_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- training loop -------------------------------------------------------
@dataclass
class PretrainConfig:
    mask_ratio: float = 0.75
    epochs: int = 800
    warmup_epochs: int = 30
    batch_size: int = 2048
    peak_lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    accum_steps: int = 1
    normalize_targets: bool = True
    seed: int = 0

    def problems(self) -> list:
        out = []
        if not 0.0 < self.mask_ratio < 1.0:
            out.append(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            out.append("warmup_epochs must lie in [0, epochs]")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.accum_steps < 1:
            out.append("accum_steps must be >= 1")
        if self.peak_lr < 0 or self.min_lr < 0:
            out.append("learning rates must be >= 0")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        return out

    def validate(self) -> "PretrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid pretraining configuration", details=problems)
        return self


def desk_pretrain_config(**overrides) -> PretrainConfig:
    """Reference desk-scale run used by the smoke tests (image 32, patch 4)."""
    base = dict(epochs=30, warmup_epochs=1, batch_size=16, peak_lr=1e-2, min_lr=1e-5,
                weight_decay=0.05)
    base.update(overrides)
    return PretrainConfig(**base)


@dataclass
class PretrainResult:
    history: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    best_epoch: int = 0
    best: Optional[Checkpoint] = None
    last: Optional[Checkpoint] = None


def _snapshot(model: MaskedAutoencoder, config: PretrainConfig, meta: dict, opt: AdamW | None = None,
              extra: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(
        kind="pretrain",
        config={"model": model.config, "pretrain": asdict(config), **(extra or {})},
        params={k: v.copy() for k, v in model.state_dict().items()},
        meta=dict(meta),
        optimizer={k: v.copy() for k, v in opt.state_arrays().items()} if opt else {},
    )


def pretrain_loop(dataset: Sequence, model: MaskedAutoencoder, config: PretrainConfig,
                  transform: Optional[Callable] = None, out_dir=None, threads: int = 1,
                  log: Optional[Callable] = None, extra_config: Optional[dict] = None) -> PretrainResult:
    """Train ``model`` on ``dataset`` (a sequence of ``[c, H, W]`` images).

    ``transform(image, rng)`` is applied per sample with a generator keyed by
    (seed, epoch, sample index), so results do not depend on ``threads``.
    Keeps the lowest-epoch-loss and the final weights; writes ``loss.jsonl``,
    ``best.ckpt`` and ``last.ckpt`` when ``out_dir`` is given. ``extra_config``
    sections (e.g. normalisation constants) are stored in both checkpoints.
    """
    from .data import batch_iterator

    config.validate()
    if len(dataset) == 0:
        raise ConfigError("pretraining dataset is empty")
    named = model.trainable_parameters()
    opt = AdamW(named, lr=0.0, betas=(config.beta1, config.beta2),
                weight_decay=config.weight_decay, no_decay=no_decay_names(named))
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    updates_per_epoch = math.ceil(steps_per_epoch / config.accum_steps)
    sched = dict(peak_lr=config.peak_lr, min_lr=config.min_lr,
                 warmup_steps=config.warmup_epochs * updates_per_epoch,
                 total_steps=config.epochs * updates_per_epoch)

    result = PretrainResult()
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "loss.jsonl", "w")

    step = 0
    best_loss = math.inf
    try:
        for epoch in range(1, config.epochs + 1):
            losses = []
            pending = 0
            batches = batch_iterator(dataset, config.batch_size, config.seed, epoch=epoch,
                                     transform=transform, threads=threads)
            for i, (_, images) in enumerate(batches):
                rng = seeded_rng(config.seed, 2, epoch, i)
                loss, *_ = model.forward(images, config.mask_ratio, rng, config.normalize_targets)
                scaled = loss * (1.0 / config.accum_steps) if config.accum_steps > 1 else loss
                scaled.backward()
                pending += 1
                if pending == config.accum_steps or i == steps_per_epoch - 1:
                    step += 1
                    opt.state.lr = lr_schedule(step, **sched)
                    opt.step()
                    opt.zero_grad()
                    pending = 0
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {i}")
                losses.append(value)
                record = {"epoch": epoch, "step": step, "loss": value, "lr": opt.state.lr}
                result.history.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
            epoch_loss = float(np.mean(losses))
            result.epoch_losses.append(epoch_loss)
            if log:
                log(epoch, epoch_loss)
            logger.info("epoch %d loss %.6f", epoch, epoch_loss)
            if epoch_loss < best_loss:
                best_loss = epoch_loss
                result.best_epoch = epoch
                result.best = _snapshot(model, config, {"epoch": epoch, "step": step, "loss": epoch_loss},
                                        extra=extra_config)
    finally:
        if log_file:
            log_file.close()
    result.last = _snapshot(model, config, {"epoch": config.epochs, "step": step,
                                            "loss": result.epoch_losses[-1]}, opt, extra_config)
    if out_dir is not None:
        save_checkpoint(result.best, out_dir / "best.ckpt")
        save_checkpoint(result.last, out_dir / "last.ckpt")
    return result


__all__ = [
    "MaskPlan", "keep_count", "make_mask_plan", "random_masking", "MAEDecoder",
    "decode_with_mask_tokens", "mae_loss", "MaskedAutoencoder", "mae_from_config",
    "lr_schedule", "PretrainConfig", "desk_pretrain_config", "PretrainResult", "pretrain_loop",
    "PRESETS",
]
