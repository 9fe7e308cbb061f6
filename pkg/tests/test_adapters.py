import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maebench import tensor as T
from maebench.adapters import (Classifier, FinetuneConfig, FinetuneData, LocalizationModel,
                               classifier_forward, decode_cells, desk_finetune_config,
                               few_shot_indices, finetune_checkpoint, finetune_loop,
                               label_groups, localization_forward, localization_loss,
                               localization_targets, model_from_finetune, model_from_pretrained,
                               predict_class, smoothed_loss, smoothed_targets)
from maebench.checkpoint import Checkpoint, dumps, loads
from maebench.errors import CheckpointKindError, ConfigError, ContractError, LoadError
from maebench.mae import MaskedAutoencoder
from maebench.nn import Linear
from maebench.rng import seeded_rng
from maebench.synthetic import box_images, quadrant_images
from maebench.tensor import Tensor
from maebench.vit import ViTConfig

ENC = ViTConfig(image_side=8, patch_side=4, embed_dim=16, depth=1, num_heads=2)
DEC = ViTConfig(image_side=8, patch_side=4, embed_dim=8, depth=1, num_heads=2)


def _imgs(n, seed=0, side=8):
    return np.random.default_rng(seed).normal(size=(n, 1, side, side)).astype(np.float32)


# -- classifier ----------------------------------------------------------------
def test_logit_shape_single_image():
    m = Classifier(ENC, FinetuneConfig(task="multilabel", num_classes=3))
    assert m.forward(_imgs(1)).shape == (1, 3)


def test_frozen_encoder_zero_head_gives_zero_logits():
    cfg = FinetuneConfig(task="multiclass", num_classes=4, zero_init_head=True, freeze_encoder=True)
    m = Classifier(ENC, cfg)
    m.encoder.freeze()
    assert not m.forward(_imgs(3)).data.any()


@pytest.mark.parametrize("frozen", [False, True])
def test_gradient_reaches_encoder_iff_not_frozen(frozen):
    m = Classifier(ENC, FinetuneConfig(task="binary", num_classes=1))
    if frozen:
        m.encoder.freeze()
    loss = smoothed_loss(m.forward(_imgs(2)), np.array([[1.0], [0.0]]), 0.1, "binary")
    loss.backward()
    probe = m.encoder.blocks[0].attn.qkv.weight
    if frozen:
        assert probe.grad is None or not np.any(probe.grad)
        assert "encoder.blocks.0.attn.qkv.weight" not in m.trainable_parameters()
    else:
        assert np.abs(probe.grad).sum() > 0
    assert np.abs(m.head.fc2.weight.grad).sum() > 0


def test_mean_pool_averages_patch_tokens_only():
    cfg = FinetuneConfig(task="binary", pool="mean")
    m = Classifier(ENC, cfg, seed=1)
    x = _imgs(2)
    tokens = m.encoder.forward(x).data
    np.testing.assert_allclose(m.encoder.features(x, "mean").data, tokens[:, 1:].mean(axis=1), rtol=1e-6)
    assert not np.allclose(m.encoder.features(x, "mean").data, tokens[:, 0])
    assert m.forward(x).shape == (2, 1)
    back, cfg2, _ = model_from_finetune(loads(dumps(finetune_checkpoint(m, cfg, ["p"], {}))))
    assert cfg2.pool == "mean" and np.array_equal(back.forward(x).data, m.forward(x).data)


def test_cls_pool_needs_class_token():
    with pytest.raises(ConfigError):
        Classifier(ENC.with_(class_token=False), FinetuneConfig(task="binary", pool="cls"))
    assert Classifier(ENC.with_(class_token=False), FinetuneConfig(task="binary")).forward(_imgs(1)).shape == (1, 1)


def test_head_dim_mismatch_is_config_error():
    m = Classifier(ENC, FinetuneConfig(num_classes=2))
    m.head.fc1 = Linear(7, 16, seeded_rng(0))
    with pytest.raises(ConfigError):
        classifier_forward(_imgs(1), m.encoder, m.head)


def test_predict_class_examples():
    assert predict_class([0.2, 0.5, 0.3]) == 1
    assert predict_class([0.5, 0.5]) == 0
    with pytest.raises(ContractError):
        predict_class([])


@given(st.integers(0, 2**32 - 1))
def test_predict_class_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5))
    a, b = rng.uniform(0.1, 5, 2)
    for f in (np.log, lambda v: a * v + b, lambda v: v**3, lambda v: np.exp(b * v)):
        assert predict_class(f(p)) == predict_class(p)


# -- losses --------------------------------------------------------------------
def test_soft_targets_example():
    soft = smoothed_targets([1], 3, 0.1, "multiclass")
    np.testing.assert_allclose(soft, [[0.1 / 3, 0.9 + 0.1 / 3, 0.1 / 3]], atol=1e-15)
    assert soft.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(smoothed_targets([[1.0, 0.0]], 2, 0.1, "multilabel"), [[0.95, 0.05]])
    for eps in (-0.1, 1.0):
        with pytest.raises(ConfigError):
            smoothed_targets([1], 3, eps, "multiclass")


@given(st.integers(2, 9), st.floats(0.0, 0.99), st.integers(0, 99))
def test_soft_targets_sum_to_one(k, eps, seed):
    idx = np.random.default_rng(seed).integers(0, k, 6)
    np.testing.assert_allclose(smoothed_targets(idx, k, eps, "multiclass").sum(axis=1), 1.0, atol=1e-12)


def test_zero_smoothing_equals_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 4))
    target = rng.integers(0, 4, 5)
    with T.precision(np.float64):
        got = smoothed_loss(Tensor(logits), target, 0.0, "multiclass").item()
    z = logits - logits.max(axis=1, keepdims=True)
    ce = -np.mean(z[np.arange(5), target] - np.log(np.exp(z).sum(axis=1)))
    assert abs(got - ce) < 1e-7
    y = rng.integers(0, 2, (5, 4)).astype(float)
    with T.precision(np.float64):
        got = smoothed_loss(Tensor(logits), y, 0.0, "multilabel").item()
    p = 1 / (1 + np.exp(-logits))
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(got - bce) < 1e-7


def test_confident_correct_logits_drive_loss_to_zero():
    logits = np.array([[60.0, -60.0, -60.0]])
    with T.precision(np.float64):
        assert smoothed_loss(Tensor(logits), [0], 0.0, "multiclass").item() < 1e-20


def test_unannotated_entry_gets_zero_gradient():
    with T.precision(np.float64):
        logits = Tensor(np.random.default_rng(1).normal(size=(2, 3)), requires_grad=True)
        y = np.array([[1.0, np.nan, 0.0], [np.nan, 1.0, 1.0]])
        smoothed_loss(logits, y, 0.1, "multilabel").backward()
    assert logits.grad[0, 1] == 0.0 and logits.grad[1, 0] == 0.0
    assert np.all(logits.grad[~np.isnan(y)] != 0.0)
    with T.precision(np.float64):
        none = Tensor(np.ones((1, 2)), requires_grad=True)
        assert smoothed_loss(none, np.full((1, 2), np.nan), 0.1, "multilabel").item() == 0.0


# -- localization --------------------------------------------------------------
def test_decode_below_threshold_is_empty():
    out = np.zeros((4, 7))
    out[:, 0] = -10.0
    assert decode_cells(out, 2, 4, score_threshold=0.3) == []


def test_decode_single_cell_zero_offsets():
    out = np.zeros((9, 6))  # 3x3 grid, one class
    out[:, 0] = -20.0
    out[5, 0] = 20.0  # row 1, col 2
    out[5, 3:5] = math.log(2.0)
    dets = decode_cells(out, 3, 8, score_threshold=0.5)
    assert len(dets) == 1
    box, cls, score = dets[0]
    np.testing.assert_allclose(box, (20 - 8, 12 - 8, 24, 20))  # clipped to the 24px image
    assert cls == 0 and score > 0.99


def test_decode_suppresses_duplicate_boxes():
    out = np.zeros((4, 6))
    out[:, 0] = -20.0
    out[0, 0], out[1, 0] = 5.0, 4.0
    out[1, 1] = -1.0  # cell (0,1) shifted left onto cell (0,0)
    dets = decode_cells(out, 2, 4, score_threshold=0.1)
    assert len(dets) == 1 and dets[0][0] == (0.0, 0.0, 4.0, 4.0)


def test_targets_round_trip_through_decoder():
    boxes = [[(1, 2.0, 3.0, 10.0, 7.0)]]
    obj, reg, cls, pos = localization_targets(boxes, 4, 4, 2)
    cell = int(np.argmax(obj[0]))
    out = np.zeros((16, 7))
    out[:, 0] = -20.0
    out[cell, 0] = 20.0
    out[cell, 1:5] = reg[0, cell]
    out[cell, 6] = 5.0
    (box, k, _), = decode_cells(out, 4, 4, 0.5)
    np.testing.assert_allclose(box, (2.0, 3.0, 10.0, 7.0), atol=1e-12)
    assert k == 1


def test_localization_loss_is_differentiable():
    cfg = FinetuneConfig(task="localization", num_classes=2)
    m = LocalizationModel(ENC, cfg)
    images, boxes = box_images(2, side=8, num_classes=2, seed=0)
    out = m.forward(images[:, None].astype(np.float32))
    loss = localization_loss(out, boxes, cfg, 2, 4)
    loss.backward()
    assert np.isfinite(loss.item())
    assert np.abs(m.det_head.weight.grad).sum() > 0
    assert len(localization_forward(images[:, None].astype(np.float32), m, 0.0)) == 2


# -- few-shot ------------------------------------------------------------------
@given(st.integers(1, 30), st.integers(0, 2**31))
def test_few_shot_counts_and_determinism(shots, seed):
    rng = np.random.default_rng(seed)
    groups = {k: rng.choice(200, size=int(rng.integers(0, 40)), replace=False) for k in range(4)}
    a = few_shot_indices(groups, shots, seed)
    b = few_shot_indices(groups, shots, seed)
    for k in groups:
        assert len(a[k]) == min(shots, len(groups[k]))
        assert set(a[k]) <= set(groups[k])
        assert np.array_equal(a[k], b[k])


def test_label_groups():
    y = np.array([[1, 0], [0, 1], [1, np.nan], [0, 0]], dtype=float)
    g = label_groups(y, "multilabel")
    assert g[0].tolist() == [0, 2] and g[1].tolist() == [1]
    g = label_groups(np.array([[1.0], [0.0], [1.0]]), "binary")
    assert g[0].tolist() == [1] and g[1].tolist() == [0, 2]


# -- fine-tuning loop ----------------------------------------------------------
def _quadrant(n, seed, side=8):
    images, labels = quadrant_images(n, side=side, seed=seed)
    return FinetuneData(list(((images - 0.5) / 0.25)[:, None].astype(np.float32)),
                        labels[:, None].astype(float))


def test_single_epoch_history(tmp_path):
    cfg = desk_finetune_config(task="binary", num_classes=1, epochs=1, warmup_epochs=0, batch_size=8)
    res = finetune_loop(_quadrant(16, 0), _quadrant(8, 1), Classifier(ENC, cfg), cfg, ["pos"],
                        out_dir=tmp_path)
    assert len(res.history) == 1 and res.best_epoch == 1
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["epoch"] == 1
    assert loads((tmp_path / "best.ckpt").read_bytes()).meta["epoch"] == 1


def test_same_seed_runs_are_bitwise_identical():
    cfg = desk_finetune_config(task="binary", num_classes=1, epochs=3, batch_size=8)
    runs = [finetune_loop(_quadrant(16, 0), _quadrant(8, 1), Classifier(ENC, cfg, seed=2), cfg, ["p"])
            for _ in range(2)]
    assert runs[0].best_epoch == runs[1].best_epoch
    assert dumps(runs[0].best) == dumps(runs[1].best)


def test_best_epoch_is_argmax_with_earliest_tie():
    cfg = desk_finetune_config(task="binary", num_classes=1, epochs=4, batch_size=8)
    res = finetune_loop(_quadrant(16, 0), _quadrant(12, 1), Classifier(ENC, cfg), cfg, ["p"])
    metrics = [r["metric"] for r in res.history]
    assert res.best_epoch == 1 + int(np.argmax(metrics))  # argmax returns the first maximum
    assert res.best_metric == max(metrics)


def test_shots_cap_training_set(caplog):
    cfg = desk_finetune_config(task="binary", num_classes=1, epochs=1, batch_size=4, shots=3)
    res = finetune_loop(_quadrant(20, 0), _quadrant(8, 1), Classifier(ENC, cfg), cfg, ["p"])
    assert res.history[0]["step"] == math.ceil(6 / 4)


def test_empty_validation_rejected():
    cfg = desk_finetune_config(task="binary", num_classes=1, epochs=1)
    with pytest.raises(ConfigError):
        finetune_loop(_quadrant(8, 0), FinetuneData([], np.zeros((0, 1))), Classifier(ENC, cfg), cfg, ["p"])


def test_localization_loop_runs():
    cfg = desk_finetune_config(task="localization", num_classes=2, epochs=2, batch_size=4,
                               score_threshold=0.0)
    imgs, boxes = box_images(8, side=8, num_classes=2, seed=0)
    data = FinetuneData(list(imgs[:, None].astype(np.float32)), boxes=boxes)
    res = finetune_loop(data, data, LocalizationModel(ENC, cfg), cfg, ["a", "b"])
    assert len(res.history) == 2 and res.history[0]["metric_name"] == "ap50"


# -- checkpoints across stages -------------------------------------------------
def _pretrain_ckpt(enc=ENC):
    mae = MaskedAutoencoder(enc, DEC.with_(image_side=enc.image_side, patch_side=enc.patch_side), seed=5)
    return mae, Checkpoint("pretrain", {"model": mae.config}, mae.state_dict())


def test_pretrained_encoder_maps_by_name():
    mae, ckpt = _pretrain_ckpt()
    cfg = FinetuneConfig(task="multilabel", num_classes=3)
    model, loaded, fresh = model_from_pretrained(ckpt, cfg)
    enc_names = {f"encoder.{k}" for k in mae.encoder.named_parameters()}
    assert loaded == enc_names
    assert fresh == {k for k in model.named_parameters() if k.startswith("head.")}
    for name in mae.encoder.named_parameters():
        assert np.array_equal(model.encoder.named_parameters()[name].data,
                              mae.encoder.named_parameters()[name].data)


def test_architecture_mismatch_lists_names():
    _, ckpt = _pretrain_ckpt()
    params = dict(ckpt.params)
    params.pop("encoder.norm.weight")
    with pytest.raises(LoadError) as err:
        model_from_pretrained(Checkpoint("pretrain", ckpt.config, params), FinetuneConfig(num_classes=2))
    assert any("norm.weight" in d for d in err.value.details)


def test_finetune_checkpoint_round_trip_and_kind():
    cfg = FinetuneConfig(task="multiclass", num_classes=3)
    m = Classifier(ENC, cfg, seed=3)
    ckpt = loads(dumps(finetune_checkpoint(m, cfg, ["a", "b", "c"], {"epoch": 1})))
    back, cfg2, classes = model_from_finetune(ckpt)
    x = _imgs(2)
    assert np.array_equal(back.forward(x).data, m.forward(x).data)
    assert cfg2 == cfg and classes == ["a", "b", "c"]
    with pytest.raises(CheckpointKindError):
        model_from_pretrained(ckpt, cfg)


def test_config_problems_collected():
    bad = FinetuneConfig(task="nope", label_smoothing=1.0, shots=0, pool="max")
    assert len(bad.problems()) == 4
    with pytest.raises(ConfigError):
        bad.validate()
