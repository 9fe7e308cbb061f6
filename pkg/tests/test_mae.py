import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maebench import tensor as T
from maebench.errors import ConfigError, ContractError, NumericError
from maebench.mae import (MaskedAutoencoder, PretrainConfig, decode_with_mask_tokens,
                          desk_pretrain_config, keep_count, lr_schedule, mae_loss, make_mask_plan,
                          normalized_targets, pretrain_loop, random_masking)
from maebench.rng import seeded_rng
from maebench.tensor import Tensor
from maebench.vit import ViTConfig, patchify, preset

TINY_ENC = ViTConfig(image_side=8, patch_side=4, embed_dim=16, depth=1, num_heads=2)
TINY_DEC = ViTConfig(image_side=8, patch_side=4, embed_dim=8, depth=1, num_heads=2)


# -- masking -------------------------------------------------------------------
def test_reference_mask_counts():
    plan = make_mask_plan(8, 196, 0.75, seeded_rng(0))
    assert plan.len_keep == 49
    assert (plan.mask.sum(axis=1) == 147).all()


@given(st.integers(1, 256), st.floats(0.0, 0.99), st.integers(0, 2**31))
def test_plan_invariants(n, ratio, seed):
    plan = make_mask_plan(3, n, ratio, seeded_rng(seed))
    expected_keep = min(max(int(math.floor(n * (1 - ratio) + 0.5)), 1), n)
    assert plan.len_keep == expected_keep
    np.testing.assert_array_equal(plan.mask.sum(axis=1), n - plan.len_keep)
    ident = np.take_along_axis(plan.ids_shuffle, plan.ids_restore, axis=1)
    np.testing.assert_array_equal(ident, np.broadcast_to(np.arange(n), (3, n)))
    # the kept prefix of the shuffle is exactly the unmasked set
    for b in range(3):
        kept = np.sort(plan.ids_shuffle[b, : plan.len_keep])
        np.testing.assert_array_equal(kept, np.nonzero(plan.mask[b] == 0)[0])


def test_small_ratio_keeps_everything():
    assert keep_count(196, 1e-6) == 196
    plan = make_mask_plan(1, 196, 1e-6, seeded_rng(0))
    assert plan.num_masked == 0


def test_ratio_out_of_range():
    with pytest.raises(ConfigError):
        make_mask_plan(1, 10, 1.0, seeded_rng(0))
    with pytest.raises(ConfigError):
        make_mask_plan(1, 10, -0.1, seeded_rng(0))
    with pytest.raises(ConfigError):
        PretrainConfig(mask_ratio=0.0).validate()


def test_mask_frequency_is_uniform():
    plan = make_mask_plan(10_000, 16, 0.75, seeded_rng(5))
    freq = plan.mask.mean(axis=0)
    assert np.abs(freq - 0.75).max() < 0.02


def test_unshuffle_reproduces_original_order():
    rng = np.random.default_rng(0)
    patches = rng.normal(size=(4, 196, 12)).astype(np.float32)
    visible, plan = random_masking(Tensor(patches), 0.75, seeded_rng(1))
    hidden = T.gather_rows(Tensor(patches), plan.ids_shuffle[:, plan.len_keep:])
    restored = T.gather_rows(T.concat([visible, hidden], axis=1), plan.ids_restore)
    assert np.array_equal(restored.data, patches)


# -- decoder -------------------------------------------------------------------
def _tiny(seed=0):
    return MaskedAutoencoder(TINY_ENC, TINY_DEC, seed=seed)


def test_decoder_output_covers_all_patches():
    m = _tiny()
    img = np.random.default_rng(0).normal(size=(2, 1, 8, 8)).astype(np.float32)
    for ratio in (0.5, 0.75):
        _, pred, plan, _ = m.forward(img, ratio, seeded_rng(0))
        assert pred.shape == (2, 4, 16)
    with pytest.warns(RuntimeWarning, match="hides no patches"):
        assert m.forward(img, 0.0, seeded_rng(0))[1].shape == (2, 4, 16)


def test_all_visible_ignores_mask_token():
    m = _tiny()
    img = np.random.default_rng(0).normal(size=(1, 1, 8, 8)).astype(np.float32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, a, _, _ = m.forward(img, 0.0, seeded_rng(0))
        m.decoder.mask_token.data += 5.0
        _, b, _, _ = m.forward(img, 0.0, seeded_rng(0))
    assert np.array_equal(a.data, b.data)


def test_mask_token_receives_gradient():
    m = _tiny()
    img = np.random.default_rng(0).normal(size=(2, 1, 8, 8)).astype(np.float32)
    loss, *_ = m.forward(img, 0.5, seeded_rng(0))
    loss.backward()
    assert np.abs(m.decoder.mask_token.grad).sum() > 0


def test_plan_latent_mismatch():
    m = _tiny()
    plan = make_mask_plan(1, 4, 0.5, seeded_rng(0))
    latent = Tensor(np.zeros((1, 4, 16), dtype=np.float32))  # cls + 3 visible, plan keeps 2
    with pytest.raises(ContractError):
        decode_with_mask_tokens(latent, plan, m.decoder)


# -- loss ----------------------------------------------------------------------
def test_loss_zero_when_prediction_matches():
    target = np.random.default_rng(0).normal(size=(2, 6, 4))
    mask = np.array([[1, 0, 1, 0, 0, 1], [0, 1, 1, 0, 1, 0]])
    with T.precision(np.float64):
        assert mae_loss(Tensor(target), target, mask, normalize_targets=False).item() == 0.0
        norm = normalized_targets(target)
        assert mae_loss(Tensor(norm), target, mask).item() == pytest.approx(0.0, abs=1e-24)


def test_visible_patches_carry_no_loss():
    rng = np.random.default_rng(1)
    target = rng.normal(size=(2, 6, 4))
    pred = rng.normal(size=(2, 6, 4))
    mask = np.array([[1, 0, 1, 0, 0, 1], [0, 1, 1, 0, 1, 0]])
    with T.precision(np.float64):
        base = mae_loss(Tensor(pred), target, mask).item()
        perturbed = target.copy()
        perturbed[mask == 0] += rng.normal(size=perturbed[mask == 0].shape) * 10
        assert mae_loss(Tensor(pred), perturbed, mask).item() == base
        pred2 = pred.copy()
        pred2[mask == 0] = 123.0
        assert mae_loss(Tensor(pred2), target, mask).item() == base


def test_two_patch_closed_form():
    target = np.array([[[0.0, 1.0, 2.0, 3.0], [5.0, 5.0, 5.0, 5.0]]])
    c = 0.25
    pred = target + c
    with T.precision(np.float64):
        loss = mae_loss(Tensor(pred), target, np.array([[1, 0]]), normalize_targets=False).item()
    assert loss == pytest.approx(c * c, rel=1e-15)


def test_loss_non_negative_and_zero_masked_warns():
    with T.precision(np.float64):
        with pytest.warns(RuntimeWarning):
            loss = mae_loss(Tensor(np.ones((1, 3, 4))), np.zeros((1, 3, 4)), np.zeros((1, 3)))
    assert loss.item() == 0.0


# -- schedule ------------------------------------------------------------------
SCHED = dict(peak_lr=1e-3, min_lr=1e-6, warmup_steps=30, total_steps=800)


def test_schedule_endpoints():
    assert lr_schedule(0, **SCHED) == 0.0
    assert lr_schedule(1, **SCHED) == pytest.approx(1e-3 / 30)
    assert lr_schedule(30, **SCHED) == 1e-3
    assert abs(lr_schedule(800, **SCHED) - 1e-6) < 1e-12


def test_schedule_continuous_at_junction_and_monotone():
    below = lr_schedule(30 - 1e-9, **SCHED)
    assert abs(below - 1e-3) < 1e-12
    values = [lr_schedule(s, **SCHED) for s in range(30, 801)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_schedule_rejects_negative_step():
    with pytest.raises(ConfigError):
        lr_schedule(-1, **SCHED)


# -- loop ----------------------------------------------------------------------
def _images(n=8, side=8, seed=0):
    return list(np.random.default_rng(seed).normal(size=(n, 1, side, side)).astype(np.float32))


def test_one_step_loop_emits_one_record(tmp_path):
    cfg = PretrainConfig(epochs=1, warmup_epochs=0, batch_size=8, peak_lr=1e-3)
    res = pretrain_loop(_images(), _tiny(), cfg, out_dir=tmp_path)
    assert len(res.history) == 1
    lines = (tmp_path / "loss.jsonl").read_text().splitlines()
    assert len(lines) == 1
    assert set(json.loads(lines[0])) == {"epoch", "step", "loss", "lr"}
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()


def test_loop_is_deterministic():
    cfg = PretrainConfig(epochs=3, warmup_epochs=1, batch_size=3, peak_lr=1e-3)
    a = pretrain_loop(_images(), _tiny(), cfg)
    b = pretrain_loop(_images(), _tiny(), cfg)
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    for k in a.last.params:
        assert np.array_equal(a.last.params[k], b.last.params[k])


def test_gradient_accumulation_matches_large_batch():
    imgs = _images(4)
    with T.precision(np.float64):
        big = _tiny(seed=3)
        acc = _tiny(seed=3)
        loss_big, *_ = big.forward(np.stack(imgs), 0.5, seeded_rng(9))
        loss_big.backward()
        # same plan rows as the big batch, split in two halves of equal size
        plan_rng = seeded_rng(9)
        perms = [plan_rng.permutation(4) for _ in range(4)]

        class Replay:
            def __init__(self, rows):
                self.rows = iter(rows)

            def permutation(self, n):
                return next(self.rows)

        for lo in (0, 2):
            loss, *_ = acc.forward(np.stack(imgs[lo:lo + 2]), 0.5, Replay(perms[lo:lo + 2]))
            (loss * 0.5).backward()
    for name, p in big.named_parameters().items():
        np.testing.assert_allclose(acc.named_parameters()[name].grad, p.grad, rtol=1e-9, atol=1e-15)


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        pretrain_loop([], _tiny(), PretrainConfig(epochs=1, warmup_epochs=0, batch_size=2))


def test_non_finite_loss_raises():
    imgs = _images()
    imgs[0][0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        pretrain_loop(imgs, _tiny(), PretrainConfig(epochs=1, warmup_epochs=0, batch_size=8))


def test_desk_config_matches_reference_run():
    cfg = desk_pretrain_config()
    assert (cfg.mask_ratio, cfg.epochs, cfg.batch_size) == (0.75, 30, 16)
    full = PretrainConfig()
    assert (full.mask_ratio, full.epochs, full.warmup_epochs, full.batch_size) == (0.75, 800, 30, 2048)
    model = MaskedAutoencoder(preset("desk-tiny"), preset("desk-tiny-decoder"))
    assert model.decoder.config.embed_dim == 32 and model.decoder.config.depth == 2


def test_encoder_decoder_geometry_must_agree():
    with pytest.raises(ConfigError):
        MaskedAutoencoder(TINY_ENC, TINY_DEC.with_(patch_side=2))


def test_forward_patches_are_model_input():
    m = _tiny()
    img = np.random.default_rng(0).normal(size=(1, 1, 8, 8)).astype(np.float32)
    _, _, _, patches = m.forward(img, 0.5, seeded_rng(0))
    assert np.array_equal(patches, patchify(img, 4))
