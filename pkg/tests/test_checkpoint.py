import json
import struct

import numpy as np
import pytest

from maebench.checkpoint import (MAGIC, Checkpoint, config_hash, dumps, load_checkpoint, loads,
                                 save_checkpoint)
from maebench.errors import (CheckpointFormatError, CheckpointKindError, DataError,
                             IntegrityError, LoadError)
from maebench.mae import MaskedAutoencoder, mae_from_config
from maebench.rng import seeded_rng
from maebench.vit import ViTConfig

ENC = ViTConfig(image_side=8, patch_side=4, embed_dim=16, depth=1, num_heads=2)
DEC = ViTConfig(image_side=8, patch_side=4, embed_dim=8, depth=1, num_heads=2)


def _model_ckpt(seed=0):
    m = MaskedAutoencoder(ENC, DEC, seed=seed)
    return m, Checkpoint("pretrain", {"model": m.config}, m.state_dict(), meta={"epoch": 3})


def test_forward_is_bitwise_after_reload(tmp_path):
    m, ckpt = _model_ckpt(seed=4)
    path = save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    clone = mae_from_config(back.config["model"], seed=99)  # different init, then overwritten
    clone.load_state_dict(back.params)
    img = np.random.default_rng(0).normal(size=(2, 1, 8, 8)).astype(np.float32)
    a = m.forward(img, 0.5, seeded_rng(1))
    b = clone.forward(img, 0.5, seeded_rng(1))
    assert np.array_equal(a[1].data, b[1].data)
    assert a[0].item() == b[0].item()
    assert back.meta == {"epoch": 3}


def test_float64_and_optimizer_round_trip():
    params = {"w": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.ones(3, dtype=np.float32)}
    opt = {"exp_avg.w": np.full((2, 3), 0.5)}
    back = loads(dumps(Checkpoint("finetune", {"k": [1, 2]}, params, optimizer=opt)))
    assert back.params["w"].dtype == np.float64 and back.params["b"].dtype == np.float32
    for k in params:
        assert np.array_equal(back.params[k], params[k])
    assert np.array_equal(back.optimizer["exp_avg.w"], opt["exp_avg.w"])


def test_every_single_byte_corruption_is_detected():
    _, ckpt = _model_ckpt()
    blob = dumps(ckpt)
    rng = np.random.default_rng(0)
    positions = sorted(set(rng.integers(0, len(blob), 300).tolist()) | {0, 9, len(blob) - 1})
    for pos in positions:
        bad = bytearray(blob)
        bad[pos] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises((IntegrityError, CheckpointFormatError)):
            loads(bytes(bad))


def test_truncation_is_a_format_error():
    blob = dumps(_model_ckpt()[1])
    for cut in (4, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointFormatError):
            loads(blob[:cut])


def test_edited_config_with_recomputed_digest_fails_hash():
    import hashlib

    blob = dumps(Checkpoint("pretrain", {"depth": 1}, {"w": np.zeros(2)}))
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(blob[start : start + hlen])
    header["config"]["depth"] = 2
    hb = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<Q", len(hb)) + hb + blob[start + hlen : -32]
    with pytest.raises(IntegrityError, match="config hash"):
        loads(body + hashlib.sha256(body).digest())


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_kind_check_and_missing_file(tmp_path):
    ckpt = Checkpoint("finetune", {}, {})
    assert ckpt.require_kind("finetune") is ckpt
    with pytest.raises(CheckpointKindError):
        ckpt.require_kind("pretrain")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope.ckpt")
    with pytest.raises(CheckpointFormatError):
        loads(b"NOTACKPT" + bytes(64))


def test_integer_arrays_rejected():
    with pytest.raises(CheckpointFormatError):
        dumps(Checkpoint("pretrain", {}, {"i": np.arange(3)}))


def test_strict_load_lists_name_differences():
    m, ckpt = _model_ckpt()
    params = dict(ckpt.params)
    params.pop(next(iter(params)))
    params["extra.weight"] = np.zeros(2, dtype=np.float32)
    with pytest.raises(LoadError) as err:
        MaskedAutoencoder(ENC, DEC).load_state_dict(params)
    kinds = sorted(d.split(":")[0] for d in err.value.details)
    assert kinds == ["missing", "unexpected"]


def test_atomic_write_leaves_no_temp(tmp_path):
    save_checkpoint(_model_ckpt()[1], tmp_path / "a" / "m.ckpt")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["m.ckpt"]
