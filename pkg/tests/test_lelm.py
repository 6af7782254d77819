import numpy as np
import pytest

from songlm.corpus import Conditions, Lyrics
from songlm.lelm import (BOS, SEP, LeLM, ModelError, build_prefix, ce_loss, dec_forward, delay_index, lm_forward,
                         shift_right)
from songlm.numerics import tensor as tn

from conftest import tiny_model_cfg


def cond(style=None, prompt=None):
    return Conditions(Lyrics([1, 2, 3]), style, 0 if prompt is not None else None, prompt)


def test_prefix_layout_and_dropout():
    cfg = tiny_model_cfg()
    full = build_prefix(cond(2, np.array([4, 5])), False, False, cfg)
    assert full.ids[0] == BOS and list(full.ids).count(SEP) == 3
    assert len(full) == 1 + 1 + 1 + 2 + 1 + 3 + 1
    bare = build_prefix(cond(2, np.array([4, 5])), True, True, cfg)
    assert len(bare) == 1 + 1 + 1 + 3 + 1 and bare.dropped_style and bare.dropped_audio
    assert not build_prefix(cond(), True, True, cfg).dropped_style


def test_prefix_errors():
    cfg = tiny_model_cfg()
    with pytest.raises(ModelError):
        build_prefix(Conditions(Lyrics([])), False, False, cfg)
    with pytest.raises(ModelError):
        build_prefix(cond(style=99), False, False, cfg)
    with pytest.raises(ModelError):
        build_prefix(Conditions(Lyrics([1]), None, 3, None), False, False, cfg)


def test_config_rejects_decoder_deeper_than_lm():
    with pytest.raises(ModelError):
        tiny_model_cfg(dec_layers=2)


def test_delay_index_clamps():
    np.testing.assert_array_equal(delay_index(6, 2), [2, 3, 4, 5, 5, 5])
    np.testing.assert_array_equal(shift_right(np.array([7, 8, 9]), 16), [16, 7, 8])


def test_forward_shapes_and_loss_at_init():
    cfg = tiny_model_cfg()
    model = LeLM.init(cfg, seed=0)
    rng = np.random.default_rng(0)
    mixed = rng.integers(0, cfg.k_m - 1, size=20)
    hidden, logits = lm_forward(model, build_prefix(cond(1), False, False, cfg), mixed)
    assert logits.shape == (20, cfg.k_m)
    lv, la = dec_forward(model, hidden[-20:], shift_right(mixed % 16, 16), shift_right(mixed % 16, 16))
    assert lv.shape == (20, cfg.k_v) and la.shape == (20, cfg.k_a)
    # small init gives near-uniform predictions
    assert abs(float(ce_loss(logits, mixed).data) - np.log(cfg.k_m)) < 0.1


def test_ragged_lengths_clamp_per_row():
    cfg = tiny_model_cfg()
    model = LeLM.init(cfg, seed=1)
    rng = np.random.default_rng(1)
    h = rng.normal(size=(2, 10, cfg.lm_dim)).astype(np.float32)
    prev = np.zeros((2, 10), np.int64)
    with tn.no_grad():
        lv, _ = dec_forward(model, h, prev, prev, k=3, lengths=np.array([10, 6]))
        short, _ = dec_forward(model, h[1:, :6], prev[1:, :6], prev[1:, :6], k=3)
    np.testing.assert_allclose(lv.data[1, :6], short.data[0], atol=1e-6)
    with pytest.raises(ModelError):
        dec_forward(model, h, prev, prev, k=3, lengths=np.array([11, 6]))


def test_save_load_roundtrip(tmp_path):
    model = LeLM.init(tiny_model_cfg(), seed=2)
    model.meta["stage"] = 2
    model.save(tmp_path / "m.ckpt")
    again = LeLM.load(tmp_path / "m.ckpt")
    assert again.cfg == model.cfg and again.params.checksum() == model.params.checksum()
