import numpy as np
import pytest

from songlm.lelm import LeLM
from songlm.trainer import (BatchSampler, MetricsWriter, StageConfig, TrainError, batch_prefixes, dual_accuracy,
                            train_joint, train_stage1, train_stage2)

from conftest import tiny_model_cfg


def test_stage_config_validation():
    with pytest.raises(TrainError):
        StageConfig("4")
    with pytest.raises(TrainError):
        StageConfig(dropout=1.5)


def test_sampler_is_reproducible_and_drops_at_rate():
    cfg = StageConfig(batch_size=10, seed=4, dropout=0.5)
    a, b = BatchSampler(1000, cfg), BatchSampler(1000, cfg)
    flags = []
    for step in range(1, 201):
        ia, fa = a.batch(step)
        ib, fb = b.batch(step)
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(fa, fb)
        flags.append(fa)
    rate = np.concatenate(flags).mean()
    assert 0.45 < rate < 0.55


def test_full_dropout_leaves_only_lyrics(tiny_corpus):
    _, _, _, examples = tiny_corpus
    model = LeLM.init(tiny_model_cfg(), seed=0)
    idx, flags = BatchSampler(len(examples), StageConfig(batch_size=16, dropout=1.0)).batch(1)
    assert flags.all()
    for pre, i in zip(batch_prefixes(model, examples, idx, flags), idx):
        assert len(pre) == 3 + len(examples[i].conditions.lyrics) + 1


def test_stage_freezing_and_loss_decrease(tiny_corpus, tmp_path):
    _, _, _, examples = tiny_corpus
    model = LeLM.init(tiny_model_cfg(), seed=3)
    frozen1 = (model.params.checksum("dec.*"), model.params.checksum("heads.*"))
    metrics = MetricsWriter(tmp_path / "metrics.jsonl")
    model, l1 = train_stage1(model, examples, StageConfig("1", steps=40, batch_size=8, warmup=10), metrics)
    assert (model.params.checksum("dec.*"), model.params.checksum("heads.*")) == frozen1
    assert np.mean(l1[-5:]) < l1[0]
    lm = model.params.checksum("lm.*")
    model, l2 = train_stage2(model, examples, StageConfig("2", steps=30, batch_size=8, warmup=10), metrics)
    assert model.params.checksum("lm.*") == lm
    assert np.mean(l2[-5:]) < l2[0]
    assert not model.params.frozen
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 70 and '"stage": "2"' in lines[-1]


def test_wrong_stage_config_is_rejected(tiny_corpus):
    _, _, _, examples = tiny_corpus
    model = LeLM.init(tiny_model_cfg(), seed=0)
    with pytest.raises(TrainError):
        train_stage1(model, examples, StageConfig("2", steps=1))
    with pytest.raises(TrainError):
        train_stage2(model, [], StageConfig("2", steps=1))


def test_joint_updates_everything(tiny_corpus):
    _, _, _, examples = tiny_corpus
    model = LeLM.init(tiny_model_cfg(), seed=0)
    before = {g: model.params.checksum(g) for g in ("lm.*", "dec.*", "heads.*")}
    model, _ = train_joint(model, examples, StageConfig("joint", steps=3, batch_size=4, warmup=2))
    assert all(model.params.checksum(g) != c for g, c in before.items())


def test_trained_dual_accuracy_beats_chance(tiny_trained, tiny_corpus):
    _, _, _, examples = tiny_corpus
    acc_v, acc_a = dual_accuracy(tiny_trained, examples[:16])
    assert acc_v > 1 / 16 and acc_a > 1 / 16
