import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from songlm.alignment import dpo, pairs, reward
from songlm.alignment.merge import MergeError, MergeWeights, interpolate
from songlm.alignment.pairs import PairError
from songlm.corpus import Conditions, Lyrics
from songlm.lelm import LeLM
from songlm.numerics.params import ParamStore
from songlm.rvq import TokenStreams

from conftest import fake_sample, tiny_model_cfg

scores01 = st.floats(0.0, 1.0, allow_nan=False)


@given(st.lists(st.tuples(scores01, scores01), min_size=2, max_size=6), st.sampled_from(["text", "audio"]))
@settings(max_examples=200, deadline=None)
def test_strategy2_emits_exactly_the_qualifying_pairs(values, mode):
    key = "style_text" if mode == "text" else "style_audio"
    samples = [fake_sample(0, "both", i, {key: v[0]}) for i, v in enumerate(values)]
    got = {(p.winner.index, p.loser.index) for p in pairs.build_pairs_strategy2(samples, mode)}
    lo, margin = (0.3, 0.1) if mode == "text" else (0.75, 0.1)
    want = set()
    for a in samples:
        for b in samples:
            w, l = a.scores[key], b.scores[key]
            ok = w >= lo and (w - l >= margin if mode == "text" else w - l > margin)
            if a is not b and ok:
                want.add((a.index, b.index))
    assert got == want


@given(st.lists(st.integers(0, 30), min_size=2, max_size=6), st.integers(0, 20))
@settings(max_examples=200, deadline=None)
def test_strategy1_gap_rule(errors, gap):
    samples = [fake_sample(0, "text", i, {"errors": e}) for i, e in enumerate(errors)]
    for p in pairs.build_pairs_strategy1(samples, gap):
        assert p.loser.scores["errors"] - p.winner.scores["errors"] > gap


def test_pairs_stay_inside_condition_groups():
    samples = [fake_sample(g, r, i, {"errors": 10 * i}) for g in range(2) for r in ("text", "audio") for i in range(3)]
    out = pairs.build_pairs_strategy1(samples, 5)
    assert out and all(p.winner.key == p.loser.key for p in out)
    assert len(out) == 4 * 3


def test_strategy2_requires_condition():
    s = fake_sample(0, "text", 0, {"style_audio": 0.9}, cond=Conditions(Lyrics([1]), 0))
    with pytest.raises(PairError):
        pairs.build_pairs_strategy2([s], "audio")
    with pytest.raises(PairError):
        pairs.build_pairs_strategy2([s], "video")


def test_dpo_loss_identities():
    assert dpo.dpo_loss(-5, -7, -5, -7) == pytest.approx(math.log(2), abs=1e-15)
    assert dpo.dpo_loss(-3, -9, -5, -7, beta=0.5) == pytest.approx(math.log1p(math.exp(-2.0)))
    # monotone: a larger winner margin never raises the loss
    vals = [dpo.dpo_loss(lw, -7, -5, -7) for lw in np.linspace(-10, 0, 21)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert dpo.dpo_loss(1e6, -1e6, 0, 0) == 0.0
    with pytest.raises(dpo.DPOError):
        dpo.dpo_loss(math.inf, 0, 0, 0)
    with pytest.raises(dpo.DPOError):
        dpo.dpo_loss(0, 0, 0, 0, beta=0)


def test_sequence_logprob_batching_is_consistent():
    model = LeLM.init(tiny_model_cfg(), seed=4)
    rng = np.random.default_rng(0)
    conds = [Conditions(Lyrics([1, 2, 3 + i])) for i in range(3)]
    streams = [TokenStreams(*(rng.integers(0, 16, n) for _ in range(3)), 16, 16, 16) for n in (5, 9, 7)]
    both = dpo.batch_seq_logprobs(model, conds, streams).data
    for c, s, v in zip(conds, streams, both):
        assert dpo.seq_logprob(model, c, s) == pytest.approx(float(v), rel=1e-5)
    assert np.all(both < 0)


def test_merge_weights_validation():
    with pytest.raises(MergeError):
        MergeWeights((0.5, 0.6))
    with pytest.raises(MergeError):
        MergeWeights((1.5, -0.5))
    assert MergeWeights((1 / 3, 1 / 3, 1 / 3)).alpha[0] == pytest.approx(1 / 3)


def test_interpolation_identity_and_linearity():
    rng = np.random.default_rng(0)
    models = [ParamStore({"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5).astype(np.float32)})
              for _ in range(3)]
    for i in range(3):
        alpha = [0.0, 0.0, 0.0]
        alpha[i] = 1.0
        out = interpolate(models, alpha)
        for n in ("a", "b"):
            assert out[n].data.tobytes() == models[i][n].data.tobytes()
    mid = interpolate(models, (0.25, 0.25, 0.5))
    expected = 0.25 * models[0]["a"].data + 0.25 * models[1]["a"].data + 0.5 * models[2]["a"].data
    np.testing.assert_allclose(mid["a"].data, expected, rtol=1e-6)
    with pytest.raises(MergeError):
        interpolate(models[:2], (0.5, 0.25, 0.25))
    with pytest.raises(MergeError):
        interpolate([models[0], ParamStore({"a": np.zeros((3, 4), np.float32)})], (0.5, 0.5))


def test_reward_features_and_bt_loss():
    v = np.zeros((10, 8))
    assert reward.reward_features(v, v).shape == (36,)
    r = reward.bt_loss(reward.tn.Tensor(np.array([0.0])), reward.tn.Tensor(np.array([0.0])))
    assert float(r.data[0]) == pytest.approx(math.log(2))


def test_threshold_respects_min_selected():
    class Fixed:
        def score(self, x):
            return x[:, 0]
    good = [reward.LabeledPair(np.array([1.0]), np.array([0.0]), 1) for _ in range(5)]
    with pytest.raises(reward.UnreachableTargetError):
        reward.tune_threshold(Fixed(), good, min_selected=10)
    res = reward.tune_threshold(Fixed(), good * 2, min_selected=10)
    assert res.accuracy == 1.0 and res.coverage == 1.0 and res.delta == 0.0
