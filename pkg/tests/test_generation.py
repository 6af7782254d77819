import math

import numpy as np
import pytest

from songlm.corpus import Conditions, Lyrics
from songlm.generation import (GenerationError, SamplerConfig, default_k, generate, generate_batch, generate_many,
                               top_k_sample)
from songlm.lelm import LeLM, build_prefix, lm_forward
from songlm.numerics import tensor as tn

from conftest import tiny_model_cfg


def chi2_sf_even(x: float, dof: int) -> float:
    """Exact chi-square survival function for an even number of degrees of freedom."""
    m = dof // 2
    term, total = 1.0, 1.0
    for i in range(1, m):
        term *= (x / 2) / i
        total += term
    return math.exp(-x / 2) * total


def conds(n=3):
    return [Conditions(Lyrics([40, 1 + i, 2 + i, 3, 5]), i % 8) for i in range(n)]


def test_k1_is_argmax():
    rng = np.random.default_rng(0)
    cfg = SamplerConfig(k=1)
    for _ in range(1000):
        z = rng.normal(size=65)
        assert top_k_sample(z, cfg, rng) == int(np.argmax(z))


def test_ties_go_to_lowest_index():
    assert top_k_sample(np.array([1.0, 3.0, 3.0]), SamplerConfig(k=1), np.random.default_rng(0)) == 1


def test_uniform_logits_pass_chi_square():
    n, vocab = 100_000, 65
    rng = np.random.default_rng(123)
    cfg = SamplerConfig(k=vocab, temperature=0.9)
    z = np.zeros(vocab)
    counts = np.bincount([top_k_sample(z, cfg, rng) for _ in range(n)], minlength=vocab)
    stat = float(((counts - n / vocab) ** 2 / (n / vocab)).sum())
    assert chi2_sf_even(stat, vocab - 1) > 0.01


def test_top_k_never_picks_outside_top_k():
    rng = np.random.default_rng(1)
    z = rng.normal(size=30)
    top = set(np.argsort(-z)[:4].tolist())
    assert all(top_k_sample(z, SamplerConfig(k=4), rng) in top for _ in range(500))


def test_sampler_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(GenerationError):
        top_k_sample(np.array([0.0, np.nan]), SamplerConfig(), rng)
    with pytest.raises(GenerationError):
        top_k_sample(np.zeros(3), SamplerConfig(k=5), rng)
    with pytest.raises(GenerationError):
        SamplerConfig(temperature=0)
    assert default_k(64) == 8 and default_k(1024) == 50


def test_cached_equals_uncached(tiny_trained):
    cfg = SamplerConfig(seed=5, max_frames=32)
    fast = generate_batch(tiny_trained, conds(), cfg)
    slow = generate_batch(tiny_trained, conds(), SamplerConfig(seed=5, max_frames=32, cache=False))
    for a, b in zip(fast, slow):
        assert a.mixed.tobytes() == b.mixed.tobytes()
        assert a.vocal.tobytes() == b.vocal.tobytes() and a.accomp.tobytes() == b.accomp.tobytes()


def test_batch_row_equals_single_generation(tiny_trained):
    cfg = SamplerConfig(seed=2, max_frames=24)
    many = generate_many(tiny_trained, conds(4), cfg, sample_seeds=[0, 1, 2, 3], chunk=3)
    alone = generate_batch(tiny_trained, [conds(4)[2]], cfg, sample_seeds=[2])[0]
    assert many[2].mixed.tobytes() == alone.mixed.tobytes()
    assert many[2].vocal.tobytes() == alone.vocal.tobytes()


def test_decoder_never_reads_ahead(tiny_trained):
    log = []
    out = generate(tiny_trained, conds(1)[0], SamplerConfig(max_frames=32), access_log=log)
    assert len(log) == len(out)
    k = tiny_trained.cfg.delay
    for rec in log:
        assert rec.position < rec.available
        assert rec.position == min(rec.step + k, len(out) - 1)


def test_greedy_matches_teacher_forced_argmax(tiny_trained):
    c = conds(1)[0]
    out = generate(tiny_trained, c, SamplerConfig(k=1, max_frames=20), dual=False)
    with tn.no_grad():
        _, logits = lm_forward(tiny_trained, build_prefix(c, False, False, tiny_trained.cfg), out.mixed)
    np.testing.assert_array_equal(logits.data.argmax(-1), out.mixed)


def test_eos_bias_extremes():
    model = LeLM.init(tiny_model_cfg(), seed=0)
    eos = model.cfg.eos_id
    # an impossible EOS runs to max_frames; a certain EOS ends before the first frame
    model.params["lm.head.mixed.b"].data[eos] = -50.0
    first = generate(model, conds(1)[0], SamplerConfig(k=1, max_frames=10), dual=False)
    assert len(first) == 10
    model.params["lm.head.mixed.b"].data[eos] = 50.0
    with pytest.raises(GenerationError):
        generate(model, conds(1)[0], SamplerConfig(max_frames=10))


def test_eos_mid_sequence_gives_equal_lengths(tiny_trained):
    model = tiny_trained.copy()
    model.params["lm.head.mixed.b"].data[model.cfg.eos_id] += 2.0
    outs = generate_batch(model, conds(6), SamplerConfig(seed=1, max_frames=32))
    assert any(len(o) < 32 for o in outs)
    for o in outs:
        assert len(o.mixed) == len(o.vocal) == len(o.accomp) >= 1
        o.validate()


def test_context_overflow():
    model = LeLM.init(tiny_model_cfg(max_context=20), seed=0)
    with pytest.raises(GenerationError):
        generate(model, conds(1)[0], SamplerConfig(max_frames=30), dual=False)
