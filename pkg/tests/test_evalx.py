import json
import math

import numpy as np
import pytest

from songlm import evalx
from songlm.evalx import EvalError, MetricsReport, edit_distance, ngram_overlap, pearson
from songlm.corpus import CorpusConfig, gen_dataset
from songlm.rvq import RvqCodec, TokenStreams


def dp_oracle(a, b):
    """Full-table Wagner-Fischer, written independently of the kernel's two-row version."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return table[-1][-1]


def test_edit_distance_known_values():
    assert edit_distance([], []) == 0
    assert edit_distance([1, 2, 3], []) == 3
    assert edit_distance([1, 2, 3], [1, 3]) == 1
    assert edit_distance([1, 2], [2, 1]) == 2


def test_edit_distance_matches_oracle_randomized():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = rng.integers(0, 4, size=rng.integers(0, 15)).tolist()
        b = rng.integers(0, 4, size=rng.integers(0, 15)).tolist()
        assert edit_distance(a, b) == dp_oracle(a, b)


def test_ngram_overlap_cases():
    a = [1, 2, 3, 4, 5, 6]
    assert ngram_overlap(a, a) == 1.0
    assert ngram_overlap(a, [9] * 10) == 0.0
    assert ngram_overlap([1, 2], a) == 0.0
    # two 5-grams in a, one shared
    assert ngram_overlap(a, [0, 1, 2, 3, 4, 5]) == 0.5
    with pytest.raises(EvalError):
        ngram_overlap(a, a, 0)


def test_pearson():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    rng = np.random.default_rng(1)
    y, z = rng.normal(size=50), rng.normal(size=50)
    assert pearson(y, z) == pytest.approx(np.corrcoef(y, z)[0, 1], abs=1e-12)
    with pytest.raises(EvalError):
        pearson(np.ones(5), x[:5])


def test_mean_ci():
    m, half = evalx.mean_ci([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and half == pytest.approx(1.96 * np.std([1, 2, 3, 4], ddof=1) / 2)


def test_per_analog_is_near_zero_on_ground_truth_tokens():
    songs = gen_dataset(CorpusConfig(count=80, frames=128, seed=2))
    codec = RvqCodec.fit(songs, stages=1, k=64, iters=8)
    vals = [evalx.per_analog(codec.token_streams(s.tracks), codec, s.conditions.lyrics) for s in songs[:20]]
    assert np.mean(vals) <= 0.05
    mixed_only = TokenStreams(codec.token_streams(songs[0].tracks).mixed, k_m=64)
    assert 0.0 <= evalx.per_analog(mixed_only, codec, songs[0].conditions.lyrics) <= 1.0
    assert evalx.per_analog(TokenStreams([], k_m=64), codec, songs[0].conditions.lyrics) == 1.0


def test_metrics_report_rejects_nan_and_writes(tmp_path):
    rep = MetricsReport()
    rep.add("m", {"per_analog": 0.25, "style_sim_text": 0.5, "style_sim_audio": 0.6, "musicality": -0.01})
    with pytest.raises(EvalError):
        rep.add("bad", {"per_analog": math.nan})
    rep.write(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    assert json.loads((tmp_path / "r.json").read_text())["models"]["m"]["per_analog"] == 0.25
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("model,")


def test_memorization_flags_copies():
    train = [np.arange(20), np.arange(100, 120)]
    res = evalx.memorization([np.arange(20)], train)
    assert res["ngram_overlap"] == 1.0 and res["levenshtein_sim"] == 1.0
    res = evalx.memorization([np.arange(200, 220)], train)
    assert res["ngram_overlap"] == 0.0
