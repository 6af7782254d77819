import contextlib

import numpy as np
import pytest

from songlm.alignment.mining import GeneratedSample
from songlm.corpus import Conditions, CorpusConfig, Lyrics, gen_dataset
from songlm.lelm import LeLM, LeLMConfig
from songlm.rvq import RvqCodec, TokenStreams
from songlm.trainer import StageConfig, build_examples, train_stage1, train_stage2

CRITERIA: dict = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record a PASS/FAIL line for an acceptance criterion around the enclosed checks."""
    CRITERIA[number] = (title, "FAIL", "")
    detail: dict = {}
    yield detail
    CRITERIA[number] = (title, "PASS", detail.get("note", ""))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, status, note = CRITERIA[number]
        line = f"criterion {number:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" ({note})" if note else ""))


TINY_FRAMES = 32


def tiny_model_cfg(**kw) -> LeLMConfig:
    base = dict(lm_layers=2, lm_dim=16, lm_heads=2, lm_ffn=32, dec_layers=1, dec_dim=16, dec_heads=2, dec_ffn=32,
                delay=3, k_m=17, k_v=16, k_a=16, max_context=96, max_frames=TINY_FRAMES)
    base.update(kw)
    return LeLMConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = CorpusConfig(count=48, frames=TINY_FRAMES, sections=(2, 2), section_len=(3, 4), seed=5)
    songs = gen_dataset(cfg)
    codec = RvqCodec.fit(songs, stages=2, k=16, iters=4, seed=1)
    return cfg, songs, codec, build_examples(songs, codec)


@pytest.fixture(scope="session")
def tiny_trained(tiny_corpus):
    _, _, codec, examples = tiny_corpus
    model = LeLM.init(tiny_model_cfg(), seed=3)
    model, _ = train_stage1(model, examples, StageConfig("1", steps=40, batch_size=8, warmup=10, seed=2))
    model, _ = train_stage2(model, examples, StageConfig("2", steps=30, batch_size=8, warmup=10, seed=2))
    return model


def fake_sample(group: int, regime: str, index: int, scores: dict, cond=None, streams=None, vocal=None):
    """A mined sample with given scores; unused fields hold small placeholders."""
    cond = cond or Conditions(Lyrics([1, 2, 3]), 0, 0, np.array([1, 2]))
    streams = streams or TokenStreams([1, 2], [1, 2], [1, 2], 16, 16, 16)
    vocal = np.zeros((4, 8), np.float32) if vocal is None else vocal
    return GeneratedSample(group, regime, index, cond, streams, vocal, np.zeros_like(vocal), vocal, 0,
                           None, dict(scores))
