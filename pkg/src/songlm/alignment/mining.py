"""Sample mining: generate under three condition regimes and score with the oracles."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..corpus import Conditions, Lyrics, melody_smoothness, split_mixed, style_similarity_oracle, transcribe_oracle
from ..evalx import edit_distance
from ..generation import SamplerConfig, generate_many
from ..numerics.rng import make_rng
from ..rvq import TokenStreams

log = logging.getLogger(__name__)

REGIMES = ("text", "audio", "both")


class MiningError(ValueError):
    pass


@dataclass
class LyricItem:
    lyrics: Lyrics
    style: int


@dataclass
class PromptEntry:
    ref: int                 # index of the reference song
    tokens: np.ndarray       # its leading mixed tokens
    features: np.ndarray     # its mixed features, the style target in audio mode


@dataclass
class GeneratedSample:
    group: int               # lyric index
    regime: str
    index: int               # sample number within (group, regime)
    condition: Conditions
    streams: TokenStreams
    vocal: np.ndarray
    accomp: np.ndarray
    mixed: np.ndarray
    style: int
    prompt_features: np.ndarray | None = None
    scores: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple:
        return (self.group, self.regime)

    @property
    def sid(self) -> str:
        return f"{self.group}:{self.regime}:{self.index}"


def build_prompt_bank(songs, examples) -> dict:
    """Style id -> prompt entries taken from training songs."""
    bank: dict = {}
    for song, ex in zip(songs, examples):
        bank.setdefault(song.style, []).append(
            PromptEntry(song.index, ex.streams.mixed[:16].copy(), song.tracks.mixed))
    return bank


def regime_condition(item: LyricItem, regime: str, prompt: PromptEntry | None) -> Conditions:
    if regime == "text":
        return Conditions(item.lyrics, item.style)
    if prompt is None:
        raise MiningError(f"regime {regime!r} needs an audio prompt")
    style = item.style if regime == "both" else None
    return Conditions(item.lyrics, style, prompt.ref, prompt.tokens)


def score_sample(sample: GeneratedSample) -> None:
    """Fill lyric errors, style similarity and noise-free musicality."""
    symbols = sample.condition.lyrics.symbols
    heard = transcribe_oracle(sample.vocal)
    errors = edit_distance(heard, symbols)
    sample.scores["errors"] = float(errors)
    sample.scores["per"] = min(errors / max(len(symbols), 1), 1.0)
    sample.scores["style_text"] = style_similarity_oracle(sample.mixed, sample.style) if len(sample.mixed) else 0.5
    if sample.prompt_features is not None:
        sample.scores["style_audio"] = (style_similarity_oracle(sample.mixed, sample.prompt_features)
                                        if len(sample.mixed) else 0.5)
    sample.scores["musicality"] = melody_smoothness(sample.vocal)


def mine_samples(model, lyrics_set, prompt_bank, n_per_condition: int, seed: int, codec,
                 sampler: SamplerConfig | None = None, dual: bool = True) -> list[GeneratedSample]:
    """``n_per_condition`` samples per lyric and regime, every one scored."""
    if n_per_condition < 1:
        raise MiningError("n_per_condition must be >= 1")
    if model.meta.get("stage", 0) < 2:
        log.warning("mining from a model that has not finished stage 2")
    sampler = sampler or SamplerConfig(seed=seed)
    conds, meta, seeds = [], [], []
    for g, item in enumerate(lyrics_set):
        entries = prompt_bank.get(item.style, [])
        prompt = None
        if entries:
            prompt = entries[int(make_rng(seed, "prompt", g).integers(len(entries)))]
        for r, regime in enumerate(REGIMES):
            if regime != "text" and prompt is None:
                continue
            cond = regime_condition(item, regime, prompt)
            for j in range(n_per_condition):
                conds.append(cond)
                meta.append((g, regime, j, item.style, prompt))
                seeds.append((g * len(REGIMES) + r) * n_per_condition + j)
    streams = generate_many(model, conds, SamplerConfig(sampler.k, sampler.temperature, seed, sampler.max_frames),
                            seeds, dual=dual)
    samples = []
    for cond, (g, regime, j, style, prompt), st in zip(conds, meta, streams):
        vocal, accomp, mixed = codec.decode_streams(st)
        if vocal is None:
            vocal, accomp = split_mixed(mixed)
        feats = prompt.features if regime != "text" else None
        s = GeneratedSample(g, regime, j, cond, st, vocal, accomp, mixed, style, feats)
        score_sample(s)
        samples.append(s)
    return samples


def group_samples(samples) -> dict:
    groups: dict = {}
    for s in samples:
        groups.setdefault(s.key, []).append(s)
    return groups
